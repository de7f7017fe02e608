//! Layers shared by the ViT and Swin branches.
//!
//! Layers hold [`ParamId`]s only; values live in a [`ParamStore`] so that
//! optimizers, checkpoints and gradient checks can walk a single flat list.

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Seeded weight initializer.
///
/// Tensors draw their values in registration order, each filled row-major
/// with one [`Rng::uniform`] draw per scalar.
pub struct Initializer {
    rng: Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: Rng::stream(seed, &[stream::INIT]),
        }
    }

    /// Uniform(-s, s) with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Element>(&mut self, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.uniform(-s, s))).collect();
        Tensor::new(shape.to_vec(), data).expect("xavier shape")
    }
}

/// Affine map over the last axis: `x · W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim, &[in_dim, out_dim]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?} does not end in {}", self.in_dim),
            ));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let w = tape.param(ps, self.weight);
        let mut y = tape.matmul(flat, w)?;
        if let Some(bias) = self.bias {
            let b = tape.param(ps, bias);
            let b = tape.reshape(b, &[1, self.out_dim])?;
            y = tape.add_broadcast(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ps, tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(ps, tape, h)
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax weights, `[batch, heads, n, n]`.
    pub weights: Var,
}

/// Multi-head self-attention.
///
/// The key projection has no bias: a key bias adds the same value to every
/// logit in a row, which softmax cancels, so its gradient is identically 0.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, init, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, init, &format!("{name}.output"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attention over `x: [batch, n, dim]`.
    ///
    /// `logit_biases` are added to the scaled logits before the softmax. Each
    /// has rank 5 and broadcasts against `[batch / groups, groups, heads, n, n]`,
    /// which lets Swin add a per-window mask (`[1, windows, 1, n, n]`) and a
    /// per-head position bias (`[1, 1, heads, n, n]`) with `groups = windows`.
    pub fn forward<T: Element>(
        &self,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        logit_biases: &[Var],
        groups: usize,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        let &[batch, n, dim] = shape.as_slice() else {
            return Err(Error::shape("attention", format!("expected [batch, n, d], got {shape:?}")));
        };
        if dim != self.dim {
            return Err(Error::shape("attention", format!("width {dim} != {}", self.dim)));
        }
        if groups == 0 || batch % groups != 0 {
            return Err(Error::shape("attention", format!("batch {batch} not divisible into {groups} groups")));
        }
        let (h, dh) = (self.heads, self.head_dim());
        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[batch, n, h, dh])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(ps, tape, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(ps, tape, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(ps, tape, x)?;
        let v = split(tape, v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if !logit_biases.is_empty() {
            scores = tape.reshape(scores, &[batch / groups, groups, h, n, n])?;
            for &b in logit_biases {
                scores = tape.add_broadcast(scores, b)?;
            }
            scores = tape.reshape(scores, &[batch, h, n, n])?;
        }
        let weights = tape.softmax_lastdim(scores)?;
        let ctx = tape.batch_matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, n, dim])?;
        let output = self.output.forward(ps, tape, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Turns an additive `[n, n]` mask into the rank-5 logit bias expected by
/// [`MultiHeadAttention::forward`].
pub fn mask_as_logit_bias<T: Element>(mask: Tensor<T>) -> Result<Tensor<T>> {
    let n = mask.shape().first().copied().unwrap_or(0);
    mask.reshape(vec![1, 1, 1, n, n])
}

/// Pre-norm transformer block:
/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, mlp_hidden),
        }
    }

    /// Block over `x: [batch, n, dim]` with plain full attention.
    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_with(ps, tape, x, |tape, h| {
            Ok(self.attn.forward(ps, tape, h, &[], 1)?.output)
        })
    }

    /// Block whose attention sublayer is `attend(norm1(x))`; `x` may have any
    /// shape ending in `dim`.
    pub fn forward_with<T: Element, F>(
        &self,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        attend: F,
    ) -> Result<Var>
    where
        F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    {
        let x = self.attention_residual(ps, tape, x, attend)?;
        self.mlp_residual(ps, tape, x)
    }

    /// `x + attend(norm1(x))`.
    pub fn attention_residual<T: Element, F>(
        &self,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        attend: F,
    ) -> Result<Var>
    where
        F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    {
        let h = self.norm1.forward(ps, tape, x)?;
        let h = attend(tape, h)?;
        tape.add(x, h)
    }

    /// `x + mlp(norm2(x))`.
    pub fn mlp_residual<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.norm2.forward(ps, tape, x)?;
        let h = self.mlp.forward(ps, tape, h)?;
        tape.add(x, h)
    }

    /// First parameter of the MLP half, for splitting a block into two stages.
    pub fn mlp_half_start(&self) -> ParamId {
        self.norm2.gamma
    }
}

/// Splits `[batch, 3, H, W]` images into `[batch, patches, 3·p²]` rows.
///
/// Patches follow row-major order over the patch grid; each row is the
/// pixel block flattened channel-major, then by row, then by column.
pub fn patchify<T: Element>(tape: &mut Tape<T>, images: Var, patch: usize) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let &[batch, channels, height, width] = shape.as_slice() else {
        return Err(Error::shape("patchify", format!("expected [B, C, H, W], got {shape:?}")));
    };
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::config(
            "patch_size",
            format!("{height}x{width} image is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (height / patch, width / patch);
    let x = tape.reshape(images, &[batch, channels, gh, patch, gw, patch])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[batch, gh * gw, channels * patch * patch])
}

/// Patch split followed by a linear projection to `dim`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        patch_size: usize,
        dim: usize,
    ) -> Self {
        let in_dim = 3 * patch_size * patch_size;
        PatchEmbed {
            proj: Linear::new(store, init, &format!("{name}.proj"), in_dim, dim, true),
            patch_size,
        }
    }

    /// `[batch, 3, H, W] -> [batch, patches, dim]`.
    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let patches = patchify(tape, images, self.patch_size)?;
        self.proj.forward(ps, tape, patches)
    }
}

/// Global average pooling over the token axis: `[batch, tokens, d] -> [batch, d]`.
pub fn gap<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("gap", format!("expected [.., tokens, d], got {shape:?}")));
    }
    tape.mean_axis(x, shape.len() - 2)
}

/// Contiguous ranges of parameter ids owned by each stage of an encoder,
/// recorded while the stages register their parameters in order.
#[derive(Debug, Clone, Default)]
pub struct StageMap {
    starts: Vec<usize>,
    end: usize,
}

impl StageMap {
    pub fn begin_stage<T: Element>(&mut self, store: &ParamStore<T>) {
        self.starts.push(store.next_id().index());
    }

    /// Starts a stage at an already registered parameter.
    pub fn begin_stage_at(&mut self, first: ParamId) {
        assert!(
            self.starts.last().is_none_or(|&s| s <= first.index()),
            "stages must be registered in order"
        );
        self.starts.push(first.index());
    }

    pub fn finish<T: Element>(&mut self, store: &ParamStore<T>) {
        self.end = store.next_id().index();
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn stage_of(&self, id: ParamId) -> Option<usize> {
        let i = id.index();
        if self.starts.is_empty() || i < self.starts[0] || i >= self.end {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= i) - 1)
    }
}

/// An encoder evaluated as a chain of stages: stage 0 consumes the image
/// batch, and each later stage consumes its predecessor's output. Every
/// parameter belongs to exactly one stage.
pub trait StagedEncoder {
    fn num_stages(&self) -> usize;

    fn run_stage<T: Element>(
        &self,
        stage: usize,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var>;

    fn stage_of(&self, id: ParamId) -> Option<usize>;

    /// Width of the pooled feature vector.
    fn out_dim(&self) -> usize;

    /// `[batch, 3, H, W] -> [batch, out_dim]`.
    fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        self.forward_from(0, ps, tape, images)
    }

    /// Runs stages `first..` starting from `x`, the input of stage `first`.
    fn forward_from<T: Element>(
        &self,
        first: usize,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        (first..self.num_stages()).try_fold(x, |x, s| self.run_stage(s, ps, tape, x))
    }
}
