//! Second-stage feature extractor: hierarchical window attention.
//!
//! Tokens live on a square `[batch, G, G, C]` grid. Each stage runs pairs of
//! blocks, the second of each pair attending within windows shifted by
//! `W / 2`. Stages are joined by 2×2 patch merging, which halves `G` and
//! doubles `C`. The last stage is layer-normed and average pooled.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gap, Initializer, LayerNorm, Linear, Mlp, MultiHeadAttention, PatchEmbed, StageMap, StagedEncoder, TransformerBlock,
};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SwinConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Channels of the first stage.
    pub embed_dim: usize,
    /// Blocks per stage; each must be even.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub use_relative_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2],
            num_heads: vec![3, 6],
            window_size: 4,
            mlp_ratio: 4.0,
            use_relative_bias: true,
        }
    }
}

impl SwinConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("swin.{name}");
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                f("patch_size"),
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.depths.is_empty() {
            return Err(Error::config(f("depths"), "at least one stage is required"));
        }
        if let Some(i) = self.depths.iter().position(|&d| d == 0 || d % 2 != 0) {
            return Err(Error::config(
                format!("swin.depths[{i}]"),
                format!("{} is not a positive even block count", self.depths[i]),
            ));
        }
        if self.num_heads.len() != self.depths.len() {
            return Err(Error::config(
                f("num_heads"),
                format!("{} entries for {} stages", self.num_heads.len(), self.depths.len()),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config(f("embed_dim"), "must be positive"));
        }
        if self.window_size == 0 {
            return Err(Error::config(f("window_size"), "must be positive"));
        }
        for s in 0..self.depths.len() {
            let (g, c, h) = (self.stage_grid(s), self.stage_dim(s), self.num_heads[s]);
            if h == 0 || c % h != 0 {
                return Err(Error::config(
                    format!("swin.num_heads[{s}]"),
                    format!("{c} channels are not divisible by {h} heads"),
                ));
            }
            if g == 0 || g % self.window_size != 0 {
                return Err(Error::config(
                    f("window_size"),
                    format!("stage {s} grid {g} is not divisible by window {}", self.window_size),
                ));
            }
            if s + 1 < self.depths.len() && g % 2 != 0 {
                return Err(Error::config(f("depths"), format!("stage {s} grid {g} is odd and cannot be merged")));
            }
        }
        if !(self.mlp_ratio > 0.0) || (0..self.depths.len()).any(|s| self.mlp_hidden(s) == 0) {
            return Err(Error::config(f("mlp_ratio"), "must give a positive hidden width"));
        }
        Ok(())
    }

    pub fn shift(&self) -> usize {
        self.window_size / 2
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side at stage `s`.
    pub fn stage_grid(&self, s: usize) -> usize {
        (self.image_size / self.patch_size.max(1)) >> s
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn mlp_hidden(&self, s: usize) -> usize {
        (self.mlp_ratio * self.stage_dim(s) as f64).round() as usize
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.depths.len().saturating_sub(1))
    }
}

fn grid_shape<T: Element>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    match *s {
        [b, g, g2, c] if g == g2 => Ok([b, g, g2, c]),
        _ => Err(Error::shape(op, format!("expected a square [B, G, G, C] grid, got {s:?}"))),
    }
}

/// `[B, G, G, C] -> [B · (G/W)², W², C]`: windows in row-major tile order,
/// tokens row-major inside each window.
pub fn window_partition<T: Element>(tape: &mut Tape<T>, x: Var, window: usize) -> Result<Var> {
    let [b, g, _, c] = grid_shape(tape, x, "window_partition")?;
    if window == 0 || g % window != 0 {
        return Err(Error::shape("window_partition", format!("grid {g} is not divisible by window {window}")));
    }
    let t = g / window;
    let x = tape.reshape(x, &[b, t, window, t, window, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b * t * t, window * window, c])
}

/// Inverse of [`window_partition`] for a grid of side `grid`.
pub fn window_reverse<T: Element>(tape: &mut Tape<T>, windows: Var, window: usize, grid: usize) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    let &[n, area, c] = s.as_slice() else {
        return Err(Error::shape("window_reverse", format!("expected [windows, W², C], got {s:?}")));
    };
    if window == 0 || !grid.is_multiple_of(window) || area != window * window {
        return Err(Error::shape("window_reverse", format!("{s:?} does not tile a {grid}x{grid} grid with window {window}")));
    }
    let t = grid / window;
    if n % (t * t) != 0 {
        return Err(Error::shape("window_reverse", format!("{n} windows is not a multiple of {}", t * t)));
    }
    let b = n / (t * t);
    let x = tape.reshape(windows, &[b, t, t, window, window, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b, grid, grid, c])
}

/// Rolls the token grid by `(-offset, -offset)`; a negative offset undoes it.
pub fn cyclic_shift<T: Element>(tape: &mut Tape<T>, x: Var, offset: isize) -> Result<Var> {
    let [_, g, _, _] = grid_shape(tape, x, "cyclic_shift")?;
    if offset.unsigned_abs() >= g {
        return Err(Error::shape("cyclic_shift", format!("|offset| {offset} must be below grid {g}")));
    }
    tape.roll(x, &[1, 2], -offset)
}

/// Additive `[windows, W², W²]` mask for attention on a grid rolled by
/// `shift`: 0 between tokens from the same contiguous region of the
/// unrolled grid, `-inf` otherwise.
pub fn build_shift_mask<T: Element>(grid: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    if window == 0 || !grid.is_multiple_of(window) || shift >= window {
        return Err(Error::invalid(
            "build_shift_mask",
            format!("grid {grid}, window {window}, shift {shift}"),
        ));
    }
    let band = |p: usize| -> usize {
        if shift == 0 || p < grid - window {
            0
        } else if p < grid - shift {
            1
        } else {
            2
        }
    };
    let t = grid / window;
    let area = window * window;
    let mut data = Vec::with_capacity(t * t * area * area);
    for wr in 0..t {
        for wc in 0..t {
            let region: Vec<usize> = (0..area)
                .map(|k| 3 * band(wr * window + k / window) + band(wc * window + k % window))
                .collect();
            for i in 0..area {
                for j in 0..area {
                    data.push(if region[i] == region[j] { T::zero() } else { T::neg_infinity() });
                }
            }
        }
    }
    Tensor::new(vec![t * t, area, area], data)
}

/// `[W², W²]` indices into a `(2W−1)²`-row offset table: entry `(i, j)` names
/// the row/column offset from token `j` to token `i`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let area = window * window;
    let span = 2 * window - 1;
    let mut index = Vec::with_capacity(area * area);
    for i in 0..area {
        for j in 0..area {
            let dr = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dc = (i % window) as isize - (j % window) as isize + window as isize - 1;
            index.push(dr as usize * span + dc as usize);
        }
    }
    index
}

/// A transformer block whose attention runs within (optionally shifted)
/// windows.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub block: TransformerBlock,
    /// `[(2W−1)², heads]`, zero at initialization.
    pub relative_bias: Option<ParamId>,
    pub window: usize,
    pub shift: usize,
    pub grid: usize,
    mask: Option<Tensor<f64>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        grid: usize,
        window: usize,
        shift: usize,
        relative_bias: bool,
    ) -> Result<Self> {
        // the offset table is registered with the attention half of the block
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads);
        let span = 2 * window - 1;
        let relative_bias = relative_bias
            .then(|| store.add(format!("{name}.attn.relative_bias"), Tensor::zeros(vec![span * span, heads])));
        let block = TransformerBlock {
            norm1,
            attn,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, mlp_hidden),
        };
        let mask = if shift > 0 { Some(build_shift_mask(grid, window, shift)?) } else { None };
        Ok(SwinBlock { block, relative_bias, window, shift, grid, mask })
    }

    pub fn shifted(&self) -> bool {
        self.shift > 0
    }

    /// `[1, 1, heads, W², W²]` bias gathered from the offset table.
    fn position_bias<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>) -> Result<Option<Var>> {
        let Some(id) = self.relative_bias else { return Ok(None) };
        let heads = self.block.attn.heads;
        let area = self.window * self.window;
        let table = tape.param(ps, id);
        let gathered = tape.index_select(table, &relative_position_index(self.window))?;
        let gathered = tape.reshape(gathered, &[area, area, heads])?;
        let gathered = tape.permute(gathered, &[2, 0, 1])?;
        Ok(Some(tape.reshape(gathered, &[1, 1, heads, area, area])?))
    }

    /// Windowed attention over a normalized `[B, G, G, C]` grid, returning
    /// the grid-shaped output and the per-window weights
    /// `[B · windows, heads, W², W²]`.
    pub fn window_attention<T: Element>(
        &self,
        ps: &ParamStore<T>,
        tape: &mut Tape<T>,
        h: Var,
    ) -> Result<(Var, Var)> {
        let [_, g, _, c] = grid_shape(tape, h, "swin_block")?;
        if g != self.grid {
            return Err(Error::shape("swin_block", format!("grid {g} != configured {}", self.grid)));
        }
        let area = self.window * self.window;
        let windows = (g / self.window).pow(2);
        let shifted = if self.shifted() { cyclic_shift(tape, h, self.shift as isize)? } else { h };
        let parts = window_partition(tape, shifted, self.window)?;
        let mut biases = Vec::new();
        if let Some(mask) = &self.mask {
            let m = tape.constant(mask.cast::<T>().reshape(vec![1, windows, 1, area, area])?);
            biases.push(m);
        }
        biases.extend(self.position_bias(ps, tape)?);
        let out = self.block.attn.forward(ps, tape, parts, &biases, windows)?;
        debug_assert_eq!(tape.shape(out.output)[2], c);
        let merged = window_reverse(tape, out.output, self.window, g)?;
        let restored = if self.shifted() { cyclic_shift(tape, merged, -(self.shift as isize))? } else { merged };
        Ok((restored, out.weights))
    }

    /// `[B, G, G, C] -> [B, G, G, C]`.
    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let x = self.attention_residual(ps, tape, x)?;
        self.block.mlp_residual(ps, tape, x)
    }

    pub fn attention_residual<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.block
            .attention_residual(ps, tape, x, |tape, h| Ok(self.window_attention(ps, tape, h)?.0))
    }
}

/// 2×2 neighborhood merge: `[B, G, G, C] -> [B, G/2, G/2, 2C]`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    /// `[4C, 2C]`, no bias.
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, dim: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    /// Concatenates each neighborhood's channels as top-left, top-right,
    /// bottom-left, bottom-right.
    pub fn gather<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [b, g, _, c] = grid_shape(tape, x, "patch_merge")?;
        if g % 2 != 0 {
            return Err(Error::shape("patch_merge", format!("grid {g} is odd")));
        }
        let x = tape.reshape(x, &[b, g / 2, 2, g / 2, 2, c])?;
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(x, &[b, g / 2, g / 2, 4 * c])
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let x = Self::gather(tape, x)?;
        let x = self.norm.forward(ps, tape, x)?;
        self.reduction.forward(ps, tape, x)
    }
}

#[derive(Debug, Clone)]
enum Step {
    Embed,
    Attention(usize, usize),
    Feedforward(usize, usize),
    Merge(usize),
    Head,
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub config: SwinConfig,
    pub patch_embed: PatchEmbed,
    /// `stages[s][k]` is block `k` of stage `s`.
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerge>,
    pub norm: LayerNorm,
    steps: Vec<Step>,
    map: StageMap,
}

impl SwinEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        config: &SwinConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut map = StageMap::default();
        let mut steps = vec![Step::Embed];
        map.begin_stage(store);
        let patch_embed =
            PatchEmbed::new(store, init, &format!("{prefix}.patch_embed"), config.patch_size, config.embed_dim);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..config.num_stages() {
            let mut blocks = Vec::new();
            for k in 0..config.depths[s] {
                map.begin_stage(store);
                let block = SwinBlock::new(
                    store,
                    init,
                    &format!("{prefix}.stages.{s}.blocks.{k}"),
                    config.stage_dim(s),
                    config.num_heads[s],
                    config.mlp_hidden(s),
                    config.stage_grid(s),
                    config.window_size,
                    if k % 2 == 1 { config.shift() } else { 0 },
                    config.use_relative_bias,
                )?;
                map.begin_stage_at(block.block.mlp_half_start());
                steps.extend([Step::Attention(s, k), Step::Feedforward(s, k)]);
                blocks.push(block);
            }
            stages.push(blocks);
            if s + 1 < config.num_stages() {
                map.begin_stage(store);
                steps.push(Step::Merge(s));
                merges.push(PatchMerge::new(store, init, &format!("{prefix}.stages.{s}.merge"), config.stage_dim(s)));
            }
        }
        map.begin_stage(store);
        steps.push(Step::Head);
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), config.out_dim());
        map.finish(store);
        Ok(SwinEncoder { config: config.clone(), patch_embed, stages, merges, norm, steps, map })
    }

    /// `[B, 3, H, W] -> [B, G, G, C]`.
    pub fn embed<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::shape("swin_forward", format!("expected [B, 3, {n}, {n}], got {s:?}")));
        }
        let tokens = self.patch_embed.forward(ps, tape, images)?;
        let g = self.config.stage_grid(0);
        tape.reshape(tokens, &[s[0], g, g, self.config.embed_dim])
    }

    /// Final norm and pooling: `[B, G, G, C] -> [B, C]`.
    pub fn head<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [b, g, _, c] = grid_shape(tape, x, "swin_forward")?;
        let x = self.norm.forward(ps, tape, x)?;
        let x = tape.reshape(x, &[b, g * g, c])?;
        gap(tape, x)
    }
}

impl StagedEncoder for SwinEncoder {
    fn num_stages(&self) -> usize {
        self.steps.len()
    }

    fn run_stage<T: Element>(&self, stage: usize, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.steps.get(stage) {
            Some(Step::Embed) => self.embed(ps, tape, x),
            Some(&Step::Attention(s, k)) => self.stages[s][k].attention_residual(ps, tape, x),
            Some(&Step::Feedforward(s, k)) => self.stages[s][k].block.mlp_residual(ps, tape, x),
            Some(&Step::Merge(s)) => self.merges[s].forward(ps, tape, x),
            Some(Step::Head) => self.head(ps, tape, x),
            None => Err(Error::invalid("swin", format!("no stage {stage}"))),
        }
    }

    fn stage_of(&self, id: ParamId) -> Option<usize> {
        self.map.stage_of(id)
    }

    fn out_dim(&self) -> usize {
        self.config.out_dim()
    }
}
