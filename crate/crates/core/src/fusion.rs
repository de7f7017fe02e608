//! Dual-stage classifier: the pooled ViT feature is projected to the Swin
//! width, concatenated with the pooled Swin feature (ViT half first), and
//! mapped to one logit per label by a single linear head.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear, StagedEncoder};
use crate::swin::{SwinConfig, SwinEncoder};
use crate::rng::{stream, Rng};
use crate::tensor::{
    grad_check, Element, GradCheckReport, Objective, OpKind, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::vit::{VitConfig, VitEncoder};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub swin: SwinConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.swin.validate()?;
        if self.vit.image_size != self.swin.image_size {
            return Err(Error::config(
                "swin.image_size",
                format!("{} differs from vit.image_size {}", self.swin.image_size, self.vit.image_size),
            ));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.vit.image_size
    }
}

/// Parameter layout of the model. Parameter values live in a separate
/// [`ParamStore`], so one network can be evaluated at either precision.
#[derive(Debug, Clone)]
pub struct DualStageNet {
    pub vit: VitEncoder,
    pub swin: SwinEncoder,
    /// `[d_v, d_s]` plus bias.
    pub projection: Linear,
    /// `[2·d_s, K]` plus bias.
    pub classifier: Linear,
    pub num_labels: usize,
}

impl DualStageNet {
    /// Registers parameters in the order ViT, Swin, projection, classifier.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        num_labels: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_labels == 0 {
            return Err(Error::config("num_labels", "must be positive"));
        }
        let mut init = Initializer::new(seed);
        let vit = VitEncoder::new(store, &mut init, "vit", &config.vit)?;
        let swin = SwinEncoder::new(store, &mut init, "swin", &config.swin)?;
        let (dv, ds) = (vit.out_dim(), swin.out_dim());
        let projection = Linear::new(store, &mut init, "fusion.projection", dv, ds, true);
        let classifier = Linear::new(store, &mut init, "fusion.classifier", 2 * ds, num_labels, true);
        Ok(DualStageNet { vit, swin, projection, classifier, num_labels })
    }

    pub fn vit_dim(&self) -> usize {
        self.vit.out_dim()
    }

    pub fn swin_dim(&self) -> usize {
        self.swin.out_dim()
    }

    /// `[B, d_v] -> [B, d_s]`.
    pub fn project_vit<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, f_v: Var) -> Result<Var> {
        let s = tape.shape(f_v);
        if s.len() != 2 || s[1] != self.vit_dim() {
            return Err(Error::shape("project_vit", format!("expected [B, {}], got {s:?}", self.vit_dim())));
        }
        self.projection.forward(ps, tape, f_v)
    }

    /// `[B, 2·d_s] -> [B, K]` logits.
    pub fn classify<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, fused: Var) -> Result<Var> {
        let s = tape.shape(fused);
        if s.len() != 2 || s[1] != self.classifier.in_dim {
            return Err(Error::shape("classify", format!("expected [B, {}], got {s:?}", self.classifier.in_dim)));
        }
        self.classifier.forward(ps, tape, fused)
    }

    /// Projection, fusion and classification of already pooled features.
    pub fn head<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, f_v: Var, f_s: Var) -> Result<Var> {
        let p = self.project_vit(ps, tape, f_v)?;
        let fused = fuse(tape, p, f_s)?;
        self.classify(ps, tape, fused)
    }

    /// `[B, 3, H, W] -> [B, K]` logits.
    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let f_v = self.vit.forward(ps, tape, images)?;
        let f_s = self.swin.forward(ps, tape, images)?;
        self.head(ps, tape, f_v, f_s)
    }
}

/// Concatenates `[B, d]` features along the last axis, `a` first.
pub fn fuse<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("fuse", format!("{sa:?} vs {sb:?}")));
    }
    tape.concat_lastdim(&[a, b])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Element = f64> {
    /// Sigmoid of each logit, `[B, K]`.
    pub probabilities: Tensor<T>,
    /// Index of the largest logit per row; ties go to the lowest index.
    pub labels: Vec<usize>,
}

pub fn predict<T: Element>(logits: &Tensor<T>) -> Result<Prediction<T>> {
    let &[_, k] = logits.shape() else {
        return Err(Error::shape("predict", format!("expected [B, K], got {:?}", logits.shape())));
    };
    let probabilities = logits.map(|z| {
        if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        }
    });
    let labels = logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect();
    Ok(Prediction { probabilities, labels })
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct DualStageModel<T: Element = f64> {
    pub config: ModelConfig,
    pub net: DualStageNet,
    pub params: ParamStore<T>,
}

impl<T: Element> DualStageModel<T> {
    pub fn new(config: &ModelConfig, num_labels: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = DualStageNet::new(&mut params, config, num_labels, seed)?;
        Ok(DualStageModel { config: config.clone(), net, params })
    }

    pub fn num_labels(&self) -> usize {
        self.net.num_labels
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        self.net.forward(&self.params, tape, images)
    }

    /// Logits for a `[B, 3, H, W]` batch without recording gradients.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Marks one parameter group (`"vit"`, `"swin"` or `"fusion"`) frozen or
    /// trainable; returns the number of parameters affected.
    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<usize> {
        if !matches!(group, "vit" | "swin" | "fusion") {
            return Err(Error::invalid("set_trainable", format!("unknown group {group:?}")));
        }
        Ok(self.params.set_trainable_prefix(&format!("{group}."), trainable))
    }
}

/// Mean BCE-with-logits loss of the model on one fixed batch, evaluated so a
/// change to one parameter only recomputes the stages downstream of it.
pub struct ModelObjective<'a> {
    net: &'a DualStageNet,
    images: Tensor<f64>,
    targets: Tensor<f64>,
    vit_inputs: Vec<Tensor<f64>>,
    swin_inputs: Vec<Tensor<f64>>,
    vit_feature: Option<Tensor<f64>>,
    swin_feature: Option<Tensor<f64>>,
    corruption: Option<(OpKind, f64)>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(net: &'a DualStageNet, images: Tensor<f64>, targets: Tensor<f64>) -> Self {
        ModelObjective {
            net,
            images,
            targets,
            vit_inputs: Vec::new(),
            swin_inputs: Vec::new(),
            vit_feature: None,
            swin_feature: None,
            corruption: None,
        }
    }

    /// Test hook: scales the backward rule of every `kind` op by `factor`.
    #[doc(hidden)]
    pub fn corrupt_backward(mut self, kind: OpKind, factor: f64) -> Self {
        self.corruption = Some((kind, factor));
        self
    }

    fn cached(&self) -> Result<(&Tensor<f64>, &Tensor<f64>)> {
        match (&self.vit_feature, &self.swin_feature) {
            (Some(v), Some(s)) => Ok((v, s)),
            _ => Err(Error::invalid("model_objective", "loss_and_grads must run first")),
        }
    }
}

fn run_recording<E: StagedEncoder>(
    enc: &E,
    ps: &ParamStore<f64>,
    tape: &mut Tape<f64>,
    mut x: Var,
    inputs: &mut Vec<Tensor<f64>>,
) -> Result<Var> {
    inputs.clear();
    for s in 0..enc.num_stages() {
        inputs.push(tape.value(x).clone());
        x = enc.run_stage(s, ps, tape, x)?;
    }
    Ok(x)
}

impl Objective for ModelObjective<'_> {
    fn loss_and_grads(&mut self, store: &ParamStore<f64>) -> Result<(f64, ParamGrads<f64>)> {
        let mut tape = Tape::new();
        if let Some((kind, factor)) = self.corruption {
            tape.corrupt_backward(kind, factor);
        }
        let x = tape.constant(self.images.clone());
        let f_v = run_recording(&self.net.vit, store, &mut tape, x, &mut self.vit_inputs)?;
        let f_s = run_recording(&self.net.swin, store, &mut tape, x, &mut self.swin_inputs)?;
        self.vit_feature = Some(tape.value(f_v).clone());
        self.swin_feature = Some(tape.value(f_s).clone());
        let logits = self.net.head(store, &mut tape, f_v, f_s)?;
        let loss = tape.bce_with_logits(logits, &self.targets)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.into_param_grads(store.len());
        Ok((value, grads))
    }

    fn loss_after_change(&mut self, store: &ParamStore<f64>, changed: ParamId) -> Result<f64> {
        let logits = self.logits_after_change(store, changed)?;
        let mut tape = Tape::no_grad();
        let z = tape.constant(logits);
        let loss = tape.bce_with_logits(z, &self.targets)?;
        Ok(tape.value(loss).item())
    }

    /// Sums per-logit loss differences, each computed as
    /// `softplus(a) - softplus(b) = log1p(σ(b)·expm1(a - b))`, so nearly equal
    /// losses are not subtracted.
    fn central_difference(&mut self, store: &mut ParamStore<f64>, id: ParamId, i: usize, step: f64) -> Result<f64> {
        let original = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = original + step;
        let plus = self.logits_after_change(store, id);
        store.get_mut(id).value.data_mut()[i] = original - step;
        let minus = self.logits_after_change(store, id);
        store.get_mut(id).value.data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);
        let terms = plus.data().iter().zip(minus.data()).zip(self.targets.data()).map(|((&a, &b), &y)| {
            let d = a - b;
            let sigma_b = if b >= 0.0 { 1.0 / (1.0 + (-b).exp()) } else { b.exp() / (1.0 + b.exp()) };
            (sigma_b * d.exp_m1()).ln_1p() - y * d
        });
        Ok(crate::tensor::compensated_sum(terms) / plus.numel() as f64)
    }
}

impl ModelObjective<'_> {
    fn logits_after_change(&self, store: &ParamStore<f64>, changed: ParamId) -> Result<Tensor<f64>> {
        let (vit_feature, swin_feature) = self.cached()?;
        let mut tape = Tape::no_grad();
        let (f_v, f_s) = if let Some(k) = self.net.vit.stage_of(changed) {
            let x = tape.constant(self.vit_inputs[k].clone());
            let f_v = self.net.vit.forward_from(k, store, &mut tape, x)?;
            (f_v, tape.constant(swin_feature.clone()))
        } else if let Some(k) = self.net.swin.stage_of(changed) {
            let x = tape.constant(self.swin_inputs[k].clone());
            let f_s = self.net.swin.forward_from(k, store, &mut tape, x)?;
            (tape.constant(vit_feature.clone()), f_s)
        } else {
            (tape.constant(vit_feature.clone()), tape.constant(swin_feature.clone()))
        };
        let logits = self.net.head(store, &mut tape, f_v, f_s)?;
        Ok(tape.value(logits).clone())
    }
}

/// Step of the whole-model finite-difference check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Settings of a whole-model gradient check.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub config: ModelConfig,
    pub num_labels: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Parameter groups (`"vit"`, `"swin"`, `"fusion"`) to leave out.
    pub frozen: Vec<String>,
    #[doc(hidden)]
    pub corrupt: Option<(OpKind, f64)>,
}

impl ModelGradCheck {
    pub fn new(config: ModelConfig, num_labels: usize, seed: u64) -> Self {
        ModelGradCheck { config, num_labels, batch_size: 2, seed, frozen: Vec::new(), corrupt: None }
    }

    /// Uniform `[-1, 1)` images and fair-coin targets from the gradient-check
    /// stream.
    pub fn batch(&self) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let s = self.config.image_size();
        let mut rng = Rng::stream(self.seed, &[stream::GRADCHECK]);
        let images = (0..self.batch_size * 3 * s * s).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let targets = (0..self.batch_size * self.num_labels)
            .map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok((
            Tensor::new(vec![self.batch_size, 3, s, s], images)?,
            Tensor::new(vec![self.batch_size, self.num_labels], targets)?,
        ))
    }

    /// Checks every trainable parameter of a freshly initialized model.
    pub fn run(&self) -> Result<GradCheckReport> {
        let mut model = DualStageModel::<f64>::new(&self.config, self.num_labels, self.seed)?;
        for group in &self.frozen {
            model.set_trainable(group, false)?;
        }
        let (images, targets) = self.batch()?;
        let net = model.net.clone();
        let mut objective = ModelObjective::new(&net, images, targets);
        if let Some((kind, factor)) = self.corrupt {
            objective = objective.corrupt_backward(kind, factor);
        }
        grad_check(&mut model.params, &mut objective, GRAD_CHECK_STEP)
    }
}
