//! Helpers shared by unit tests.

use crate::nn::{Linear, MultiHeadAttention};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

/// Uniform values in `[-1, 1)`.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Replaces every all-zero parameter (biases, positional rows, offset
/// tables) with small random values so tests exercise it.
pub fn randomize_zeros(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let v = store.value(id);
        if v.data().iter().all(|&x| x == 0.0) {
            let shape = v.shape().to_vec();
            store.get_mut(id).value = random(&shape, seed + k as u64).map(|x| 0.2 * x);
        }
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain-loop multi-head attention on `x: [n, d]` using the store's weights;
/// `logit_bias(head, i, j)` is added to the scaled logits.
pub fn dense_attention(
    attn: &MultiHeadAttention,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    logit_bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let lin = |l: &Linear, input: &[f64], rows: usize| -> Vec<f64> {
        let w = store.value(l.weight);
        let mut out = vec![0.0; rows * l.out_dim];
        for r in 0..rows {
            for j in 0..l.out_dim {
                let mut s = l.bias.map_or(0.0, |b| store.value(b).data()[j]);
                for i in 0..l.in_dim {
                    s += input[r * l.in_dim + i] * w.get(&[i, j]);
                }
                out[r * l.out_dim + j] = s;
            }
        }
        out
    };
    let q = lin(&attn.query, x.data(), n);
    let k = lin(&attn.key, x.data(), n);
    let v = lin(&attn.value, x.data(), n);
    let (h, dh) = (attn.heads, attn.head_dim());
    let mut ctx = vec![0.0; n * d];
    for head in 0..h {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + head * dh + c] * k[j * d + head * dh + c];
                }
                logits[j] = s / (dh as f64).sqrt() + logit_bias(head, i, j);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                for c in 0..dh {
                    ctx[i * d + head * dh + c] += exps[j] / z * v[j * d + head * dh + c];
                }
            }
        }
    }
    lin(&attn.output, &ctx, n)
}

/// Textbook xoshiro256++ seeded by four SplitMix64 outputs, with the
/// documented coordinate folding for derived streams.
pub struct ReferenceRng {
    s: [u64; 4],
}

impl ReferenceRng {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn new(seed: u64) -> Self {
        let mut state = seed;
        let mut s = [0; 4];
        for slot in &mut s {
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            *slot = Self::mix(state);
        }
        ReferenceRng { s }
    }

    pub fn stream(seed: u64, coords: &[u64]) -> Self {
        let mut folded = Self::mix(seed);
        for &c in coords {
            folded = Self::mix(folded ^ Self::mix(c.wrapping_add(0x9e3779b97f4a7c15)));
        }
        Self::new(folded)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / 9007199254740992.0
    }
}

/// 8×8 model small enough for per-step tests.
pub fn small_config() -> crate::fusion::ModelConfig {
    use crate::swin::SwinConfig;
    use crate::vit::VitConfig;
    crate::fusion::ModelConfig {
        vit: VitConfig { image_size: 8, patch_size: 4, embed_dim: 8, depth: 2, num_heads: 2, mlp_ratio: 2.0 },
        swin: SwinConfig {
            image_size: 8,
            patch_size: 1,
            embed_dim: 4,
            depths: vec![2, 2],
            num_heads: vec![1, 2],
            window_size: 4,
            mlp_ratio: 2.0,
            use_relative_bias: true,
        },
    }
}

/// Synthetic dataset of `count` 8×8 images over the first `classes` labels,
/// written under `dir`.
pub fn synthetic_samples(
    dir: &std::path::Path,
    count: usize,
    classes: usize,
) -> (Vec<crate::data::Sample>, crate::data::LabelVocabulary) {
    use crate::data::synth::{generate, SynthSpec};
    let vocab = crate::data::LabelVocabulary::default().truncated(classes).unwrap();
    let spec = SynthSpec { count, num_classes: classes, image_size: 8, seed: 3 };
    let manifest = generate(dir, &spec, &vocab).unwrap();
    (crate::data::load_manifest(manifest, &vocab).unwrap(), vocab)
}
