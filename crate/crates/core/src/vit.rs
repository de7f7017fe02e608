//! First-stage feature extractor: patch embedding with learned positional
//! embeddings, pre-norm transformer blocks, a final layer norm and global
//! average pooling. There is no class token and no classifier.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gap, Initializer, LayerNorm, PatchEmbed, StageMap, StagedEncoder, TransformerBlock};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("vit.{name}");
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                f("patch_size"),
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                f("num_heads"),
                format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads),
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config(f("mlp_ratio"), "must give a positive hidden width"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub config: VitConfig,
    pub patch_embed: PatchEmbed,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    stages: StageMap,
}

impl VitEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        config: &VitConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut stages = StageMap::default();
        stages.begin_stage(store);
        let patch_embed = PatchEmbed::new(store, init, &format!("{prefix}.patch_embed"), config.patch_size, d);
        let pos_embed = store.add(format!("{prefix}.pos_embed"), Tensor::zeros(vec![config.num_patches(), d]));
        let blocks = (0..config.depth)
            .map(|i| {
                stages.begin_stage(store);
                let block = TransformerBlock::new(
                    store,
                    init,
                    &format!("{prefix}.blocks.{i}"),
                    d,
                    config.num_heads,
                    config.mlp_hidden(),
                );
                stages.begin_stage_at(block.mlp_half_start());
                block
            })
            .collect();
        stages.begin_stage(store);
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d);
        stages.finish(store);
        Ok(VitEncoder {
            config: config.clone(),
            patch_embed,
            pos_embed,
            blocks,
            norm,
            stages,
        })
    }

    /// Projects `[batch, patches, 3·p²]` patch rows and adds positional
    /// embedding row `i` to token `i`.
    pub fn embed_patches<T: Element>(&self, ps: &ParamStore<T>, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let tokens = self.patch_embed.proj.forward(ps, tape, patches)?;
        let pos = tape.param(ps, self.pos_embed);
        let pos = tape.reshape(pos, &[1, self.config.num_patches(), self.config.embed_dim])?;
        tape.add_broadcast(tokens, pos)
    }

    fn check_images<T: Element>(&self, tape: &Tape<T>, images: Var) -> Result<()> {
        let s = tape.shape(images);
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::shape("vit_forward", format!("expected [B, 3, {n}, {n}], got {s:?}")));
        }
        Ok(())
    }
}

impl StagedEncoder for VitEncoder {
    /// Patch embedding, then the attention and MLP halves of every block,
    /// then the pooling head.
    fn num_stages(&self) -> usize {
        2 * self.blocks.len() + 2
    }

    fn run_stage<T: Element>(&self, stage: usize, ps: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match stage {
            0 => {
                self.check_images(tape, x)?;
                let patches = crate::nn::patchify(tape, x, self.config.patch_size)?;
                self.embed_patches(ps, tape, patches)
            }
            s if s <= 2 * self.blocks.len() => {
                let block = &self.blocks[(s - 1) / 2];
                if s % 2 == 1 {
                    block.attention_residual(ps, tape, x, |tape, h| Ok(block.attn.forward(ps, tape, h, &[], 1)?.output))
                } else {
                    block.mlp_residual(ps, tape, x)
                }
            }
            s if s == 2 * self.blocks.len() + 1 => {
                let x = self.norm.forward(ps, tape, x)?;
                gap(tape, x)
            }
            s => Err(Error::invalid("vit", format!("no stage {s}"))),
        }
    }

    fn stage_of(&self, id: ParamId) -> Option<usize> {
        self.stages.stage_of(id)
    }

    fn out_dim(&self) -> usize {
        self.config.embed_dim
    }
}
