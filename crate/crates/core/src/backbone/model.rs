use serde::{Deserialize, Serialize};

use super::tokens::{embed_patches, temporal_encoding};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::params::{join, LayerNormParams, Linear, ParamTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Image height and width in pixels.
    pub image: (usize, usize),
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Add an encoding of each frame's position within its window.
    pub temporal_encoding: bool,
    /// Block whose output is the window feature fed to memory; `None` for
    /// the last block.
    pub feature_layer: Option<usize>,
}

impl BackboneConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn feature_block(&self) -> usize {
        self.feature_layer.unwrap_or(self.blocks - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.image.0.is_multiple_of(self.patch) || !self.image.1.is_multiple_of(self.patch) {
            return bad(format!("image {:?} not divisible by patch {}", self.image, self.patch));
        }
        if self.image.0 == 0 || self.image.1 == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.blocks == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "need blocks ≥ 1 and heads dividing d_model ({} / {})",
                self.d_model, self.heads
            ));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if self.feature_block() >= self.blocks {
            return bad(format!("feature layer {} beyond {} blocks", self.feature_block(), self.blocks));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub norm1: LayerNormParams<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm2: LayerNormParams<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

impl<T> ParamTree<T> for BlockParams<T> {
    type Mapped<U> = BlockParams<U>;
    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.map_named(&join(p, "norm1"), f),
            q: self.q.map_named(&join(p, "q"), f),
            k: self.k.map_named(&join(p, "k"), f),
            v: self.v.map_named(&join(p, "v"), f),
            o: self.o.map_named(&join(p, "o"), f),
            norm2: self.norm2.map_named(&join(p, "norm2"), f),
            mlp1: self.mlp1.map_named(&join(p, "mlp1"), f),
            mlp2: self.mlp2.map_named(&join(p, "mlp2"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T = Tensor> {
    pub embed: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: LayerNormParams<T>,
}

impl<T> ParamTree<T> for BackboneParams<T> {
    type Mapped<U> = BackboneParams<U>;
    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BackboneParams<U> {
        BackboneParams {
            embed: self.embed.map_named(&join(p, "embed"), f),
            blocks: self.blocks.map_named(&join(p, "blocks"), f),
            final_norm: self.final_norm.map_named(&join(p, "final_norm"), f),
        }
    }
}

impl BackboneParams<Tensor> {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let p_in = cfg.patch * cfg.patch * cfg.channels;
        let sd = 1.0 / (d as Real).sqrt();
        // residual branches start damped so the stack is near the identity
        let out_scale = 0.5 / (cfg.blocks as Real).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                norm1: LayerNormParams::identity(d),
                q: Linear::randn(d, d, sd, rng),
                k: Linear::randn(d, d, sd, rng),
                v: Linear::randn(d, d, sd, rng),
                o: Linear::randn(d, d, sd * out_scale, rng),
                norm2: LayerNormParams::identity(d),
                mlp1: Linear::randn(d, cfg.mlp_hidden, sd, rng),
                mlp2: Linear::randn(cfg.mlp_hidden, d, out_scale / (cfg.mlp_hidden as Real).sqrt(), rng),
            })
            .collect();
        BackboneParams {
            embed: Linear::randn(p_in, d, 1.0 / (p_in as Real).sqrt(), rng),
            blocks,
            final_norm: LayerNormParams::identity(d),
        }
    }
}

/// Receives each block's keys and values before attention and may replace
/// them.
pub trait KvHook {
    fn adjust(&mut self, tape: &mut Tape, layer: usize, k: Var, v: Var) -> Result<(Var, Var)>;
}

/// Output of the attention stack for one window.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// Final-block tokens after the closing norm, `[L·N, D]`.
    pub tokens: Var,
    /// Output of the feature block (before the closing norm), `[L·N, D]`.
    pub features: Var,
}

/// Embed every frame and run the attention stack jointly over all tokens
/// of the window.
pub fn embed_window(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &BackboneParams<Var>,
    images: &[&Tensor],
) -> Result<Var> {
    ensure_shape!(!images.is_empty(), "window holds no frames");
    let n = cfg.tokens_per_frame();
    let mut per_frame = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        ensure_shape!(
            img.shape() == [cfg.image.0, cfg.image.1, cfg.channels],
            "frame {i} has shape {:?}, expected [{}, {}, {}]",
            img.shape(),
            cfg.image.0,
            cfg.image.1,
            cfg.channels
        );
        let mut x = embed_patches(tape, img, cfg.patch, &params.embed)?;
        if cfg.temporal_encoding {
            let te = tape.constant(temporal_encoding(i, n, cfg.d_model));
            x = tape.add(x, te)?;
        }
        per_frame.push(x);
    }
    tape.concat_rows(&per_frame)
}

/// Pre-norm transformer stack over window tokens `x[L·N, D]`.
pub fn aggregate(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &BackboneParams<Var>,
    x: Var,
    mut hook: Option<&mut dyn KvHook>,
) -> Result<Aggregated> {
    let mut x = x;
    let mut features = None;
    for (i, b) in params.blocks.iter().enumerate() {
        let h = b.norm1.apply(tape, x)?;
        let q = b.q.apply(tape, h)?;
        let mut k = b.k.apply(tape, h)?;
        let mut v = b.v.apply(tape, h)?;
        if let Some(hk) = hook.as_deref_mut() {
            (k, v) = hk.adjust(tape, i, k, v)?;
        }
        let a = tape.attention(q, k, v, cfg.heads)?;
        let a = b.o.apply(tape, a)?;
        x = tape.add(x, a)?;
        let h = b.norm2.apply(tape, x)?;
        let h = b.mlp1.apply(tape, h)?;
        let h = tape.gelu(h);
        let h = b.mlp2.apply(tape, h)?;
        x = tape.add(x, h)?;
        if i == cfg.feature_block() {
            features = Some(x);
        }
    }
    let tokens = params.final_norm.apply(tape, x)?;
    Ok(Aggregated {
        tokens,
        features: features.ok_or_else(|| Error::Config("feature layer beyond the stack".into()))?,
    })
}
