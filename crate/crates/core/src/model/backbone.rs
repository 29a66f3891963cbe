//! Shared feature extractor `f`: a small patch transformer or a small convnet.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use super::params::{Init, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    PatchTransformer,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: EncoderKind,
    /// Feature dimension `d`.
    pub dim: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the transformer MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::PatchTransformer,
            dim: 128,
            patch_size: 8,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            input_size: (64, 64),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("backbone.dim", "must be > 0"));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::config("backbone.input_size", "must be positive"));
        }
        match self.kind {
            EncoderKind::PatchTransformer => {
                if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
                    return Err(Error::config(
                        "backbone.patch_size",
                        format!("input {h}x{w} is not divisible by patch {}", self.patch_size),
                    ));
                }
                if self.heads == 0 || self.dim % self.heads != 0 {
                    return Err(Error::config("backbone.heads", "must divide dim"));
                }
                if self.depth == 0 || self.mlp_ratio == 0 {
                    return Err(Error::config("backbone.depth", "depth and mlp_ratio must be > 0"));
                }
            }
            EncoderKind::Conv => {
                if self.depth == 0 {
                    return Err(Error::config("backbone.depth", "must be > 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(x)?)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let x = (x + self.proj.forward(&y)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct PatchTransformer {
    patch: usize,
    embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct ConvStage {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
struct ConvEncoder {
    stages: Vec<ConvStage>,
    head: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
enum Encoder {
    Transformer(PatchTransformer),
    Conv(ConvEncoder),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    encoder: Encoder,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let encoder = match config.kind {
            EncoderKind::PatchTransformer => {
                let p = config.patch_size;
                let (h, w) = config.input_size;
                let tokens = (h / p) * (w / p);
                let embed = Linear::new(store, &format!("{prefix}.patch_embed"), 3 * p * p, d, rng)?;
                let cls = store.add(&format!("{prefix}.cls_token"), &[1, 1, d], Init::Normal(0.02), rng)?;
                let pos = store.add(&format!("{prefix}.pos_embed"), &[1, tokens + 1, d], Init::Normal(0.02), rng)?;
                let blocks = (0..config.depth)
                    .map(|i| {
                        let n = format!("{prefix}.blocks.{i}");
                        Ok(Block {
                            ln1: LayerNorm::new(store, &format!("{n}.norm1"), d, rng)?,
                            qkv: Linear::new(store, &format!("{n}.attn.qkv"), d, 3 * d, rng)?,
                            proj: Linear::new(store, &format!("{n}.attn.proj"), d, d, rng)?,
                            ln2: LayerNorm::new(store, &format!("{n}.norm2"), d, rng)?,
                            fc1: Linear::new(store, &format!("{n}.mlp.fc1"), d, d * config.mlp_ratio, rng)?,
                            fc2: Linear::new(store, &format!("{n}.mlp.fc2"), d * config.mlp_ratio, d, rng)?,
                            heads: config.heads,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d, rng)?;
                Encoder::Transformer(PatchTransformer {
                    patch: p,
                    embed,
                    cls,
                    pos,
                    blocks,
                    norm,
                })
            }
            EncoderKind::Conv => {
                let mut stages = Vec::new();
                let mut c_in = 3;
                for i in 0..config.depth {
                    let c_out = (d >> (config.depth - 1 - i)).max(8);
                    let weight = store.add(
                        &format!("{prefix}.conv.{i}.weight"),
                        &[c_out, c_in, 3, 3],
                        Init::Normal((2.0 / (c_in * 9) as f64).sqrt()),
                        rng,
                    )?;
                    let bias = store.add(&format!("{prefix}.conv.{i}.bias"), &[1, c_out, 1, 1], Init::Const(0.0), rng)?;
                    stages.push(ConvStage { weight, bias });
                    c_in = c_out;
                }
                let head = Linear::new(store, &format!("{prefix}.fc"), c_in, d, rng)?;
                let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d, rng)?;
                Encoder::Conv(ConvEncoder { stages, head, norm })
            }
        };
        Ok(Self {
            config: config.clone(),
            encoder,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `(B, 3, H, W)` images to `(B, d)` features.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 3, {}, {})", self.config.input_size.0, self.config.input_size.1),
                actual: format!("{:?}", images.dims()),
            });
        }
        match &self.encoder {
            Encoder::Transformer(t) => {
                let p = t.patch;
                let (gh, gw) = (h / p, w / p);
                let patches = images
                    .reshape((b, 3, gh, p, gw, p))?
                    .permute((0, 2, 4, 1, 3, 5))?
                    .contiguous()?
                    .reshape((b, gh * gw, 3 * p * p))?;
                let tokens = t.embed.forward(&patches)?;
                let cls = t.cls.broadcast_as((b, 1, self.config.dim))?;
                let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&t.pos)?;
                for block in &t.blocks {
                    x = block.forward(&x)?;
                }
                let x = t.norm.forward(&x)?;
                Ok(x.narrow(1, 0, 1)?.squeeze(1)?)
            }
            Encoder::Conv(e) => {
                let mut x = images.clone();
                for s in &e.stages {
                    x = x.conv2d(&s.weight, 1, 2, 1, 1)?.broadcast_add(&s.bias)?.gelu_erf()?;
                }
                let pooled = x.flatten_from(2)?.mean(D::Minus1)?;
                e.norm.forward(&e.head.forward(&pooled)?)
            }
        }
    }
}
