//! SegFormer with a Mix Transformer (MiT-B2) encoder and all-MLP decode head.

use candle_core::{Tensor, D};

use super::layers::{matmul, resize_bilinear, sub, BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear, Mode};
use super::store::ParamStore;
use crate::error::Result;

const HIDDEN: [usize; 4] = [64, 128, 320, 512];
const DEPTHS: [usize; 4] = [3, 4, 6, 3];
const HEADS: [usize; 4] = [1, 2, 5, 8];
const SR_RATIOS: [usize; 4] = [8, 4, 2, 1];
const PATCH_SIZES: [usize; 4] = [7, 3, 3, 3];
const STRIDES: [usize; 4] = [4, 2, 2, 2];
const MLP_RATIO: usize = 4;
const DECODER_DIM: usize = 768;
const BLOCK_EPS: f64 = 1e-6;

/// Largest divisor of `width` not exceeding `heads`.
pub fn head_count(width: usize, heads: usize) -> usize {
    (1..=heads.min(width))
        .rev()
        .find(|h| width.is_multiple_of(*h))
        .unwrap_or(1)
}

/// (B, N, C) tokens → (B, C, h, w).
fn to_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// (B, C, h, w) → (B, N, C) tokens.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

#[derive(Debug, Clone)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    reduction: Option<(Conv2d, LayerNorm)>,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, sr: usize) -> Result<Self> {
        let reduction = if sr > 1 {
            Some((
                Conv2d::new(
                    store,
                    &sub(prefix, "sr"),
                    ConvSpec::new(dim, dim, sr).stride(sr).padding(0).bias(),
                )?,
                LayerNorm::new(store, &sub(prefix, "sr_norm"), dim, 1e-5)?,
            ))
        } else {
            None
        };
        Ok(Attention {
            query: Linear::new(store, &sub(prefix, "query"), dim, dim)?,
            key: Linear::new(store, &sub(prefix, "key"), dim, dim)?,
            value: Linear::new(store, &sub(prefix, "value"), dim, dim)?,
            output: Linear::new(store, &sub(prefix, "output"), dim, dim)?,
            reduction,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize, mode: &Mode) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x, mode)?)?;
        let kv_in = match &self.reduction {
            Some((conv, norm)) => {
                let s = conv.forward(&to_spatial(x, h, w)?, mode)?;
                norm.forward(&to_tokens(&s)?, mode)?
            }
            None => x.clone(),
        };
        let k = self.split_heads(&self.key.forward(&kv_in, mode)?)?;
        let v = self.split_heads(&self.value.forward(&kv_in, mode)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (matmul(&q, &k.t()?, mode)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = matmul(&attn, &v, mode)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.output.forward(&ctx, mode)
    }
}

#[derive(Debug, Clone)]
struct MixFfn {
    dense1: Linear,
    dwconv: Conv2d,
    dense2: Linear,
}

impl MixFfn {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let hidden = dim * MLP_RATIO;
        Ok(MixFfn {
            dense1: Linear::new(store, &sub(prefix, "dense1"), dim, hidden)?,
            dwconv: Conv2d::new(
                store,
                &sub(prefix, "dwconv"),
                ConvSpec::new(hidden, hidden, 3).groups(hidden).bias(),
            )?,
            dense2: Linear::new(store, &sub(prefix, "dense2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize, mode: &Mode) -> Result<Tensor> {
        let y = self.dense1.forward(x, mode)?;
        let y = self.dwconv.forward(&to_spatial(&y, h, w)?, mode)?;
        let y = to_tokens(&y)?.gelu_erf()?;
        self.dense2.forward(&y, mode)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize, mode: &Mode) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x, mode)?, h, w, mode)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x, mode)?, h, w, mode)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct SegFormer {
    stages: Vec<Stage>,
    mlps: Vec<Linear>,
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    decoder_dim: usize,
}

impl SegFormer {
    pub fn new(store: &mut ParamStore, in_channels: usize, width: impl Fn(usize) -> usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_ch = in_channels;
        let dims: Vec<usize> = HIDDEN.iter().map(|&c| width(c)).collect();
        for i in 0..4 {
            let dim = dims[i];
            let heads = head_count(dim, HEADS[i]);
            let prefix = format!("encoder.stage{i}");
            let embed = Conv2d::new(
                store,
                &sub(&prefix, "patch_embed.proj"),
                ConvSpec::new(in_ch, dim, PATCH_SIZES[i])
                    .stride(STRIDES[i])
                    .padding(PATCH_SIZES[i] / 2)
                    .bias(),
            )?;
            let embed_norm = LayerNorm::new(store, &sub(&prefix, "patch_embed.norm"), dim, 1e-5)?;
            let mut blocks = Vec::new();
            for j in 0..DEPTHS[i] {
                let bp = format!("{prefix}.block{j}");
                blocks.push(Block {
                    norm1: LayerNorm::new(store, &sub(&bp, "norm1"), dim, BLOCK_EPS)?,
                    attn: Attention::new(store, &sub(&bp, "attn"), dim, heads, SR_RATIOS[i])?,
                    norm2: LayerNorm::new(store, &sub(&bp, "norm2"), dim, BLOCK_EPS)?,
                    ffn: MixFfn::new(store, &sub(&bp, "ffn"), dim)?,
                });
            }
            let norm = LayerNorm::new(store, &sub(&prefix, "norm"), dim, BLOCK_EPS)?;
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
            });
            in_ch = dim;
        }
        let decoder_dim = width(DECODER_DIM);
        let mlps = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("decoder.mlp{i}"), d, decoder_dim))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(store, "decoder.fuse", ConvSpec::new(4 * decoder_dim, decoder_dim, 1))?;
        let fuse_bn = BatchNorm2d::new(store, "decoder.fuse_bn", decoder_dim)?;
        Ok(SegFormer {
            stages,
            mlps,
            fuse,
            fuse_bn,
            decoder_dim,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.decoder_dim
    }

    /// Decoder features at a quarter of the input resolution.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let mut y = x.clone();
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            let e = stage.embed.forward(&y, mode)?;
            let (_, _, h, w) = e.dims4()?;
            let mut t = stage.embed_norm.forward(&to_tokens(&e)?, mode)?;
            for block in &stage.blocks {
                t = block.forward(&t, h, w, mode)?;
            }
            let t = stage.norm.forward(&t, mode)?;
            y = to_spatial(&t, h, w)?;
            feats.push((t, h, w));
        }
        let (h0, w0) = (feats[0].1, feats[0].2);
        let mut projected = Vec::with_capacity(4);
        for ((t, h, w), mlp) in feats.iter().zip(&self.mlps).rev() {
            let p = to_spatial(&mlp.forward(t, mode)?, *h, *w)?;
            projected.push(resize_bilinear(&p, h0, w0, mode)?);
        }
        let cat = Tensor::cat(&projected, 1)?;
        let fused = self.fuse.forward(&cat, mode)?;
        Ok(self.fuse_bn.forward(&fused, mode)?.relu()?)
    }
}
