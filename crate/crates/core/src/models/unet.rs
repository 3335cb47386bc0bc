//! U-Net decoder on a ResNet34 encoder.

use candle_core::Tensor;

use super::layers::{max_pool_3x3_s2, sub, BatchNorm2d, Conv2d, ConvSpec, Mode};
use super::store::ParamStore;
use crate::error::Result;

const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STEM_WIDTH: usize = 64;
const DECODER_WIDTHS: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, prefix: &str, spec: ConvSpec) -> Result<Self> {
        let out = spec.out_ch;
        Ok(ConvBn {
            conv: Conv2d::new(store, &sub(prefix, "conv"), spec)?,
            bn: BatchNorm2d::new(store, &sub(prefix, "bn"), out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x, mode)?, mode)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(
                store,
                &sub(prefix, "downsample"),
                ConvSpec::new(in_ch, out_ch, 1).stride(stride),
            )?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: ConvBn::new(
                store,
                &sub(prefix, "conv1"),
                ConvSpec::new(in_ch, out_ch, 3).stride(stride),
            )?,
            conv2: ConvBn::new(store, &sub(prefix, "conv2"), ConvSpec::new(out_ch, out_ch, 3))?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let y = self.conv1.forward(x, mode)?.relu()?;
        let y = self.conv2.forward(&y, mode)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv1: ConvBn,
    conv2: ConvBn,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, mode: &Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut y = x.upsample_nearest2d(2 * h, 2 * w)?;
        if let Some(s) = skip {
            y = Tensor::cat(&[&y, s], 1)?;
        }
        let y = self.conv1.forward(&y, mode)?.relu()?;
        Ok(self.conv2.forward(&y, mode)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    decoder: Vec<DecoderBlock>,
    out_channels: usize,
}

impl UNet {
    pub fn new(store: &mut ParamStore, in_channels: usize, width: impl Fn(usize) -> usize) -> Result<Self> {
        let stem_w = width(STEM_WIDTH);
        let stem = ConvBn::new(store, "encoder.stem", ConvSpec::new(in_channels, stem_w, 7).stride(2))?;
        let mut stages = Vec::new();
        let mut in_ch = stem_w;
        let mut skip_widths = vec![stem_w];
        for (s, (&depth, &base)) in STAGE_DEPTHS.iter().zip(&STAGE_WIDTHS).enumerate() {
            let out_ch = width(base);
            let mut blocks = Vec::new();
            for b in 0..depth {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let prefix = format!("encoder.layer{}.{b}", s + 1);
                blocks.push(BasicBlock::new(store, &prefix, in_ch, out_ch, stride)?);
                in_ch = out_ch;
            }
            stages.push(blocks);
            skip_widths.push(out_ch);
        }
        // Skips for decoder blocks 0..3 are layer3, layer2, layer1, stem;
        // the last block has none.
        let skips = [skip_widths[3], skip_widths[2], skip_widths[1], skip_widths[0], 0];
        let mut decoder = Vec::new();
        let mut prev = in_ch;
        for (i, &base) in DECODER_WIDTHS.iter().enumerate() {
            let out_ch = width(base);
            let prefix = format!("decoder.block{i}");
            decoder.push(DecoderBlock {
                conv1: ConvBn::new(store, &sub(&prefix, "conv1"), ConvSpec::new(prev + skips[i], out_ch, 3))?,
                conv2: ConvBn::new(store, &sub(&prefix, "conv2"), ConvSpec::new(out_ch, out_ch, 3))?,
            });
            prev = out_ch;
        }
        Ok(UNet {
            stem,
            stages,
            decoder,
            out_channels: prev,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Full-resolution decoder features.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let f0 = self.stem.forward(x, mode)?.relu()?;
        let mut y = max_pool_3x3_s2(&f0)?;
        let mut feats = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                y = b.forward(&y, mode)?;
            }
            feats.push(y.clone());
        }
        let skips = [Some(&feats[2]), Some(&feats[1]), Some(&feats[0]), Some(&f0), None];
        let mut d = feats[3].clone();
        for (block, skip) in self.decoder.iter().zip(skips) {
            d = block.forward(&d, skip, mode)?;
        }
        Ok(d)
    }
}
