use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MASK_NODATA;

/// Supervision target for a Dice loss.
#[derive(Debug, Clone)]
pub enum Target {
    /// B×1×H×W tensor of 0/1 values; 255 marks nodata.
    Binary(Tensor),
    /// B×H×W class indices (row-major); indices ≥ the class count
    /// (such as 255) are nodata.
    Classes {
        indices: Vec<u32>,
        batch: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Framework {
    #[default]
    Stl,
    Mtl,
}

impl Framework {
    pub fn label(self) -> &'static str {
        match self {
            Framework::Stl => "STL",
            Framework::Mtl => "MTL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_lc: f64,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
}

fn default_smooth() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_lc: 0.3,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn for_architecture(arch: crate::models::Architecture) -> Self {
        let lambda_lc = match arch {
            crate::models::Architecture::UnetRn34 => 0.3,
            crate::models::Architecture::SegformerB2 => 0.2,
        };
        LossConfig {
            lambda_lc,
            dice_smooth: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lc.is_finite() && self.lambda_lc >= 0.0) {
            return Err(Error::BadConfig(format!(
                "lambda_lc must be >= 0, got {}",
                self.lambda_lc
            )));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::BadConfig(format!(
                "dice_smooth must be > 0, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// One-hot target, validity mask (B×1×H×W) and per-class selection weights.
fn encode(probs: &Tensor, target: &Target) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (b, c, h, w) = probs.dims4()?;
    let dt = probs.dtype();
    let dev = probs.device();
    match target {
        Target::Binary(t) => {
            if c != 1 || t.dims() != [b, 1, h, w] {
                return Err(Error::Shape(format!(
                    "binary Dice needs B×1×H×W probs and target, got {:?} and {:?}",
                    probs.dims(),
                    t.dims()
                )));
            }
            let v: Vec<f32> = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
            let valid: Vec<f32> = v.iter().map(|&x| (x != MASK_NODATA) as u8 as f32).collect();
            let g: Vec<f32> = v.iter().map(|&x| (x == 1.0) as u8 as f32).collect();
            let g = Tensor::from_vec(g, (b, 1, h, w), dev)?.to_dtype(dt)?;
            let valid = Tensor::from_vec(valid, (b, 1, h, w), dev)?.to_dtype(dt)?;
            Ok((g, valid, vec![1.0]))
        }
        Target::Classes {
            indices,
            batch,
            height,
            width,
        } => {
            if (*batch, *height, *width) != (b, h, w) || indices.len() != b * h * w || c < 2 {
                return Err(Error::Shape(format!(
                    "class Dice needs B×C×H×W probs (C ≥ 2) and B×H×W indices, got {:?} and {batch}×{height}×{width}",
                    probs.dims()
                )));
            }
            let plane = h * w;
            let mut g = vec![0f32; b * c * plane];
            let mut valid = vec![0f32; b * plane];
            let mut present = BTreeSet::new();
            for s in 0..b {
                for i in 0..plane {
                    let k = indices[s * plane + i] as usize;
                    if k < c {
                        g[(s * c + k) * plane + i] = 1.0;
                        valid[s * plane + i] = 1.0;
                        present.insert(k);
                    }
                }
            }
            let sel = (0..c).map(|k| present.contains(&k) as u8 as f64).collect();
            let g = Tensor::from_vec(g, (b, c, h, w), dev)?.to_dtype(dt)?;
            let valid = Tensor::from_vec(valid, (b, 1, h, w), dev)?.to_dtype(dt)?;
            Ok((g, valid, sel))
        }
    }
}

/// Soft Dice loss `1 − mean_k (2·Σp·g + ε)/(Σp + Σg + ε)` over valid pixels.
///
/// Binary targets always score their single class; multi-class targets
/// average only the classes present in the batch.
pub fn dice_loss(probs: &Tensor, target: &Target, smooth: f64) -> Result<Tensor> {
    let (g, valid, sel) = encode(probs, target)?;
    let p = probs.broadcast_mul(&valid)?;
    let inter = (&p * &g)?.sum((0, 2, 3))?;
    let psum = p.sum((0, 2, 3))?;
    let gsum = g.sum((0, 2, 3))?;
    let dice = ((inter * 2.0)? + smooth)?.div(&((psum + gsum)? + smooth)?)?;
    let n_sel: f64 = sel.iter().sum();
    if n_sel == 0.0 {
        return Ok((probs.sum_all()? * 0.0)?);
    }
    let sel = Tensor::from_vec(sel, dice.dims(), &Device::Cpu)?.to_dtype(dice.dtype())?;
    let mean = ((dice * sel)?.sum_all()? / n_sel)?;
    Ok(mean.affine(-1.0, 1.0)?)
}

/// Components of a training objective.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub ba: Tensor,
    pub lc: Option<Tensor>,
}

/// `L_BA` for STL, `L_BA + λ·L_LC` for MTL. BA logits pass through a sigmoid,
/// LC logits through a softmax over classes.
pub fn combined_loss(
    ba_logits: &Tensor,
    lc_logits: Option<&Tensor>,
    y_ba: &Target,
    y_lc: Option<&Target>,
    cfg: &LossConfig,
    framework: Framework,
) -> Result<LossParts> {
    let ba = dice_loss(&candle_nn::ops::sigmoid(ba_logits)?, y_ba, cfg.dice_smooth)?;
    match framework {
        Framework::Stl => Ok(LossParts {
            total: ba.clone(),
            ba,
            lc: None,
        }),
        Framework::Mtl => {
            let (Some(lc_logits), Some(y_lc)) = (lc_logits, y_lc) else {
                return Err(Error::MissingLc);
            };
            let lc_probs = candle_nn::ops::softmax(lc_logits, 1)?;
            let lc = dice_loss(&lc_probs, y_lc, cfg.dice_smooth)?;
            let total = (&ba + (&lc * cfg.lambda_lc)?)?;
            Ok(LossParts {
                total,
                ba,
                lc: Some(lc),
            })
        }
    }
}
