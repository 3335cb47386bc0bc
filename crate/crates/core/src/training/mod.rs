//! Single- and multi-task training: Dice losses, augmentation, AdamW with
//! optional mixed precision and dynamic loss scaling.

mod augment;
mod loss;
mod scaler;

use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dice, iou, ConfusionCounts};
use crate::models::{Architecture, Mode, Precision, SegmentationModel};

pub use augment::{apply_draw, augment, AugmentDraw, Sample};
pub use loss::{combined_loss, dice_loss, Framework, LossConfig, LossParts, Target};
pub use scaler::{scaled_backward, unscale_gradients, LossScaler, ScaledGradients, StepOutcome};

/// Consecutive skipped steps at the minimum loss scale before aborting.
pub const MAX_SKIPS_AT_MIN_SCALE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_aug")]
    pub aug_probability: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mixed_precision: bool,
    #[serde(default)]
    pub framework: Framework,
}

fn default_batch() -> usize {
    8
}

fn default_wd() -> f64 {
    1e-4
}

fn default_aug() -> f64 {
    0.5
}

impl TrainConfig {
    pub fn for_architecture(arch: Architecture) -> Self {
        let learning_rate = match arch {
            Architecture::UnetRn34 => 1e-4,
            Architecture::SegformerB2 => 6e-5,
        };
        TrainConfig {
            batch_size: 8,
            learning_rate,
            weight_decay: 1e-4,
            epochs: 20,
            aug_probability: 0.5,
            seed: 0,
            mixed_precision: false,
            framework: Framework::Stl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::BadConfig("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::BadConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.aug_probability) {
            return Err(Error::BadConfig(format!(
                "aug_probability must lie in [0, 1], got {}",
                self.aug_probability
            )));
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        if self.mixed_precision {
            Precision::Mixed
        } else {
            Precision::Full
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Batched tensors ready for a forward pass.
pub struct Batch {
    pub images: Tensor,
    pub ba: Target,
    pub ba_values: Vec<f32>,
    pub lc: Option<Target>,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let b = samples.len();
    let mut images = Vec::with_capacity(b * c * h * w);
    let mut ba = Vec::with_capacity(b * h * w);
    let with_lc = samples.iter().all(|s| s.lc.is_some());
    let mut lc = Vec::with_capacity(if with_lc { b * h * w } else { 0 });
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(Error::Shape("samples in a batch differ in shape".into()));
        }
        images.extend_from_slice(&s.image);
        ba.extend_from_slice(&s.ba);
        if with_lc {
            lc.extend(s.lc.as_ref().unwrap().iter().map(|&v| v as u32));
        }
    }
    let dev = Device::Cpu;
    Ok(Batch {
        images: Tensor::from_vec(images, (b, c, h, w), &dev)?,
        ba: Target::Binary(Tensor::from_vec(ba.clone(), (b, 1, h, w), &dev)?),
        ba_values: ba,
        lc: with_lc.then_some(Target::Classes {
            indices: lc,
            batch: b,
            height: h,
            width: w,
        }),
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub dice: f64,
    pub iou: f64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub skipped_steps: usize,
    pub final_scale: Option<f64>,
}

/// Loss and BA confusion counts for a dataset in inference mode.
pub fn evaluate_dataset(
    model: &SegmentationModel,
    data: &Dataset,
    batch_size: usize,
    loss_cfg: &LossConfig,
    framework: Framework,
    precision: Precision,
) -> Result<(f64, ConfusionCounts)> {
    let mode = Mode::eval(precision);
    let mut total = 0.0;
    let mut counts = ConfusionCounts::default();
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let out = model.forward(&batch.images, &mode)?;
        let parts = combined_loss(
            &out.ba_logits,
            out.lc_logits.as_ref(),
            &batch.ba,
            batch.lc.as_ref(),
            loss_cfg,
            framework,
        )?;
        total += parts.total.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        let probs: Vec<f32> = candle_nn::ops::sigmoid(&out.ba_logits)?.flatten_all()?.to_vec1()?;
        counts.merge(&ConfusionCounts::from_probabilities(&probs, &batch.ba_values, 0.5));
    }
    Ok((total / data.len().max(1) as f64, counts))
}

/// Trains `model` in place and leaves it holding the best-validation weights.
pub fn train(
    model: &mut SegmentationModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, loss_cfg, &mut |_, _| {})
}

/// Like [`train`], calling `on_epoch` with the epoch's records and the
/// current (not best) model after every epoch.
pub fn train_with(
    model: &mut SegmentationModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    on_epoch: &mut dyn FnMut(&[EpochRecord], &SegmentationModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("val".into()));
    }
    if cfg.framework == Framework::Mtl && !model.has_lc_head() {
        return Err(Error::MissingLc);
    }
    let precision = cfg.precision();
    let mode = Mode::train(precision);
    let vars = model.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut scaler = cfg.mixed_precision.then(LossScaler::default);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut skipped_steps = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut counts = ConfusionCounts::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented = chunk
                .iter()
                .map(|&i| augment(&train_set.samples[i], cfg.aug_probability, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let batch = make_batch(&refs)?;
            let out = model.forward(&batch.images, &mode)?;
            let lc_logits = match cfg.framework {
                Framework::Mtl => out.lc_logits.as_ref(),
                Framework::Stl => None,
            };
            let parts = combined_loss(
                &out.ba_logits,
                lc_logits,
                &batch.ba,
                batch.lc.as_ref(),
                loss_cfg,
                cfg.framework,
            )?;
            let loss_value = parts.total.to_scalar::<f32>()? as f64;
            match scaler.as_mut() {
                None => {
                    if !loss_value.is_finite() {
                        return Err(Error::NanLoss {
                            epoch,
                            step,
                            detail: format!("loss = {loss_value}"),
                        });
                    }
                    opt.step(&parts.total.backward()?)?;
                }
                Some(s) => {
                    let sg = scaled_backward(&parts.total, s, &vars)?;
                    match sg.outcome {
                        StepOutcome::Applied => opt.step(&sg.grads)?,
                        StepOutcome::Skipped => {
                            skipped_steps += 1;
                            log::debug!("epoch {epoch} step {step}: overflow, scale now {}", s.scale);
                            if s.skips_at_min >= MAX_SKIPS_AT_MIN_SCALE {
                                return Err(Error::NanLoss {
                                    epoch,
                                    step,
                                    detail: format!(
                                        "{MAX_SKIPS_AT_MIN_SCALE} consecutive non-finite steps at loss scale {}",
                                        s.scale
                                    ),
                                });
                            }
                        }
                    }
                }
            }
            if loss_value.is_finite() {
                loss_sum += loss_value * chunk.len() as f64;
            }
            let probs: Vec<f32> = candle_nn::ops::sigmoid(&out.ba_logits)?.flatten_all()?.to_vec1()?;
            counts.merge(&ConfusionCounts::from_probabilities(&probs, &batch.ba_values, 0.5));
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let val_started = Instant::now();
        let (val_loss, val_counts) =
            evaluate_dataset(model, val_set, cfg.batch_size, loss_cfg, cfg.framework, precision)?;
        let records = [
            EpochRecord {
                epoch,
                split: "train".into(),
                dice: dice(&counts),
                iou: iou(&counts),
                loss: loss_sum / train_set.len() as f64,
                seconds: train_seconds,
            },
            EpochRecord {
                epoch,
                split: "val".into(),
                dice: dice(&val_counts),
                iou: iou(&val_counts),
                loss: val_loss,
                seconds: val_started.elapsed().as_secs_f64(),
            },
        ];
        log::info!(
            "epoch {epoch}: train loss {:.4} dice {:.4} | val loss {:.4} dice {:.4}",
            records[0].loss,
            records[0].dice,
            records[1].loss,
            records[1].dice
        );
        let val_dice = records[1].dice;
        if best.as_ref().is_none_or(|(_, d, _)| val_dice >= *d) {
            best = Some((epoch, val_dice, model.snapshot()?));
        }
        on_epoch(&records, model);
        history.extend(records);
    }
    let (best_epoch, best_val_dice, weights) = best.expect("at least one epoch");
    model.restore(&weights)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_dice,
        skipped_steps,
        final_scale: scaler.map(|s| s.scale),
    })
}

pub fn history_to_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::BadConfig(format!("csv: {e}"));
    for r in history {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::BadConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_to_csv(history)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::for_architecture(Architecture::UnetRn34);
        assert!(c.validate().is_ok());
        c.aug_probability = 1.5;
        assert_eq!(c.validate().unwrap_err().category(), "BAD_CONFIG");
        assert_eq!(
            TrainConfig::for_architecture(Architecture::SegformerB2).learning_rate,
            6e-5
        );
        assert_eq!(LossConfig::for_architecture(Architecture::SegformerB2).lambda_lc, 0.2);
    }

    #[test]
    fn history_csv_columns() {
        let rows = vec![EpochRecord {
            epoch: 1,
            split: "val".into(),
            dice: 0.5,
            iou: 0.25,
            loss: 0.75,
            seconds: 2.0,
        }];
        let text = history_to_csv(&rows).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,split,dice,iou,loss,seconds");
    }
}
