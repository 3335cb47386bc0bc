//! Dihedral test-time augmentation and timed scene prediction.

use std::cell::Cell;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Precision, SegmentationModel};
use crate::patching::{mosaic, PatchSet};
use crate::raster::{RasterGrid, RasterKind, SampleType, MASK_NODATA};

/// The eight symmetries of a square. Rotations are counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum D4 {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "rot90")]
    Rot90,
    #[serde(rename = "rot180")]
    Rot180,
    #[serde(rename = "rot270")]
    Rot270,
    #[serde(rename = "hflip")]
    HFlip,
    #[serde(rename = "vflip")]
    VFlip,
    #[serde(rename = "transpose")]
    Transpose,
    #[serde(rename = "anti-transpose")]
    AntiTranspose,
}

impl D4 {
    pub const ALL: [D4; 8] = [
        D4::Identity,
        D4::Rot90,
        D4::Rot180,
        D4::Rot270,
        D4::HFlip,
        D4::VFlip,
        D4::Transpose,
        D4::AntiTranspose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            D4::Identity => "identity",
            D4::Rot90 => "rot90",
            D4::Rot180 => "rot180",
            D4::Rot270 => "rot270",
            D4::HFlip => "hflip",
            D4::VFlip => "vflip",
            D4::Transpose => "transpose",
            D4::AntiTranspose => "anti-transpose",
        }
    }

    pub fn parse(name: &str) -> Result<D4> {
        D4::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownTransform(name.to_string()))
    }

    pub fn inverse(self) -> D4 {
        match self {
            D4::Rot90 => D4::Rot270,
            D4::Rot270 => D4::Rot90,
            other => other,
        }
    }

    /// Whether the transform exchanges rows and columns.
    pub fn swaps_axes(self) -> bool {
        matches!(self, D4::Rot90 | D4::Rot270 | D4::Transpose | D4::AntiTranspose)
    }

    /// Source pixel of output pixel `(r, c)` for an `h`×`w` input.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            D4::Identity => (r, c),
            D4::Rot90 => (c, w - 1 - r),
            D4::Rot180 => (h - 1 - r, w - 1 - c),
            D4::Rot270 => (h - 1 - c, r),
            D4::HFlip => (r, w - 1 - c),
            D4::VFlip => (h - 1 - r, c),
            D4::Transpose => (c, r),
            D4::AntiTranspose => (h - 1 - c, w - 1 - r),
        }
    }

    /// Output dimensions for an `h`×`w` input.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Applies the transform to every `h`×`w` plane of a row-major
    /// `planes`×`h`×`w` buffer.
    pub fn apply<T: Copy>(self, data: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        assert_eq!(data.len(), planes * h * w, "buffer size mismatch");
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for p in 0..planes {
            let plane = &data[p * h * w..(p + 1) * h * w];
            for r in 0..oh {
                for c in 0..ow {
                    let (sr, sc) = self.source(r, c, h, w);
                    out.push(plane[sr * w + sc]);
                }
            }
        }
        out
    }
}

/// Undoes `t` on a map produced in the transformed frame.
pub fn invert_transform<T: Copy>(t: D4, map: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    t.inverse().apply(map, planes, h, w)
}

/// Name-based variant of [`invert_transform`].
pub fn invert_named<T: Copy>(name: &str, map: &[T], planes: usize, h: usize, w: usize) -> Result<Vec<T>> {
    Ok(invert_transform(D4::parse(name)?, map, planes, h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    #[serde(default = "all_transforms")]
    pub transforms: Vec<D4>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

fn all_transforms() -> Vec<D4> {
    D4::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

fn default_threshold() -> f32 {
    0.5
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            transforms: all_transforms(),
            enabled: true,
            threshold: 0.5,
        }
    }
}

impl TtaConfig {
    pub fn disabled() -> Self {
        TtaConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn with_transforms(transforms: Vec<D4>) -> Self {
        TtaConfig {
            transforms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::BadConfig(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.enabled {
            if !self.transforms.contains(&D4::Identity) {
                return Err(Error::BadConfig("TTA transforms must include identity".into()));
            }
            for (i, t) in self.transforms.iter().enumerate() {
                if self.transforms[..i].contains(t) {
                    return Err(Error::BadConfig(format!("duplicate transform {}", t.name())));
                }
            }
        }
        Ok(())
    }

    /// Transforms actually run per patch.
    pub fn active(&self) -> Vec<D4> {
        if self.enabled {
            self.transforms.clone()
        } else {
            vec![D4::Identity]
        }
    }
}

/// A frozen model mapping a B×C×H×W batch to B×1×H×W probabilities.
pub trait ProbabilityModel {
    fn predict(&self, batch: &Tensor) -> Result<Tensor>;
}

/// A segmentation model evaluated in inference mode at a fixed precision.
pub struct Frozen<'a> {
    pub model: &'a SegmentationModel,
    pub precision: Precision,
}

impl ProbabilityModel for Frozen<'_> {
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.model.predict_proba(batch, self.precision)
    }
}

/// Wraps a model and counts forward calls and per-patch invocations.
pub struct Counting<'a, M> {
    inner: &'a M,
    calls: Cell<usize>,
    invocations: Cell<usize>,
}

impl<'a, M: ProbabilityModel> Counting<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Counting {
            inner,
            calls: Cell::new(0),
            invocations: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// Number of single-patch predictions performed (batch rows summed).
    pub fn invocations(&self) -> usize {
        self.invocations.get()
    }
}

impl<M: ProbabilityModel> ProbabilityModel for Counting<'_, M> {
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.invocations.set(self.invocations.get() + batch.dims()[0]);
        self.inner.predict(batch)
    }
}

/// TTA over a square B×C×N×N batch; returns B×N×N averaged probabilities
/// (row-major, one plane per batch item).
pub fn tta_predict_batch<M: ProbabilityModel>(model: &M, batch: &Tensor, transforms: &[D4]) -> Result<Vec<f32>> {
    let (b, c, h, w) = batch.dims4()?;
    if h != w {
        return Err(Error::NonSquare { height: h, width: w });
    }
    if transforms.is_empty() {
        return Err(Error::BadConfig("no TTA transforms".into()));
    }
    let n = h;
    let host: Vec<f32> = batch.flatten_all()?.to_vec1()?;
    let sample = c * n * n;
    let mut acc: Option<Vec<f32>> = None;
    for &t in transforms {
        let mut xt = Vec::with_capacity(host.len());
        for s in 0..b {
            xt.extend(t.apply(&host[s * sample..(s + 1) * sample], c, n, n));
        }
        let xt = Tensor::from_vec(xt, (b, c, n, n), &Device::Cpu)?;
        let probs: Vec<f32> = model.predict(&xt)?.flatten_all()?.to_vec1()?;
        if probs.len() != b * n * n {
            return Err(Error::Shape(format!(
                "model returned {} values for a {b}×1×{n}×{n} batch",
                probs.len()
            )));
        }
        let restored = invert_transform(t, &probs, b, n, n);
        match acc.as_mut() {
            None => acc = Some(restored),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&restored) {
                    *x += y;
                }
            }
        }
    }
    let k = transforms.len() as f32;
    let mut acc = acc.expect("at least one transform");
    for x in &mut acc {
        *x /= k;
    }
    Ok(acc)
}

/// TTA prediction for one C×N×N patch; returns an N×N probability tensor.
pub fn tta_predict<M: ProbabilityModel>(model: &M, patch: &Tensor, cfg: &TtaConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (c, h, w) = patch.dims3()?;
    if h != w {
        return Err(Error::NonSquare { height: h, width: w });
    }
    let probs = tta_predict_batch(model, &patch.reshape((1, c, h, w))?, &cfg.active())?;
    Ok(Tensor::from_vec(probs, (h, w), &Device::Cpu)?)
}

/// Elementwise `value >= threshold`; nodata stays nodata.
pub fn threshold_map(probs: &RasterGrid, threshold: f32) -> Result<RasterGrid> {
    let values = probs
        .band(0)
        .iter()
        .map(|&v| {
            if probs.is_nodata(v) {
                MASK_NODATA
            } else if v >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    RasterGrid::from_parts(
        probs.width(),
        probs.height(),
        1,
        values,
        probs.transform().clone(),
        RasterKind::BinaryMask,
        SampleType::U8,
        Some(MASK_NODATA),
    )
}

#[derive(Debug, Clone)]
pub struct PredictionRun {
    pub probability_map: RasterGrid,
    pub binary_map: RasterGrid,
    pub wall_clock_seconds: f64,
    pub patches_processed: usize,
    /// Single-patch model evaluations, warm-up excluded.
    pub model_invocations: usize,
    pub forward_calls: usize,
    pub config: TtaConfig,
    pub mixed_precision: bool,
}

/// Run metadata written next to the maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub wall_clock_seconds: f64,
    pub inference_minutes: f64,
    pub patches_processed: usize,
    pub model_invocations: usize,
    pub forward_calls: usize,
    pub invocations_per_patch: f64,
    pub mixed_precision: bool,
    pub tta: TtaConfig,
}

impl PredictionRun {
    pub fn report(&self) -> RunReport {
        RunReport {
            wall_clock_seconds: self.wall_clock_seconds,
            inference_minutes: self.wall_clock_seconds / 60.0,
            patches_processed: self.patches_processed,
            model_invocations: self.model_invocations,
            forward_calls: self.forward_calls,
            invocations_per_patch: self.model_invocations as f64 / self.patches_processed.max(1) as f64,
            mixed_precision: self.mixed_precision,
            tta: self.config.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SceneOptions {
    pub batch_size: usize,
    pub mixed_precision: bool,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            batch_size: 8,
            mixed_precision: false,
        }
    }
}

fn patch_batch(patches: &PatchSet, range: std::ops::Range<usize>) -> Result<Tensor> {
    let first = &patches.patches[range.start];
    let (c, h, w) = (first.bands(), first.height(), first.width());
    let mut data = Vec::with_capacity(range.len() * c * h * w);
    for i in range.clone() {
        data.extend_from_slice(patches.patches[i].values());
    }
    Ok(Tensor::from_vec(data, (range.len(), c, h, w), &Device::Cpu)?)
}

/// Predicts every patch of a scene, mosaics and thresholds the result.
pub fn predict_scene(
    model: &SegmentationModel,
    patches: &PatchSet,
    tta: &TtaConfig,
    mixed_precision: bool,
) -> Result<PredictionRun> {
    let expected = model.config().in_channels;
    if let Some(p) = patches.patches.first() {
        if p.bands() != expected {
            return Err(Error::Shape(format!(
                "model expects {expected} bands, patches have {}",
                p.bands()
            )));
        }
    }
    let precision = if mixed_precision {
        Precision::Mixed
    } else {
        Precision::Full
    };
    predict_scene_with(
        &Frozen { model, precision },
        patches,
        tta,
        SceneOptions {
            mixed_precision,
            ..Default::default()
        },
    )
}

pub fn predict_scene_with<M: ProbabilityModel>(
    model: &M,
    patches: &PatchSet,
    tta: &TtaConfig,
    options: SceneOptions,
) -> Result<PredictionRun> {
    tta.validate()?;
    patches.check_consistent()?;
    let transforms = tta.active();
    let batch_size = options.batch_size.max(1);
    // warm-up, excluded from timing and counts
    model.predict(&patch_batch(patches, 0..1)?)?;

    let counter = Counting::new(model);
    let started = Instant::now();
    let size = patches.spec.patch_size;
    let mut prob_patches = Vec::with_capacity(patches.len());
    let mut start = 0;
    while start < patches.len() {
        let end = (start + batch_size).min(patches.len());
        let batch = patch_batch(patches, start..end)?;
        let probs = tta_predict_batch(&counter, &batch, &transforms)?;
        for (k, i) in (start..end).enumerate() {
            let plane = probs[k * size * size..(k + 1) * size * size]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            prob_patches.push(RasterGrid::new(
                size,
                size,
                1,
                plane,
                patches.patches[i].transform().clone(),
                RasterKind::ProbabilityMap,
            )?);
        }
        start = end;
    }
    let probability_map = mosaic(&patches.with_patches(prob_patches)?)?;
    let binary_map = threshold_map(&probability_map, tta.threshold)?;
    let wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(PredictionRun {
        probability_map,
        binary_map,
        wall_clock_seconds,
        patches_processed: patches.len(),
        model_invocations: counter.invocations(),
        forward_calls: counter.calls(),
        config: tta.clone(),
        mixed_precision: options.mixed_precision,
    })
}
