//! Segmentation networks with a burned-area head and an optional auxiliary
//! land-cover head on shared decoder features.

pub mod layers;
mod segformer;
mod store;
mod unet;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{Mode, OpClass, Precision, PrecisionPolicy};
pub use segformer::head_count;
pub use store::{Buffer, Init, ParamStore};

use layers::{resize_bilinear, Conv2d, ConvInit, ConvSpec};
use segformer::SegFormer;
use unet::UNet;

pub const CHECKPOINT_FORMAT: &str = "scarseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Spatial stride of the deepest encoder stage; inputs must be multiples.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Architecture {
    UnetRn34,
    SegformerB2,
}

impl Architecture {
    pub fn label(self) -> &'static str {
        match self {
            Architecture::UnetRn34 => "UNet-RN34",
            Architecture::SegformerB2 => "SegFormer-B2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_lc_classes")]
    pub num_lc_classes: usize,
    #[serde(default = "default_width_scale")]
    pub width_scale: f64,
    #[serde(default)]
    pub with_lc_head: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    4
}

fn default_lc_classes() -> usize {
    12
}

fn default_width_scale() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            in_channels: 4,
            num_lc_classes: 12,
            width_scale: 1.0,
            with_lc_head: false,
            seed: 0,
        }
    }

    pub fn width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    pub fn with_lc_head(mut self, on: bool) -> Self {
        self.with_lc_head = on;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 {
            return Err(Error::BadConfig(format!(
                "in_channels must be 4, got {}",
                self.in_channels
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::BadConfig(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.num_lc_classes < 2 {
            return Err(Error::BadConfig("num_lc_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Channel width after scaling, rounded up to a multiple of 8.
    pub fn scaled_width(&self, base: usize) -> usize {
        let w = (base as f64 * self.width_scale / 8.0).ceil() as usize * 8;
        w.max(8)
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Unet(UNet),
    Segformer(SegFormer),
}

/// Head outputs at input resolution.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub ba_logits: Tensor,
    pub lc_logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    ba_head: Conv2d,
    lc_head: Option<Conv2d>,
}

pub const LC_HEAD_PREFIX: &str = "lc_head.";

pub fn build_model(config: &ModelConfig) -> Result<SegmentationModel> {
    config.validate()?;
    let mut store = ParamStore::new(config.seed);
    let width = |c: usize| config.scaled_width(c);
    let (backbone, feat) = match config.architecture {
        Architecture::UnetRn34 => {
            let n = UNet::new(&mut store, config.in_channels, width)?;
            let c = n.out_channels();
            (Backbone::Unet(n), c)
        }
        Architecture::SegformerB2 => {
            let n = SegFormer::new(&mut store, config.in_channels, width)?;
            let c = n.out_channels();
            (Backbone::Segformer(n), c)
        }
    };
    let head = |out| ConvSpec::new(feat, out, 1).bias().init(ConvInit::FanInUniform);
    let ba_head = Conv2d::new(&mut store, "ba_head", head(1))?;
    let lc_head = if config.with_lc_head {
        Some(Conv2d::new(&mut store, "lc_head", head(config.num_lc_classes))?)
    } else {
        None
    };
    Ok(SegmentationModel {
        config: config.clone(),
        store,
        backbone,
        ba_head,
        lc_head,
    })
}

fn check_finite(x: &Tensor) -> Result<()> {
    let v: Vec<f32> = x.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

impl SegmentationModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn has_lc_head(&self) -> bool {
        self.lc_head.is_some()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        self.store.params()
    }

    pub fn param_count(&self) -> usize {
        self.store.params().values().map(|v| v.elem_count()).sum()
    }

    /// Validates a B×C×H×W batch against the model contract.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("expected B×C×H×W, got {dims:?}")));
        }
        if dims[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} channels, got {}",
                self.config.in_channels, dims[1]
            )));
        }
        if !dims[2].is_multiple_of(INPUT_MULTIPLE)
            || !dims[3].is_multiple_of(INPUT_MULTIPLE)
            || dims[2] == 0
            || dims[3] == 0
        {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not a positive multiple of {INPUT_MULTIPLE}",
                dims[2], dims[3]
            )));
        }
        check_finite(x)
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<ModelOutput> {
        self.check_input(x)?;
        let (_, _, h, w) = x.dims4()?;
        let x = x.to_dtype(DType::F32)?;
        let feats = match &self.backbone {
            Backbone::Unet(n) => n.forward(&x, mode)?,
            Backbone::Segformer(n) => n.forward(&x, mode)?,
        };
        let ba = resize_bilinear(&self.ba_head.forward(&feats, mode)?, h, w, mode)?;
        let lc = match &self.lc_head {
            Some(head) => Some(resize_bilinear(&head.forward(&feats, mode)?, h, w, mode)?),
            None => None,
        };
        Ok(ModelOutput {
            ba_logits: ba,
            lc_logits: lc,
        })
    }

    /// Spatial size of the raw head output for an input of `h`×`w`.
    pub fn head_resolution(&self, h: usize, w: usize) -> (usize, usize) {
        match self.config.architecture {
            Architecture::UnetRn34 => (h, w),
            Architecture::SegformerB2 => (h / 4, w / 4),
        }
    }

    /// Burned-area probabilities (sigmoid of the BA logits) in eval mode.
    pub fn predict_proba(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let out = self.forward(x, &Mode::eval(precision))?;
        Ok(candle_nn::ops::sigmoid(&out.ba_logits)?)
    }

    /// Removes the land-cover head, keeping every shared parameter.
    pub fn drop_lc_head(mut self) -> Result<SegmentationModel> {
        if self.lc_head.take().is_none() {
            return Err(Error::NoLcHead);
        }
        self.store.remove_prefix(LC_HEAD_PREFIX);
        self.config.with_lc_head = false;
        Ok(self)
    }

    /// Detached copy of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.snapshot()
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.restore(values)
    }

    /// Writes parameters, buffers and config to a safetensors archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let snapshot = self.snapshot()?;
        let mut data: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &snapshot {
            let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            data.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = data
            .iter()
            .map(|(n, shape, bytes)| {
                let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::InvalidRaster(format!("checkpoint tensor {n}: {e}")))?;
                Ok((n.as_str(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config).expect("config serializes"),
            ),
        ]);
        let bytes = safetensors::serialize(views, Some(metadata))
            .map_err(|e| Error::UnsupportedFormat(format!("checkpoint: {e}")))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SegmentationModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::UnsupportedFormat(format!("{}: {m}", path.display()));
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a model checkpoint".into()));
        }
        let version: u32 = meta
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let model = build_model(&config)?;
        let tensors = read_safetensors(&bytes).map_err(bad)?;
        model.restore(&tensors)?;
        Ok(model)
    }

    /// Loads matching tensors from an external safetensors file (for example
    /// converted ImageNet weights). A convolution weight stored with 3 input
    /// channels where the model expects 4 is adapted by duplicating the first
    /// input band into the fourth slot.
    pub fn load_external_weights(&self, path: &Path) -> Result<ExternalLoadReport> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors =
            read_safetensors(&bytes).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
        let mut report = ExternalLoadReport::default();
        for (name, t) in tensors {
            let Some(var) = self.store.params().get(&name) else {
                report.skipped.push(name);
                continue;
            };
            let target = var.dims().to_vec();
            if t.dims() == target.as_slice() {
                var.set(&t)?;
                report.loaded.push(name);
            } else if t.rank() == 4
                && target.len() == 4
                && t.dims()[1] == 3
                && target[1] == 4
                && t.dims()[0] == target[0]
                && t.dims()[2..] == target[2..]
            {
                let first = t.narrow(1, 0, 1)?;
                var.set(&Tensor::cat(&[&t, &first], 1)?)?;
                report.adapted.push(name);
            } else {
                report.skipped.push(name);
            }
        }
        Ok(report)
    }
}

/// Outcome of [`SegmentationModel::load_external_weights`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExternalLoadReport {
    pub loaded: Vec<String>,
    pub adapted: Vec<String>,
    pub skipped: Vec<String>,
}

fn read_safetensors(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Tensor>, String> {
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let values: Vec<f32> = match view.dtype() {
            safetensors::Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            safetensors::Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => return Err(format!("tensor {name}: unsupported dtype {other:?}")),
        };
        let t = Tensor::from_vec(values, view.shape(), &candle_core::Device::Cpu).map_err(|e| e.to_string())?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn count_params(model: &SegmentationModel) -> usize {
    model.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(b: usize, s: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 4 * s * s).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (b, 4, s, s), &Device::Cpu).unwrap()
    }

    #[test]
    fn unet_output_shape() {
        let m = build_model(
            &ModelConfig::new(Architecture::UnetRn34)
                .width_scale(0.1)
                .with_lc_head(true),
        )
        .unwrap();
        let out = m.forward(&input(2, 64, 1), &Mode::eval(Precision::Full)).unwrap();
        assert_eq!(out.ba_logits.dims(), &[2, 1, 64, 64]);
        assert_eq!(out.lc_logits.unwrap().dims(), &[2, 12, 64, 64]);
    }

    #[test]
    fn segformer_output_shape() {
        let m = build_model(
            &ModelConfig::new(Architecture::SegformerB2)
                .width_scale(0.1)
                .with_lc_head(true),
        )
        .unwrap();
        assert_eq!(m.head_resolution(64, 64), (16, 16));
        let out = m.forward(&input(1, 64, 2), &Mode::train(Precision::Full)).unwrap();
        assert_eq!(out.ba_logits.dims(), &[1, 1, 64, 64]);
        assert_eq!(out.lc_logits.unwrap().dims(), &[1, 12, 64, 64]);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let m = build_model(&ModelConfig::new(Architecture::UnetRn34).width_scale(0.1)).unwrap();
        let bad = Tensor::zeros((1, 4, 48, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            m.forward(&bad, &Mode::eval(Precision::Full)).unwrap_err().category(),
            "SHAPE_ERROR"
        );
        let bad = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            m.forward(&bad, &Mode::eval(Precision::Full)).unwrap_err().category(),
            "SHAPE_ERROR"
        );
        let mut v = vec![0f32; 4 * 32 * 32];
        v[7] = f32::NAN;
        let nan = Tensor::from_vec(v, (1, 4, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(
            m.forward(&nan, &Mode::eval(Precision::Full)).unwrap_err().category(),
            "NONFINITE_INPUT"
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(Architecture::UnetRn34);
        c.in_channels = 3;
        assert_eq!(build_model(&c).unwrap_err().category(), "BAD_CONFIG");
        let c = ModelConfig::new(Architecture::UnetRn34).width_scale(0.0);
        assert_eq!(build_model(&c).unwrap_err().category(), "BAD_CONFIG");
    }

    #[test]
    fn lc_head_only_adds_head_params() {
        let base = ModelConfig::new(Architecture::SegformerB2).width_scale(0.1);
        let stl = build_model(&base).unwrap();
        let mtl = build_model(&base.clone().with_lc_head(true)).unwrap();
        let extra: Vec<&String> = mtl
            .named_vars()
            .keys()
            .filter(|k| !stl.named_vars().contains_key(*k))
            .collect();
        assert!(extra.iter().all(|k| k.starts_with(LC_HEAD_PREFIX)));
        assert_eq!(extra.len(), 2);
        for k in stl.named_vars().keys() {
            assert!(mtl.named_vars().contains_key(k));
        }
    }

    #[test]
    fn drop_head_keeps_ba_logits() {
        let m = build_model(
            &ModelConfig::new(Architecture::UnetRn34)
                .width_scale(0.1)
                .with_lc_head(true),
        )
        .unwrap();
        let x = input(1, 32, 3);
        let before: Vec<f32> = m
            .forward(&x, &Mode::eval(Precision::Full))
            .unwrap()
            .ba_logits
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let n = m.param_count();
        let lc = 12 * m.config().scaled_width(16) + 12;
        let dropped = m.drop_lc_head().unwrap();
        assert_eq!(dropped.param_count(), n - lc);
        let after: Vec<f32> = dropped
            .forward(&x, &Mode::eval(Precision::Full))
            .unwrap()
            .ba_logits
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(before, after);
        assert_eq!(dropped.drop_lc_head().unwrap_err().category(), "NO_LC_HEAD");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(&ModelConfig::new(Architecture::SegformerB2).width_scale(0.1).seed(5)).unwrap();
        let x = input(1, 32, 4);
        // One training-mode pass moves the batch-norm statistics off their init.
        m.forward(&x, &Mode::train(Precision::Full)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        m.save(&path).unwrap();
        let loaded = SegmentationModel::load(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        let a: Vec<f32> = m
            .predict_proba(&x, Precision::Full)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f32> = loaded
            .predict_proba(&x, Precision::Full)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn external_weights_duplicate_first_band() {
        let m = build_model(&ModelConfig::new(Architecture::UnetRn34).width_scale(0.1)).unwrap();
        let w = m.named_vars()["encoder.stem.conv.weight"].clone();
        let (o, _, k, _) = w.dims4().unwrap();
        let rgb: Vec<f32> = (0..o * 3 * k * k).map(|i| i as f32).collect();
        let bytes: Vec<u8> = rgb.iter().flat_map(|x| x.to_le_bytes()).collect();
        let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![o, 3, k, k], &bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.safetensors");
        let file = safetensors::serialize(vec![("encoder.stem.conv.weight", view)], None).unwrap();
        std::fs::write(&path, file).unwrap();
        let report = m.load_external_weights(&path).unwrap();
        assert_eq!(report.adapted, vec!["encoder.stem.conv.weight".to_string()]);
        let t = w.as_tensor();
        let b0: Vec<f32> = t.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b3: Vec<f32> = t.narrow(1, 3, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(b0, b3);
    }

    #[test]
    fn reference_scale_param_counts() {
        for (arch, target) in [(Architecture::UnetRn34, 24.4e6), (Architecture::SegformerB2, 27.4e6)] {
            let n = build_model(&ModelConfig::new(arch)).unwrap().param_count() as f64;
            assert!((n - target).abs() <= 0.02 * target, "{arch:?}: {n}");
        }
    }
}
