//! Pipeline configuration: one TOML file with stage-scoped sections.

use std::path::{Path, PathBuf};

use scarseg_core::blocksplit::SplitFractions;
use scarseg_core::models::{Architecture, ModelConfig};
use scarseg_core::patching::PatchSpec;
use scarseg_core::training::{Framework, LossConfig, TrainConfig};
use scarseg_core::tta::TtaConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::synth::SynthConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Drives synthesis, splitting, initialisation and training order.
    #[serde(default)]
    pub seed: u64,
    /// Root of every artifact the commands write.
    pub run_dir: PathBuf,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Input scenes. When empty, the scenes written by `synth` are used.
    #[serde(default)]
    pub events: Vec<EventConfig>,
    #[serde(default)]
    pub prepare: PrepareConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub predict: PredictSection,
}

/// One wildfire scene and its reference layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub name: String,
    /// 4-band post-event GeoTIFF.
    pub image: PathBuf,
    pub aoi: PathBuf,
    /// Burned-area polygons.
    pub delineation: PathBuf,
    #[serde(default)]
    pub clouds: Option<PathBuf>,
    /// Land-cover category GeoTIFF with WorldCover codes.
    #[serde(default)]
    pub land_cover: Option<PathBuf>,
    /// Held-out scenes are predicted and evaluated, never trained on.
    #[serde(default)]
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Overlap of training patches.
    #[serde(default)]
    pub overlap: f64,
    /// Multiplier turning stored digital numbers into model inputs.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

fn default_patch_size() -> usize {
    512
}

fn default_input_scale() -> f64 {
    1e-4
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            patch_size: default_patch_size(),
            overlap: 0.0,
            input_scale: default_input_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    /// Block side in map units.
    #[serde(default = "default_block_size")]
    pub block_size: f64,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

fn default_block_size() -> f64 {
    2000.0
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: default_fractions(),
            block_size: default_block_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    #[serde(default = "default_width_scale")]
    pub width_scale: f64,
}

fn default_width_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Names the model directory under `run_dir/models`.
    #[serde(default = "default_model_name")]
    pub name: String,
    #[serde(default)]
    pub framework: Framework,
    pub epochs: usize,
    /// Defaults to the architecture's learning rate.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_aug")]
    pub aug_probability: f64,
    #[serde(default)]
    pub mixed_precision: bool,
}

fn default_model_name() -> String {
    "model".into()
}

fn default_batch() -> usize {
    8
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_aug() -> f64 {
    0.5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    /// Defaults to the architecture's weight.
    #[serde(default)]
    pub lambda_lc: Option<f64>,
    #[serde(default)]
    pub dice_smooth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    /// Model directory name; defaults to `train.name`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_predict_overlap")]
    pub overlap: f64,
    #[serde(default)]
    pub mixed_precision: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub tta: TtaConfig,
}

fn default_predict_overlap() -> f64 {
    0.2
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            model: None,
            overlap: default_predict_overlap(),
            mixed_precision: false,
            batch_size: default_batch(),
            tta: TtaConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a config file; relative paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        if let Some(s) = self.synth.as_mut() {
            fix(&mut s.out_dir);
        }
        for e in &mut self.events {
            fix(&mut e.image);
            fix(&mut e.aoi);
            fix(&mut e.delineation);
            if let Some(p) = e.clouds.as_mut() {
                fix(p);
            }
            if let Some(p) = e.land_cover.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        let events = self.events();
        if events.is_empty() {
            return Err(CliError::Config("no events and no synth section".into()));
        }
        let mut names: Vec<&str> = events.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("event names must be unique".into()));
        }
        for e in &events {
            if e.name.is_empty() || e.name.contains(['/', '\\']) {
                return Err(CliError::Config(format!("invalid event name `{}`", e.name)));
            }
        }
        self.patch_spec(self.prepare.overlap)?;
        self.patch_spec(self.predict.overlap)?;
        if !self
            .prepare
            .patch_size
            .is_multiple_of(scarseg_core::models::INPUT_MULTIPLE)
        {
            return Err(CliError::Config(format!(
                "patch_size must be a multiple of {}",
                scarseg_core::models::INPUT_MULTIPLE
            )));
        }
        if !(self.prepare.input_scale > 0.0 && self.prepare.input_scale.is_finite()) {
            return Err(CliError::Config("input_scale must be positive".into()));
        }
        self.fractions()?;
        if !(self.split.block_size > 0.0 && self.split.block_size.is_finite()) {
            return Err(CliError::Config("block_size must be positive".into()));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.loss_config().validate()?;
        self.predict.tta.validate()?;
        if self.predict.batch_size == 0 {
            return Err(CliError::Config("predict batch_size must be positive".into()));
        }
        for name in [&self.train.name, &self.model_name()] {
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(CliError::Config(format!("invalid model name `{name}`")));
            }
        }
        Ok(())
    }

    /// Configured events, or the scenes the synth section produces.
    pub fn events(&self) -> Vec<EventConfig> {
        if !self.events.is_empty() {
            return self.events.clone();
        }
        match &self.synth {
            Some(s) => s.events(),
            None => Vec::new(),
        }
    }

    pub fn training_events(&self) -> Vec<EventConfig> {
        self.events().into_iter().filter(|e| !e.holdout).collect()
    }

    pub fn holdout_events(&self) -> Vec<EventConfig> {
        self.events().into_iter().filter(|e| e.holdout).collect()
    }

    pub fn patch_spec(&self, overlap: f64) -> Result<PatchSpec> {
        Ok(PatchSpec::new(self.prepare.patch_size, overlap, 0.0)?)
    }

    pub fn fractions(&self) -> Result<SplitFractions> {
        let [a, b, c] = self.split.fractions;
        Ok(SplitFractions::new(a, b, c)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.model.architecture)
            .width_scale(self.model.width_scale)
            .with_lc_head(self.train.framework == Framework::Mtl)
            .seed(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::for_architecture(self.model.architecture);
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            aug_probability: self.train.aug_probability,
            seed: self.seed,
            mixed_precision: self.train.mixed_precision,
            framework: self.train.framework,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let base = LossConfig::for_architecture(self.model.architecture);
        LossConfig {
            lambda_lc: self.loss.lambda_lc.unwrap_or(base.lambda_lc),
            dice_smooth: self.loss.dice_smooth.unwrap_or(base.dice_smooth),
        }
    }

    pub fn model_name(&self) -> String {
        self.predict.model.clone().unwrap_or_else(|| self.train.name.clone())
    }

    /// Technique label of the prediction settings, as used in reports.
    pub fn technique(&self) -> String {
        match (self.predict.tta.enabled, self.predict.mixed_precision) {
            (false, false) => "Baseline".into(),
            (true, false) => "TTA".into(),
            (false, true) => "MP".into(),
            (true, true) => "TTA+MP".into(),
        }
    }

    /// SHA-256 of the effective configuration (after overrides).
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn prepared_dir(&self, event: &str) -> PathBuf {
        self.run_dir.join("prepared").join(event)
    }

    pub fn patch_dir(&self, event: &str, layer: &str) -> PathBuf {
        self.run_dir.join("patches").join(event).join(layer)
    }

    pub fn split_path(&self) -> PathBuf {
        self.run_dir.join("split.json")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.run_dir.join("models").join(name)
    }

    pub fn prediction_dir(&self, event: &str) -> PathBuf {
        self.run_dir
            .join("predictions")
            .join(self.model_name())
            .join(self.technique())
            .join(event)
    }

    pub fn report_path(&self) -> PathBuf {
        self.run_dir
            .join("reports")
            .join(format!("{}_{}.csv", self.model_name(), self.technique()))
    }
}
