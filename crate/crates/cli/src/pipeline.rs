//! Pipeline stages. Each stage reads the artifacts of the previous ones
//! from `run_dir`, checks its inputs up front and returns a JSON summary.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use scarseg_core::blocksplit::{
    assign_patches, assign_splits_pooled, build_block_grid, burned_balance, EventSplit, PatchRecord, Split, SplitFile,
};
use scarseg_core::metrics::{confusion, dice, iou, write_reports_csv, ConfusionCounts, EvalReport, RunLabels};
use scarseg_core::models::{build_model, Precision, SegmentationModel};
use scarseg_core::patching::{patchify, PatchSet, PatchSpec};
use scarseg_core::raster::{
    apply_lc_scheme, binarize_delineation, center_mask, clip_to_aoi, read_raster, read_vector, resample_nearest,
    subtract_cloud, write_raster, MASK_NODATA,
};
use scarseg_core::training::{evaluate_dataset, train as fit, write_history_csv, Dataset, Framework, Sample};
use scarseg_core::tta::{predict_scene_with, Frozen, RunReport, SceneOptions};
use scarseg_core::{LandCoverScheme, RasterGrid, RasterKind, SampleType};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{EventConfig, PipelineConfig};
use crate::error::{CliError, Result};
use crate::manifest::record_stage;
use crate::synth;

pub const IMAGE: &str = "image";
pub const BURNED: &str = "ba";
pub const VALID: &str = "valid";
pub const LAND_COVER: &str = "lc";
pub const MODEL_FILE: &str = "model.safetensors";
pub const SUMMARY_FILE: &str = "summary.json";

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(scarseg_core::Error::UnsupportedFormat(format!(
            "{}: {e}",
            path.display()
        )))
    })
}

/// Writes the synthetic scenes described by the `[synth]` section.
pub fn synth(cfg: &PipelineConfig) -> Result<Value> {
    let synth_cfg = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("the synth command needs a [synth] section".into()))?;
    let scenes = synth::generate(synth_cfg, cfg.seed)?;
    for s in &scenes {
        info!(
            "synth {}: burned fraction {:.3}, {} scars, {} clouds",
            s.name, s.burned_fraction, s.scars, s.clouds
        );
    }
    record_stage(cfg, "synth", std::slice::from_ref(&synth_cfg.out_dir))?;
    Ok(json!({ "stage": "synth", "scenes": scenes }))
}

fn check_event_inputs(e: &EventConfig) -> Result<()> {
    require(&e.image)?;
    require(&e.aoi)?;
    require(&e.delineation)?;
    if let Some(p) = &e.clouds {
        require(p)?;
    }
    if let Some(p) = &e.land_cover {
        require(p)?;
    }
    Ok(())
}

/// Replaces pixels outside the AOI with the mask nodata value.
fn mask_outside(grid: &RasterGrid, inside: &[bool], kind: RasterKind) -> Result<RasterGrid> {
    let values = grid
        .band(0)
        .iter()
        .zip(inside)
        .map(|(&v, &keep)| if keep { v } else { MASK_NODATA })
        .collect();
    Ok(RasterGrid::from_parts(
        grid.width(),
        grid.height(),
        1,
        values,
        grid.transform().clone(),
        kind,
        SampleType::U8,
        Some(MASK_NODATA),
    )?)
}

/// Aligned model inputs and labels of one event on the clipped image grid.
pub struct PreparedEvent {
    pub image: RasterGrid,
    pub burned: RasterGrid,
    pub valid: RasterGrid,
    pub land_cover: Option<RasterGrid>,
}

pub fn prepare_event(cfg: &PipelineConfig, e: &EventConfig) -> Result<PreparedEvent> {
    let raw = read_raster(&e.image)?;
    if raw.bands() != 4 {
        return Err(CliError::Core(scarseg_core::Error::InvalidRaster(format!(
            "{}: expected 4 bands (B, G, R, NIR), found {}",
            e.image.display(),
            raw.bands()
        ))));
    }
    let crs = raw.transform().crs_id.clone();
    let aoi = read_vector(&e.aoi, Some(&crs))?;
    let clipped = clip_to_aoi(&raw, &aoi)?;
    let scale = cfg.prepare.input_scale as f32;
    let values = clipped
        .values()
        .iter()
        .map(|&v| if clipped.is_nodata(v) { 0.0 } else { v * scale })
        .collect();
    let geometry = clipped.geometry();
    let image = RasterGrid::new(
        geometry.width,
        geometry.height,
        4,
        values,
        geometry.transform.clone(),
        RasterKind::Image,
    )?;
    let inside = center_mask(&aoi.polygons, &geometry);

    let cloud = match &e.clouds {
        Some(p) => binarize_delineation(&read_vector(p, Some(&crs))?, &image)?,
        None => RasterGrid::filled(&geometry, 1, 0.0, RasterKind::BinaryMask)?,
    };
    let delineation = read_vector(&e.delineation, Some(&crs))?;
    let burned = subtract_cloud(&binarize_delineation(&delineation, &image)?, &cloud)?;
    let burned = mask_outside(&burned, &inside, RasterKind::BinaryMask)?;
    let valid_values = inside
        .iter()
        .zip(cloud.band(0))
        .map(|(&a, &c)| if a && c != 1.0 { 1.0 } else { 0.0 })
        .collect();
    let valid = RasterGrid::new(
        geometry.width,
        geometry.height,
        1,
        valid_values,
        geometry.transform.clone(),
        RasterKind::BinaryMask,
    )?;
    let land_cover = match &e.land_cover {
        Some(p) => {
            let lc = resample_nearest(&read_raster(p)?, &geometry)?;
            let lc = apply_lc_scheme(&lc, &cloud, &LandCoverScheme::worldcover())?;
            Some(mask_outside(&lc, &inside, RasterKind::CategoryMap)?)
        }
        None => None,
    };
    Ok(PreparedEvent {
        image,
        burned,
        valid,
        land_cover,
    })
}

/// Clips, labels and patches every event.
pub fn prepare(cfg: &PipelineConfig) -> Result<Value> {
    let events = cfg.events();
    for e in &events {
        check_event_inputs(e)?;
    }
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for e in &events {
        let p = prepare_event(cfg, e)?;
        let dir = cfg.prepared_dir(&e.name);
        create_dir(&dir)?;
        write_raster(&p.image, &dir.join(format!("{IMAGE}.tif")))?;
        write_raster(&p.burned, &dir.join(format!("{BURNED}.tif")))?;
        write_raster(&p.valid, &dir.join(format!("{VALID}.tif")))?;
        if let Some(lc) = &p.land_cover {
            write_raster(lc, &dir.join(format!("{LAND_COVER}.tif")))?;
        }
        outputs.push(dir);
        let mut patches = 0;
        if !e.holdout {
            let size = cfg.prepare.patch_size;
            let overlap = cfg.prepare.overlap;
            let image_set = patchify(&p.image, &PatchSpec::new(size, overlap, 0.0)?)?;
            let mask_spec = PatchSpec::new(size, overlap, MASK_NODATA)?;
            image_set.write_dir(&cfg.patch_dir(&e.name, IMAGE))?;
            patchify(&p.burned, &mask_spec)?.write_dir(&cfg.patch_dir(&e.name, BURNED))?;
            if let Some(lc) = &p.land_cover {
                patchify(lc, &mask_spec)?.write_dir(&cfg.patch_dir(&e.name, LAND_COVER))?;
            }
            patches = image_set.len();
            outputs.push(cfg.run_dir.join("patches").join(&e.name));
        }
        info!(
            "prepared {} ({}x{}, {patches} patches)",
            e.name,
            p.image.width(),
            p.image.height()
        );
        summary.push(json!({
            "event": e.name,
            "width": p.image.width(),
            "height": p.image.height(),
            "holdout": e.holdout,
            "patches": patches,
        }));
    }
    record_stage(cfg, "prepare", &outputs)?;
    Ok(json!({ "stage": "prepare", "events": summary }))
}

/// Assigns spatial blocks of all training events to train/val/test.
pub fn split(cfg: &PipelineConfig) -> Result<Value> {
    let events = cfg.training_events();
    for e in &events {
        require(&e.aoi)?;
        require(&cfg.patch_dir(&e.name, BURNED))?;
    }
    let mut grids = Vec::with_capacity(events.len());
    let mut masks = Vec::with_capacity(events.len());
    for e in &events {
        let ba = PatchSet::read_dir(&cfg.patch_dir(&e.name, BURNED))?;
        let aoi = read_vector(&e.aoi, Some(&ba.source_transform.crs_id))?;
        grids.push(build_block_grid(&aoi, &e.name, cfg.split.block_size)?);
        masks.push(ba);
    }
    let assignment = assign_splits_pooled(&grids, cfg.fractions()?, cfg.seed)?;
    let mut event_splits = Vec::with_capacity(events.len());
    let mut balance: BTreeMap<Split, (u64, u64)> = BTreeMap::new();
    for ((e, grid), ba) in events.iter().zip(&grids).zip(&masks) {
        let per_event = assign_patches(ba, grid, &assignment);
        for (split, (burned, valid)) in burned_balance(ba, &per_event) {
            let entry = balance.entry(split).or_default();
            entry.0 += burned;
            entry.1 += valid;
        }
        event_splits.push(EventSplit {
            event: e.name.clone(),
            patches: per_event
                .patch_to_split
                .iter()
                .map(|(&index, &split)| PatchRecord { index, split })
                .collect(),
            excluded: per_event.excluded_patches.clone(),
        });
    }
    let file = SplitFile::new(&assignment, cfg.split.block_size, event_splits, &balance);
    create_dir(&cfg.run_dir)?;
    file.write(&cfg.split_path())?;
    let mut blocks = BTreeMap::new();
    for b in &file.blocks {
        *blocks.entry(b.split.as_str()).or_insert(0usize) += 1;
    }
    info!("split {} blocks: {blocks:?}", file.blocks.len());
    record_stage(cfg, "split", &[cfg.split_path()])?;
    Ok(json!({ "stage": "split", "blocks": blocks, "balance": file.balance }))
}

/// Training, validation and test samples built from the split file.
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn sample_of(image: &RasterGrid, ba: &RasterGrid, lc: Option<&RasterGrid>) -> Sample {
    Sample {
        image: image.values().to_vec(),
        channels: image.bands(),
        height: image.height(),
        width: image.width(),
        ba: ba.band(0).to_vec(),
        lc: lc.map(|g| g.band(0).to_vec()),
    }
}

pub fn load_split_data(cfg: &PipelineConfig) -> Result<SplitData> {
    require(&cfg.split_path())?;
    let events = cfg.training_events();
    for e in &events {
        require(&cfg.patch_dir(&e.name, IMAGE))?;
        require(&cfg.patch_dir(&e.name, BURNED))?;
        if cfg.train.framework == Framework::Mtl {
            require(&cfg.patch_dir(&e.name, LAND_COVER))?;
        }
    }
    let file = SplitFile::read(&cfg.split_path())?;
    let mut sets: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
    for e in &events {
        let images = PatchSet::read_dir(&cfg.patch_dir(&e.name, IMAGE))?;
        let ba = PatchSet::read_dir(&cfg.patch_dir(&e.name, BURNED))?;
        let lc_dir = cfg.patch_dir(&e.name, LAND_COVER);
        let lc = if lc_dir.exists() {
            Some(PatchSet::read_dir(&lc_dir)?)
        } else {
            None
        };
        for split in Split::ALL {
            for i in file.patches_of(&e.name, split) {
                let mask = &ba.patches[i];
                // patches with no labelled pixel carry no signal
                if !mask.band(0).iter().any(|&v| v == 0.0 || v == 1.0) {
                    continue;
                }
                let lc_patch = lc.as_ref().map(|s| &s.patches[i]);
                sets.entry(split)
                    .or_default()
                    .push(sample_of(&images.patches[i], mask, lc_patch));
            }
        }
    }
    let mut take = |s: Split| Dataset::new(sets.remove(&s).unwrap_or_default());
    Ok(SplitData {
        train: take(Split::Train),
        val: take(Split::Val),
        test: take(Split::Test),
    })
}

/// Written next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub framework: String,
    pub architecture: String,
    pub width_scale: f64,
    pub mixed_precision: bool,
    pub parameters: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Validation Dice after the last epoch.
    pub final_val_dice: f64,
    pub test_dice: f64,
    pub test_iou: f64,
    pub skipped_steps: usize,
    pub final_scale: Option<f64>,
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_patches: usize,
    pub train_seconds: f64,
}

/// Trains a model and stores its weights, history and test score.
pub fn train(cfg: &PipelineConfig) -> Result<Value> {
    let data = load_split_data(cfg)?;
    let train_cfg = cfg.train_config();
    let loss_cfg = cfg.loss_config();
    let mut model = build_model(&cfg.model_config())?;
    info!(
        "training {} ({} parameters) on {} patches, validating on {}",
        model.config().architecture.label(),
        model.param_count(),
        data.train.len(),
        data.val.len()
    );
    let started = Instant::now();
    let outcome = fit(&mut model, &data.train, &data.val, &train_cfg, &loss_cfg)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let counts = if data.test.is_empty() {
        ConfusionCounts::default()
    } else {
        evaluate_dataset(
            &model,
            &data.test,
            train_cfg.batch_size,
            &loss_cfg,
            train_cfg.framework,
            train_cfg.precision(),
        )?
        .1
    };
    // the land-cover head only serves training
    let model = if model.has_lc_head() {
        model.drop_lc_head()?
    } else {
        model
    };
    let dir = cfg.model_dir(&cfg.train.name);
    create_dir(&dir)?;
    model.save(&dir.join(MODEL_FILE))?;
    write_history_csv(&outcome.history, &dir.join("history.csv"))?;
    let summary = TrainSummary {
        framework: train_cfg.framework.label().into(),
        architecture: model.config().architecture.label().into(),
        width_scale: model.config().width_scale,
        mixed_precision: train_cfg.mixed_precision,
        parameters: model.param_count(),
        epochs: train_cfg.epochs,
        best_epoch: outcome.best_epoch,
        best_val_dice: outcome.best_val_dice,
        final_val_dice: outcome
            .history
            .iter()
            .rev()
            .find(|r| r.split == "val")
            .map_or(f64::NAN, |r| r.dice),
        test_dice: dice(&counts),
        test_iou: iou(&counts),
        skipped_steps: outcome.skipped_steps,
        final_scale: outcome.final_scale,
        train_patches: data.train.len(),
        val_patches: data.val.len(),
        test_patches: data.test.len(),
        train_seconds,
    };
    write_json(&summary, &dir.join(SUMMARY_FILE))?;
    info!(
        "best val Dice {:.4} at epoch {}, test Dice {:.4}",
        summary.best_val_dice, summary.best_epoch, summary.test_dice
    );
    record_stage(cfg, "train", &[dir])?;
    Ok(json!({ "stage": "train", "summary": summary }))
}

/// Predicts every held-out event with the configured TTA and precision.
pub fn predict(cfg: &PipelineConfig) -> Result<Value> {
    let model_path = cfg.model_dir(&cfg.model_name()).join(MODEL_FILE);
    require(&model_path)?;
    let events = cfg.holdout_events();
    for e in &events {
        require(&cfg.prepared_dir(&e.name).join(format!("{IMAGE}.tif")))?;
    }
    let model = SegmentationModel::load(&model_path)?;
    run_predictions(cfg, &model, &events)
}

pub fn run_predictions(cfg: &PipelineConfig, model: &SegmentationModel, events: &[EventConfig]) -> Result<Value> {
    let precision = if cfg.predict.mixed_precision {
        Precision::Mixed
    } else {
        Precision::Full
    };
    let options = SceneOptions {
        batch_size: cfg.predict.batch_size,
        mixed_precision: cfg.predict.mixed_precision,
    };
    let spec = cfg.patch_spec(cfg.predict.overlap)?;
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for e in events {
        let image = read_raster(&cfg.prepared_dir(&e.name).join(format!("{IMAGE}.tif")))?;
        let patches = patchify(&image, &spec)?;
        let run = predict_scene_with(&Frozen { model, precision }, &patches, &cfg.predict.tta, options)?;
        let dir = cfg.prediction_dir(&e.name);
        create_dir(&dir)?;
        write_raster(&run.probability_map, &dir.join("probability.tif"))?;
        write_raster(&run.binary_map, &dir.join("binary.tif"))?;
        let report = run.report();
        write_json(&report, &dir.join("report.json"))?;
        info!(
            "predicted {} in {:.2} s ({} invocations over {} patches)",
            e.name, report.wall_clock_seconds, report.model_invocations, report.patches_processed
        );
        reports.push(json!({ "event": e.name, "report": report }));
        outputs.push(dir);
    }
    record_stage(cfg, "predict", &outputs)?;
    Ok(json!({ "stage": "predict", "technique": cfg.technique(), "events": reports }))
}

/// Scores held-out predictions against the prepared labels.
pub fn evaluate(cfg: &PipelineConfig) -> Result<Value> {
    let events = cfg.holdout_events();
    let mut paths = Vec::new();
    for e in &events {
        let prepared = cfg.prepared_dir(&e.name);
        let predicted = cfg.prediction_dir(&e.name);
        let trio = [
            predicted.join("binary.tif"),
            predicted.join("report.json"),
            prepared.join(format!("{BURNED}.tif")),
            prepared.join(format!("{VALID}.tif")),
        ];
        for p in &trio {
            require(p)?;
        }
        paths.push(trio);
    }
    let summary_path = cfg.model_dir(&cfg.model_name()).join(SUMMARY_FILE);
    require(&summary_path)?;
    let summary: TrainSummary = read_json(&summary_path)?;

    let mut counts = ConfusionCounts::default();
    let mut minutes = 0.0;
    let mut per_event = Vec::new();
    for (e, [binary, report, truth, valid]) in events.iter().zip(&paths) {
        let c = confusion(&read_raster(binary)?, &read_raster(truth)?, Some(&read_raster(valid)?))?;
        let run: RunReport = read_json(report)?;
        minutes += run.inference_minutes;
        counts.merge(&c);
        per_event.push(json!({ "event": e.name, "dice": dice(&c), "iou": iou(&c) }));
    }
    let labels = RunLabels {
        framework: summary.framework,
        model: summary.architecture,
        technique: cfg.technique(),
    };
    let report = EvalReport::from_counts(labels, counts, minutes);
    let csv_path = cfg.report_path();
    create_dir(csv_path.parent().expect("report path has a parent"))?;
    write_reports_csv(std::slice::from_ref(&report), &csv_path)?;
    let json_path = csv_path.with_extension("json");
    write_json(&report, &json_path)?;
    info!("held-out Dice {:.4}, IoU {:.4}", report.dice, report.iou);
    record_stage(cfg, "evaluate", &[csv_path, json_path])?;
    Ok(json!({ "stage": "evaluate", "report": report, "events": per_event }))
}

/// Every stage in order; `synth` runs only when configured.
pub fn run_all(cfg: &PipelineConfig) -> Result<Value> {
    let mut stages = Vec::new();
    if cfg.synth.is_some() && cfg.events.is_empty() {
        stages.push(synth(cfg)?);
    }
    for stage in [prepare, split, train, predict, evaluate] {
        stages.push(stage(cfg)?);
    }
    Ok(json!({ "stage": "run", "stages": stages }))
}
