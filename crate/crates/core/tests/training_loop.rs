mod common;

use std::collections::BTreeMap;

use candle_core::Tensor;
use scarseg_core::metrics::dice;
use scarseg_core::models::{build_model, Architecture, ModelConfig, Precision, LC_HEAD_PREFIX};
use scarseg_core::training::{
    evaluate_dataset, train, train_with, Dataset, EpochRecord, Framework, LossConfig, TrainConfig,
};

/// Learning rate that converges on the small synthetic task in 30 epochs.
const DESK_LR: f64 = 3e-3;

fn desk_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_architecture(Architecture::UnetRn34);
    cfg.epochs = epochs;
    cfg.learning_rate = DESK_LR;
    cfg
}

fn small_model(with_lc_head: bool) -> scarseg_core::models::SegmentationModel {
    build_model(
        &ModelConfig::new(Architecture::UnetRn34)
            .width_scale(0.1)
            .with_lc_head(with_lc_head),
    )
    .unwrap()
}

fn split_history(history: &[EpochRecord], split: &str) -> Vec<EpochRecord> {
    history.iter().filter(|r| r.split == split).cloned().collect()
}

fn values(snapshot: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<f32>> {
    snapshot
        .iter()
        .map(|(k, t)| (k.clone(), t.flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

#[test]
fn overfits_disc_task_with_smoothly_falling_loss() {
    let train_set = common::disc_dataset(32, 64, 1);
    let val_set = common::disc_dataset(8, 64, 2);
    let mut model = small_model(true);
    let cfg = desk_config(30);
    let out = train(&mut model, &train_set, &val_set, &cfg, &LossConfig::default()).unwrap();

    let train_hist = split_history(&out.history, "train");
    assert_eq!(train_hist.len(), 30);
    let last = train_hist.last().unwrap();
    assert!(last.dice > 0.95, "final training Dice {}", last.dice);

    let losses: Vec<f64> = train_hist.iter().map(|r| r.loss).collect();
    let ma: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, pair) in ma.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "moving average rose at window {i}: {ma:?}");
    }

    // the model is left holding the best-validation weights
    let (_, counts) = evaluate_dataset(
        &model,
        &val_set,
        8,
        &LossConfig::default(),
        Framework::Stl,
        Precision::Full,
    )
    .unwrap();
    assert_eq!(dice(&counts), out.best_val_dice);
    let best = split_history(&out.history, "val")
        .iter()
        .map(|r| r.dice)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_dice, best);
}

fn trajectory(framework: Framework, lambda: f64, with_lc_head: bool) -> Vec<BTreeMap<String, Vec<f32>>> {
    let train_set = common::disc_dataset(8, 32, 3);
    let val_set = common::disc_dataset(4, 32, 4);
    let mut model = small_model(with_lc_head);
    let mut cfg = desk_config(3);
    cfg.batch_size = 4;
    cfg.framework = framework;
    let loss_cfg = LossConfig {
        lambda_lc: lambda,
        dice_smooth: 1.0,
    };
    let mut snaps = Vec::new();
    train_with(&mut model, &train_set, &val_set, &cfg, &loss_cfg, &mut |_, m| {
        let mut s = values(&m.snapshot().unwrap());
        s.retain(|k, _| !k.starts_with(LC_HEAD_PREFIX));
        snaps.push(s);
    })
    .unwrap();
    snaps
}

#[test]
fn lambda_zero_mtl_follows_stl_trajectory() {
    let stl = trajectory(Framework::Stl, 0.3, false);
    let mtl0 = trajectory(Framework::Mtl, 0.0, true);
    assert_eq!(stl.len(), 3);
    assert_eq!(stl, mtl0);
    // a positive weight does move the shared weights
    let mtl = trajectory(Framework::Mtl, 0.3, true);
    assert_ne!(stl, mtl);
}

#[test]
fn full_precision_training_is_deterministic() {
    let run = || {
        let train_set = common::disc_dataset(8, 32, 5);
        let val_set = common::disc_dataset(4, 32, 6);
        let mut model = small_model(true);
        let mut cfg = desk_config(3);
        cfg.batch_size = 4;
        cfg.framework = Framework::Mtl;
        let out = train(&mut model, &train_set, &val_set, &cfg, &LossConfig::default()).unwrap();
        let curve: Vec<(u64, u64)> = out
            .history
            .iter()
            .map(|r| (r.loss.to_bits(), r.dice.to_bits()))
            .collect();
        (curve, values(&model.snapshot().unwrap()))
    };
    assert_eq!(run(), run());
}

#[test]
fn mixed_precision_training_converges_with_scaler() {
    let train_set = common::disc_dataset(8, 32, 7);
    let val_set = common::disc_dataset(4, 32, 8);
    let mut model = small_model(false);
    let mut cfg = desk_config(2);
    cfg.batch_size = 4;
    cfg.mixed_precision = true;
    let out = train(&mut model, &train_set, &val_set, &cfg, &LossConfig::default()).unwrap();
    assert!(out.final_scale.is_some());
    assert!(out.history.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn error_paths() {
    let data = common::disc_dataset(4, 32, 9);
    let empty = Dataset::new(Vec::new());
    let mut model = small_model(false);
    let cfg = desk_config(1);
    let err = train(&mut model, &empty, &data, &cfg, &LossConfig::default()).unwrap_err();
    assert_eq!(err.category(), "EMPTY_DATASET");

    let mut mtl = cfg.clone();
    mtl.framework = Framework::Mtl;
    let err = train(&mut model, &data, &data, &mtl, &LossConfig::default()).unwrap_err();
    assert_eq!(err.category(), "MISSING_LC");
}

#[test]
fn divergence_reports_nan_loss() {
    let data = common::disc_dataset(8, 32, 10);
    for mixed in [false, true] {
        let mut model = small_model(false);
        let mut cfg = desk_config(6);
        cfg.batch_size = 1;
        cfg.learning_rate = 1e30;
        cfg.mixed_precision = mixed;
        let err = train(&mut model, &data, &data, &cfg, &LossConfig::default()).unwrap_err();
        assert_eq!(err.category(), "NAN_LOSS", "mixed = {mixed}");
    }
}
