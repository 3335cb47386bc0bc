//! Confusion counting, Dice/IoU and tabular run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;
use crate::tta::PredictionRun;

/// Pixel counts with burned as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Counts from thresholded probabilities against 0/1 targets; targets
    /// outside {0, 1} (nodata) are skipped.
    pub fn from_probabilities(probs: &[f32], target: &[f32], threshold: f32) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &t) in probs.iter().zip(target) {
            if t == 0.0 || t == 1.0 {
                c.add(p >= threshold, t == 1.0);
            }
        }
        c
    }
}

/// Counts over pixels where the truth is not nodata and `valid` (if given)
/// equals 1.
pub fn confusion(pred: &RasterGrid, truth: &RasterGrid, valid: Option<&RasterGrid>) -> Result<ConfusionCounts> {
    pred.same_grid(truth)?;
    if let Some(v) = valid {
        truth.same_grid(v)?;
    }
    let mut counts = ConfusionCounts::default();
    let p = pred.band(0);
    let t = truth.band(0);
    for i in 0..t.len() {
        if truth.is_nodata(t[i]) || pred.is_nodata(p[i]) {
            continue;
        }
        if let Some(v) = valid {
            if v.band(0)[i] != 1.0 {
                continue;
            }
        }
        counts.add(p[i] == 1.0, t[i] == 1.0);
    }
    Ok(counts)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    (2 * c.tp) as f64 / denom as f64
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

/// Labels identifying a run in a report table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabels {
    pub framework: String,
    pub model: String,
    pub technique: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: RunLabels,
    pub dice: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
    pub inference_minutes: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "Framework",
    "Model",
    "Technique",
    "Dice",
    "IoU",
    "Inference Time (min)",
    "TP",
    "FP",
    "FN",
    "TN",
];

impl EvalReport {
    pub fn from_counts(labels: RunLabels, counts: ConfusionCounts, inference_minutes: f64) -> Self {
        EvalReport {
            labels,
            dice: dice(&counts),
            iou: iou(&counts),
            counts,
            inference_minutes,
        }
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.labels.framework.clone(),
            self.labels.model.clone(),
            self.labels.technique.clone(),
            format!("{:.4}", self.dice),
            format!("{:.4}", self.iou),
            format!("{:.4}", self.inference_minutes),
            self.counts.tp.to_string(),
            self.counts.fp.to_string(),
            self.counts.fn_.to_string(),
            self.counts.tn.to_string(),
        ]
    }
}

/// Scores a prediction run against the scene truth.
pub fn evaluate_run(
    run: &PredictionRun,
    truth: &RasterGrid,
    valid: Option<&RasterGrid>,
    labels: RunLabels,
) -> Result<EvalReport> {
    let counts = confusion(&run.binary_map, truth, valid)?;
    Ok(EvalReport::from_counts(labels, counts, run.wall_clock_seconds / 60.0))
}

/// Renders reports as CSV text with the table header.
pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::BadConfig(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record(r.csv_record()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::BadConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let text = reports_to_csv(reports)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GeoTransform, RasterKind, SampleType};

    fn mask(values: Vec<f32>, w: usize, h: usize) -> RasterGrid {
        let t = GeoTransform::new(0.0, h as f64, 1.0, 1.0, "EPSG:2100").unwrap();
        RasterGrid::from_parts(w, h, 1, values, t, RasterKind::BinaryMask, SampleType::U8, Some(255.0)).unwrap()
    }

    #[test]
    fn all_ones() {
        let m = mask(vec![1.0; 100], 10, 10);
        let c = confusion(&m, &m, None).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 100,
                fp: 0,
                fn_: 0,
                tn: 0
            }
        );
        assert_eq!(dice(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
    }

    #[test]
    fn complement_has_no_agreement() {
        let truth: Vec<f32> = (0..100).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let pred: Vec<f32> = truth.iter().map(|v| 1.0 - v).collect();
        let c = confusion(&mask(pred, 10, 10), &mask(truth, 10, 10), None).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn formula_arithmetic() {
        let c = ConfusionCounts {
            tp: 50,
            fp: 25,
            fn_: 25,
            tn: 0,
        };
        assert!((dice(&c) - 100.0 / 150.0).abs() < 1e-15);
        assert_eq!(iou(&c), 0.5);
    }

    #[test]
    fn empty_empty_scores_one() {
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 42,
        };
        assert_eq!(dice(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
    }

    #[test]
    fn nodata_and_invalid_pixels_are_skipped() {
        let truth = mask(vec![1.0, 255.0, 0.0, 1.0], 2, 2);
        let pred = mask(vec![1.0, 1.0, 1.0, 0.0], 2, 2);
        let valid = mask(vec![1.0, 1.0, 1.0, 0.0], 2, 2);
        let c = confusion(&pred, &truth, Some(&valid)).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 0,
                tn: 0
            }
        );
    }

    #[test]
    fn grid_mismatch() {
        let a = mask(vec![0.0; 4], 2, 2);
        let b = mask(vec![0.0; 6], 3, 2);
        assert_eq!(confusion(&a, &b, None).unwrap_err().category(), "GRID_MISMATCH");
    }

    #[test]
    fn csv_header_and_row() {
        let r = EvalReport::from_counts(
            RunLabels {
                framework: "MTL".into(),
                model: "UNet-RN34".into(),
                technique: "TTA".into(),
            },
            ConfusionCounts {
                tp: 50,
                fp: 25,
                fn_: 25,
                tn: 10,
            },
            1.5,
        );
        let text = reports_to_csv(&[r]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "Framework,Model,Technique,Dice,IoU,Inference Time (min),TP,FP,FN,TN"
        );
        assert_eq!(
            lines.next().unwrap(),
            "MTL,UNet-RN34,TTA,0.6667,0.5000,1.5000,50,25,25,10"
        );
    }
}
