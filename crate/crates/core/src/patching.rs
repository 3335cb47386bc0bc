//! Patch extraction and mosaicking.
//!
//! Windows are laid out on a regular stride of `floor(size * (1 - overlap))`
//! pixels. The last window along an axis is snapped inward so it ends on
//! the raster border; padding with `pad_value` only happens when the raster
//! is smaller than one patch along that axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, GeoTransform, RasterGrid, RasterKind};

const INDEX_FILE: &str = "index.json";
const INDEX_FORMAT: &str = "scarseg-patchset";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub overlap_fraction: f64,
    pub pad_value: f32,
}

impl PatchSpec {
    pub fn new(patch_size: usize, overlap_fraction: f64, pad_value: f32) -> Result<Self> {
        let spec = PatchSpec {
            patch_size,
            overlap_fraction,
            pad_value,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::BadConfig("patch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::BadConfig(format!(
                "overlap_fraction must be in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.patch_size as f64 * (1.0 - self.overlap_fraction)).floor() as usize).max(1)
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 512,
            overlap_fraction: 0.0,
            pad_value: 0.0,
        }
    }
}

/// Top-left corner of a patch in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<RasterGrid>,
    pub placements: Vec<Placement>,
    pub source_width: usize,
    pub source_height: usize,
    pub source_transform: GeoTransform,
    pub spec: PatchSpec,
}

/// Window start offsets along one axis.
pub fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut out: Vec<usize> = Vec::new();
    let mut start = 0;
    while start < len {
        let pos = start.min(len - patch);
        if out.last() != Some(&pos) {
            out.push(pos);
        }
        start += stride;
    }
    out
}

pub fn patchify(raster: &RasterGrid, spec: &PatchSpec) -> Result<PatchSet> {
    spec.validate()?;
    let size = spec.patch_size;
    let rows = axis_offsets(raster.height(), size, spec.stride());
    let cols = axis_offsets(raster.width(), size, spec.stride());
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    let mut placements = Vec::with_capacity(rows.len() * cols.len());
    for &row in &rows {
        for &col in &cols {
            patches.push(raster.window(row, col, size, size, spec.pad_value)?);
            placements.push(Placement { row, col });
        }
    }
    Ok(PatchSet {
        patches,
        placements,
        source_width: raster.width(),
        source_height: raster.height(),
        source_transform: raster.transform().clone(),
        spec: *spec,
    })
}

/// How overlapping patch values are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    /// Unweighted mean of every covering patch.
    #[default]
    Mean,
    /// Weighted mean; a pixel's weight is its distance (in pixels, +1) to the
    /// nearest patch edge, which suppresses seams from border effects.
    Feather,
}

/// Reassembles a scene from (probability) patches, averaging overlaps.
pub fn mosaic(predictions: &PatchSet) -> Result<RasterGrid> {
    mosaic_with(predictions, Blend::Mean)
}

/// Duplicate placements are allowed here (stacked predictions of the same
/// window simply average).
pub fn mosaic_with(predictions: &PatchSet, blend: Blend) -> Result<RasterGrid> {
    predictions.check_layout(false)?;
    let first = &predictions.patches[0];
    let (sw, sh, bands) = (predictions.source_width, predictions.source_height, first.bands());
    let size = predictions.spec.patch_size;
    let n = sw * sh;
    // f64 accumulation keeps the mean of identical f32 values exact
    let mut sum = vec![0f64; bands * n];
    let mut weight = vec![0f64; n];
    for (patch, p) in predictions.patches.iter().zip(&predictions.placements) {
        let h = size.min(sh - p.row);
        let w = size.min(sw - p.col);
        for r in 0..h {
            for c in 0..w {
                let wgt = match blend {
                    Blend::Mean => 1.0,
                    Blend::Feather => {
                        let edge = r.min(c).min(size - 1 - r).min(size - 1 - c);
                        edge as f64 + 1.0
                    }
                };
                let dst = (p.row + r) * sw + p.col + c;
                weight[dst] += wgt;
                for b in 0..bands {
                    sum[b * n + dst] += wgt * f64::from(patch.get(b, r, c));
                }
            }
        }
    }
    if weight.contains(&0.0) {
        return Err(Error::Shape("patch set leaves source pixels uncovered".into()));
    }
    let values = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / weight[i % n]) as f32)
        .collect();
    RasterGrid::from_parts(
        sw,
        sh,
        bands,
        values,
        predictions.source_transform.clone(),
        first.kind(),
        first.sample_type(),
        first.nodata(),
    )
}

/// Per-pixel count of patches covering the source, padding excluded.
pub fn coverage_counts(set: &PatchSet) -> Vec<u32> {
    let (sw, sh) = (set.source_width, set.source_height);
    let size = set.spec.patch_size;
    let mut cover = vec![0u32; sw * sh];
    for p in &set.placements {
        for r in p.row..(p.row + size).min(sh) {
            for c in p.col..(p.col + size).min(sw) {
                cover[r * sw + c] += 1;
            }
        }
    }
    cover
}

#[derive(Serialize, Deserialize)]
struct PatchIndex {
    format: String,
    version: u32,
    spec: PatchSpec,
    source_width: usize,
    source_height: usize,
    source_transform: GeoTransform,
    kind: RasterKind,
    patches: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    row: usize,
    col: usize,
    file: String,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Same layout, different per-patch rasters (e.g. predictions).
    pub fn with_patches(&self, patches: Vec<RasterGrid>) -> Result<PatchSet> {
        let set = PatchSet {
            patches,
            ..self.clone_layout()
        };
        set.check_consistent()?;
        Ok(set)
    }

    fn clone_layout(&self) -> PatchSet {
        PatchSet {
            patches: Vec::new(),
            placements: self.placements.clone(),
            source_width: self.source_width,
            source_height: self.source_height,
            source_transform: self.source_transform.clone(),
            spec: self.spec,
        }
    }

    /// Map coordinates of a patch's center.
    pub fn patch_center(&self, index: usize) -> (f64, f64) {
        let p = self.placements[index];
        let half = self.spec.patch_size as f64 / 2.0;
        let t = &self.source_transform;
        (
            t.origin_x + (p.col as f64 + half) * t.pixel_size_x,
            t.origin_y - (p.row as f64 + half) * t.pixel_size_y,
        )
    }

    pub fn check_consistent(&self) -> Result<()> {
        self.check_layout(true)
    }

    fn check_layout(&self, unique: bool) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::EmptySet);
        }
        if self.patches.len() != self.placements.len() {
            return Err(Error::Shape(format!(
                "{} patches but {} placements",
                self.patches.len(),
                self.placements.len()
            )));
        }
        let size = self.spec.patch_size;
        let bands = self.patches[0].bands();
        let mut seen = std::collections::HashSet::new();
        for (patch, p) in self.patches.iter().zip(&self.placements) {
            if patch.width() != size || patch.height() != size || patch.bands() != bands {
                return Err(Error::Shape(format!(
                    "patch {}x{}x{} does not match spec size {size}",
                    patch.bands(),
                    patch.height(),
                    patch.width()
                )));
            }
            if p.row >= self.source_height || p.col >= self.source_width {
                return Err(Error::Shape(format!(
                    "placement ({}, {}) outside {}x{} source",
                    p.row, p.col, self.source_height, self.source_width
                )));
            }
            if unique && !seen.insert(*p) {
                return Err(Error::Shape(format!("duplicate placement ({}, {})", p.row, p.col)));
            }
        }
        Ok(())
    }

    /// Writes every patch as a GeoTIFF plus an `index.json` sidecar.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.check_consistent()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (patch, p)) in self.patches.iter().zip(&self.placements).enumerate() {
            let file = format!("patch_{i:05}.tif");
            write_raster(patch, &dir.join(&file))?;
            entries.push(IndexEntry {
                row: p.row,
                col: p.col,
                file,
            });
        }
        let index = PatchIndex {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            spec: self.spec,
            source_width: self.source_width,
            source_height: self.source_height,
            source_transform: self.source_transform.clone(),
            kind: self.patches[0].kind(),
            patches: entries,
        };
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<PatchSet> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: PatchIndex =
            serde_json::from_str(&text).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
        if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected {INDEX_FORMAT} v{INDEX_VERSION}",
                path.display()
            )));
        }
        let mut patches = Vec::with_capacity(index.patches.len());
        let mut placements = Vec::with_capacity(index.patches.len());
        for e in &index.patches {
            patches.push(read_raster(&dir.join(&e.file))?);
            placements.push(Placement { row: e.row, col: e.col });
        }
        let set = PatchSet {
            patches,
            placements,
            source_width: index.source_width,
            source_height: index.source_height,
            source_transform: index.source_transform,
            spec: index.spec,
        };
        set.check_consistent()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn prob(w: usize, h: usize, f: impl Fn(usize) -> f32) -> RasterGrid {
        RasterGrid::new(
            w,
            h,
            1,
            (0..w * h).map(f).collect(),
            GeoTransform::new(0.0, h as f64, 1.0, 1.0, "EPSG:2100").unwrap(),
            RasterKind::ProbabilityMap,
        )
        .unwrap()
    }

    #[test]
    fn stride_rounding() {
        assert_eq!(PatchSpec::new(512, 0.2, 0.0).unwrap().stride(), 409);
        assert_eq!(PatchSpec::new(512, 0.0, 0.0).unwrap().stride(), 512);
        assert!(PatchSpec::new(512, 1.0, 0.0).is_err());
        assert!(PatchSpec::new(0, 0.0, 0.0).is_err());
    }

    #[test]
    fn offsets() {
        assert_eq!(axis_offsets(512, 512, 512), vec![0]);
        assert_eq!(axis_offsets(1024, 512, 512), vec![0, 512]);
        assert_eq!(axis_offsets(1000, 512, 409), vec![0, 409, 488]);
        assert_eq!(axis_offsets(100, 512, 409), vec![0]);
        assert_eq!(axis_offsets(600, 512, 512), vec![0, 88]);
    }

    #[test]
    fn exact_tiling() {
        let r = prob(1024, 1024, |_| 0.5);
        let set = patchify(&r, &PatchSpec::new(512, 0.0, 0.0).unwrap()).unwrap();
        let got: Vec<(usize, usize)> = set.placements.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(got, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
    }

    #[test]
    fn small_raster_is_padded() {
        let r = prob(5, 3, |i| (i % 2) as f32);
        let set = patchify(&r, &PatchSpec::new(8, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.patches[0].width(), 8);
        assert_eq!(mosaic(&set).unwrap(), r);
    }

    #[test]
    fn mean_of_two_full_overlaps() {
        let a = prob(4, 4, |_| 0.2);
        let b = prob(4, 4, |_| 0.6);
        let set = PatchSet {
            patches: vec![a.clone(), b],
            placements: vec![Placement { row: 0, col: 0 }, Placement { row: 0, col: 0 }],
            source_width: 4,
            source_height: 4,
            source_transform: a.transform().clone(),
            spec: PatchSpec::new(4, 0.0, 0.0).unwrap(),
        };
        let out = mosaic(&set).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.4));
        assert!(set.check_consistent().is_err());
    }

    #[test]
    fn empty_set() {
        let a = prob(4, 4, |_| 0.2);
        let set = PatchSet {
            patches: vec![],
            placements: vec![],
            source_width: 4,
            source_height: 4,
            source_transform: a.transform().clone(),
            spec: PatchSpec::new(4, 0.0, 0.0).unwrap(),
        };
        assert_eq!(mosaic(&set).unwrap_err().category(), "EMPTY_SET");
    }

    #[test]
    fn feather_reproduces_constant_scene() {
        let r = prob(30, 23, |_| 0.25);
        let set = patchify(&r, &PatchSpec::new(8, 0.5, 0.0).unwrap()).unwrap();
        assert_eq!(mosaic_with(&set, Blend::Feather).unwrap(), r);
    }

    #[test]
    fn dir_round_trip() {
        let r = prob(20, 13, |i| (i % 11) as f32 / 10.0);
        let set = patchify(&r, &PatchSpec::new(8, 0.2, 0.0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        assert_eq!(PatchSet::read_dir(dir.path()).unwrap(), set);
    }
}
