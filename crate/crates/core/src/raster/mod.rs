//! Georeferenced rasters and the data-preparation operations applied to them.
//!
//! A [`RasterGrid`] stores values band-major (`band, row, col`) as `f32`,
//! which represents uint8, uint16 and float32 sources exactly. The on-disk
//! sample type is carried alongside so a write/read round trip is lossless.

mod geotiff;
mod ops;
mod rasterize;
mod vector;

pub use geotiff::{read_raster, write_raster};
pub(crate) use ops::intersection_bounds;
pub use ops::{apply_lc_scheme, binarize_delineation, clip_to_aoi, resample_nearest, subtract_cloud};
pub use rasterize::center_mask;
pub use vector::{read_vector, VectorLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodata sentinel used for binary masks and category maps.
pub const MASK_NODATA: f32 = 255.0;

/// Affine, north-up pixel-to-map transform.
///
/// `origin_y` is the top edge of the grid; map `y` decreases with the row
/// index, so both pixel sizes are stored positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    pub crs_id: String,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size_x: f64,
        pixel_size_y: f64,
        crs_id: impl Into<String>,
    ) -> Result<Self> {
        let t = GeoTransform {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            crs_id: crs_id.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_x > 0.0 && self.pixel_size_y > 0.0) {
            return Err(Error::InvalidRaster(format!(
                "pixel sizes must be positive, got ({}, {})",
                self.pixel_size_x, self.pixel_size_y
            )));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::InvalidRaster("non-finite origin".into()));
        }
        if self.crs_id.is_empty() {
            return Err(Error::InvalidRaster("empty CRS identifier".into()));
        }
        Ok(())
    }

    /// Map coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size_x,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size_y,
        )
    }

    /// Transform of a sub-window whose top-left pixel is `(row, col)`.
    pub fn offset(&self, row: usize, col: usize) -> GeoTransform {
        GeoTransform {
            origin_x: self.origin_x + col as f64 * self.pixel_size_x,
            origin_y: self.origin_y - row as f64 * self.pixel_size_y,
            ..self.clone()
        }
    }

    pub fn ensure_same_crs(&self, other: &str) -> Result<()> {
        if self.crs_id != other {
            return Err(Error::CrsMismatch {
                expected: self.crs_id.clone(),
                found: other.to_string(),
            });
        }
        Ok(())
    }
}

/// Transform plus pixel dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub transform: GeoTransform,
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    /// Map-space bounds as `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let t = &self.transform;
        (
            t.origin_x,
            t.origin_y - self.height as f64 * t.pixel_size_y,
            t.origin_x + self.width as f64 * t.pixel_size_x,
            t.origin_y,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RasterKind {
    Image,
    BinaryMask,
    CategoryMap,
    ProbabilityMap,
}

impl RasterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RasterKind::Image => "IMAGE",
            RasterKind::BinaryMask => "BINARY_MASK",
            RasterKind::CategoryMap => "CATEGORY_MAP",
            RasterKind::ProbabilityMap => "PROBABILITY_MAP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "IMAGE" => RasterKind::Image,
            "BINARY_MASK" => RasterKind::BinaryMask,
            "CATEGORY_MAP" => RasterKind::CategoryMap,
            "PROBABILITY_MAP" => RasterKind::ProbabilityMap,
            _ => return None,
        })
    }

    /// Sentinel used when an operation has to invent nodata pixels and the
    /// raster does not declare one.
    pub fn default_nodata(self) -> f32 {
        match self {
            RasterKind::BinaryMask | RasterKind::CategoryMap => MASK_NODATA,
            RasterKind::Image | RasterKind::ProbabilityMap => 0.0,
        }
    }

    pub fn default_sample_type(self) -> SampleType {
        match self {
            RasterKind::BinaryMask | RasterKind::CategoryMap => SampleType::U8,
            RasterKind::Image | RasterKind::ProbabilityMap => SampleType::F32,
        }
    }
}

/// Storage type used on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    U16,
    F32,
}

impl SampleType {
    fn holds(self, v: f32) -> bool {
        match self {
            SampleType::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            SampleType::U16 => v.fract() == 0.0 && (0.0..=65535.0).contains(&v),
            SampleType::F32 => true,
        }
    }
}

/// Georeferenced multi-band pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    bands: usize,
    values: Vec<f32>,
    nodata: Option<f32>,
    transform: GeoTransform,
    kind: RasterKind,
    sample_type: SampleType,
}

impl RasterGrid {
    /// Builds a raster and checks every invariant of `kind`.
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        values: Vec<f32>,
        transform: GeoTransform,
        kind: RasterKind,
    ) -> Result<Self> {
        let grid = RasterGrid {
            width,
            height,
            bands,
            values,
            nodata: None,
            transform,
            kind,
            sample_type: kind.default_sample_type(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Like [`RasterGrid::new`] with an explicit sample type and nodata
    /// sentinel, validated together.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        width: usize,
        height: usize,
        bands: usize,
        values: Vec<f32>,
        transform: GeoTransform,
        kind: RasterKind,
        sample_type: SampleType,
        nodata: Option<f32>,
    ) -> Result<Self> {
        RasterGrid {
            width,
            height,
            bands,
            values,
            nodata,
            transform,
            kind,
            sample_type,
        }
        .checked()
    }

    pub fn filled(geometry: &GridGeometry, bands: usize, value: f32, kind: RasterKind) -> Result<Self> {
        RasterGrid::new(
            geometry.width,
            geometry.height,
            bands,
            vec![value; bands * geometry.width * geometry.height],
            geometry.transform.clone(),
            kind,
        )
    }

    pub fn with_nodata(mut self, nodata: Option<f32>) -> Result<Self> {
        self.nodata = nodata;
        self.validate()?;
        Ok(self)
    }

    pub fn with_sample_type(mut self, sample_type: SampleType) -> Result<Self> {
        self.sample_type = sample_type;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(Error::InvalidRaster(format!(
                "empty raster {}x{}x{}",
                self.bands, self.height, self.width
            )));
        }
        let expected = self.bands * self.height * self.width;
        if self.values.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "expected {expected} values, found {}",
                self.values.len()
            )));
        }
        if let Some(nd) = self.nodata {
            if !self.sample_type.holds(nd) {
                return Err(Error::InvalidRaster(format!(
                    "nodata {nd} not representable as {:?}",
                    self.sample_type
                )));
            }
        }
        let nodata = self.nodata;
        let is_nodata = |v: f32| nodata.is_some_and(|nd| v == nd || (v.is_nan() && nd.is_nan()));
        for &v in &self.values {
            if is_nodata(v) {
                continue;
            }
            let ok = match self.kind {
                RasterKind::Image => true,
                RasterKind::BinaryMask => v == 0.0 || v == 1.0,
                RasterKind::ProbabilityMap => (0.0..=1.0).contains(&v),
                RasterKind::CategoryMap => v >= 0.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::InvalidRaster(format!(
                    "value {v} invalid for {}",
                    self.kind.as_str()
                )));
            }
            if !self.sample_type.holds(v) {
                return Err(Error::InvalidRaster(format!(
                    "value {v} not representable as {:?}",
                    self.sample_type
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn kind(&self) -> RasterKind {
        self.kind
    }

    pub fn sample_type(&self) -> SampleType {
        self.sample_type
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            transform: self.transform.clone(),
            width: self.width,
            height: self.height,
        }
    }

    /// Values of one band, row-major.
    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[band * n..(band + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        self.nodata.is_some_and(|nd| v == nd)
    }

    /// Nodata sentinel, falling back to the kind's default.
    pub fn nodata_or_default(&self) -> f32 {
        self.nodata.unwrap_or(self.kind.default_nodata())
    }

    pub(crate) fn same_grid(&self, other: &RasterGrid) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.transform != other.transform {
            return Err(Error::GridMismatch(format!(
                "{}x{} {:?} vs {}x{} {:?}",
                self.width, self.height, self.transform, other.width, other.height, other.transform
            )));
        }
        Ok(())
    }

    /// Copies the window `[row, row+height) x [col, col+width)`; cells
    /// outside the source are filled with `pad`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize, pad: f32) -> Result<RasterGrid> {
        let mut values = vec![pad; self.bands * height * width];
        for b in 0..self.bands {
            for r in 0..height.min(self.height.saturating_sub(row)) {
                let src = (b * self.height + row + r) * self.width + col;
                let n = width.min(self.width.saturating_sub(col));
                let dst = (b * height + r) * width;
                values[dst..dst + n].copy_from_slice(&self.values[src..src + n]);
            }
        }
        let padded = row + height > self.height || col + width > self.width;
        let nodata = match (self.nodata, padded) {
            (Some(nd), _) => Some(nd),
            (None, true) if self.is_padding_sentinel(pad) => Some(pad),
            _ => None,
        };
        RasterGrid {
            width,
            height,
            bands: self.bands,
            values,
            nodata,
            transform: self.transform.offset(row, col),
            kind: self.kind,
            sample_type: self.sample_type,
        }
        .checked()
    }

    fn is_padding_sentinel(&self, pad: f32) -> bool {
        match self.kind {
            RasterKind::BinaryMask => pad != 0.0 && pad != 1.0,
            RasterKind::ProbabilityMap => !(0.0..=1.0).contains(&pad),
            RasterKind::CategoryMap => pad < 0.0 || pad.fract() != 0.0 || pad == MASK_NODATA,
            RasterKind::Image => false,
        }
    }

    fn checked(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

/// Mapping from WorldCover land-cover codes to contiguous class indices,
/// with clouds appended as the last class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandCoverScheme {
    codes: Vec<u32>,
}

impl LandCoverScheme {
    /// The 11 ESA WorldCover classes followed by a cloud class.
    pub fn worldcover() -> Self {
        LandCoverScheme {
            codes: vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 95, 100],
        }
    }

    pub fn from_codes(codes: Vec<u32>) -> Result<Self> {
        let mut sorted = codes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != codes.len() || codes.is_empty() {
            return Err(Error::BadConfig("land-cover codes must be non-empty and unique".into()));
        }
        Ok(LandCoverScheme { codes })
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn index_of(&self, code: u32) -> Option<usize> {
        self.codes.iter().position(|&c| c == code)
    }

    pub fn cloud_index(&self) -> usize {
        self.codes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.codes.len() + 1
    }
}

impl Default for LandCoverScheme {
    fn default() -> Self {
        Self::worldcover()
    }
}
