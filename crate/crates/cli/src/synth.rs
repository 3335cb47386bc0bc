//! Synthetic wildfire scenes with known burned-area, cloud and land-cover
//! layers, written in the same formats as real inputs.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use geo::{Coord, LineString, MultiPolygon, Polygon};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarseg_core::raster::{center_mask, write_raster, VectorLayer};
use scarseg_core::{GeoTransform, GridGeometry, RasterGrid, RasterKind, SampleType};
use serde::{Deserialize, Serialize};

use crate::config::EventConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    /// The last `holdout_scenes` scenes are reserved for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_scenes: usize,
    /// Scene side in image pixels.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_pixel_size")]
    pub pixel_size: f64,
    /// Land-cover pixel size; a multiple of `pixel_size`.
    #[serde(default = "default_lc_pixel_size")]
    pub lc_pixel_size: f64,
    #[serde(default = "default_crs")]
    pub crs: String,
    /// Accepted range of the burned share of AOI pixels.
    #[serde(default = "default_burned_fraction")]
    pub burned_fraction: [f64; 2],
    #[serde(default = "default_scars")]
    pub scars: [usize; 2],
    #[serde(default = "default_clouds")]
    pub clouds: [usize; 2],
    /// Half-width of the uniform per-band reflectance noise, in DN.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_scenes() -> usize {
    5
}

fn default_holdout() -> usize {
    1
}

fn default_size() -> usize {
    256
}

fn default_pixel_size() -> f64 {
    5.0
}

fn default_lc_pixel_size() -> f64 {
    10.0
}

fn default_crs() -> String {
    "EPSG:32634".into()
}

fn default_burned_fraction() -> [f64; 2] {
    [0.1, 0.35]
}

fn default_scars() -> [usize; 2] {
    [1, 3]
}

fn default_clouds() -> [usize; 2] {
    [0, 2]
}

fn default_noise() -> f64 {
    150.0
}

impl SynthConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        SynthConfig {
            out_dir: out_dir.into(),
            scenes: default_scenes(),
            holdout_scenes: default_holdout(),
            size: default_size(),
            pixel_size: default_pixel_size(),
            lc_pixel_size: default_lc_pixel_size(),
            crs: default_crs(),
            burned_fraction: default_burned_fraction(),
            scars: default_scars(),
            clouds: default_clouds(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(format!("synth: {m}")));
        if self.scenes == 0 || self.holdout_scenes >= self.scenes {
            return bad("need at least one training scene");
        }
        if self.size < 32 {
            return bad("size must be at least 32");
        }
        if !(self.pixel_size > 0.0 && self.lc_pixel_size >= self.pixel_size) {
            return bad("lc_pixel_size must be >= pixel_size > 0");
        }
        let ratio = self.lc_pixel_size / self.pixel_size;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("lc_pixel_size must be a multiple of pixel_size");
        }
        let [lo, hi] = self.burned_fraction;
        if !(0.0 < lo && lo < hi && hi < 0.8) {
            return bad("burned_fraction must satisfy 0 < lo < hi < 0.8");
        }
        if self.scars[0] == 0 || self.scars[0] > self.scars[1] || self.clouds[0] > self.clouds[1] {
            return bad("scars and clouds must be [min, max] with min <= max and at least one scar");
        }
        if !(self.noise >= 0.0 && self.noise < 1000.0) {
            return bad("noise must lie in [0, 1000)");
        }
        Ok(())
    }

    pub fn scene_name(index: usize) -> String {
        format!("scene_{index:02}")
    }

    /// Input layers of every scene this configuration produces.
    pub fn events(&self) -> Vec<EventConfig> {
        (0..self.scenes)
            .map(|i| {
                let name = Self::scene_name(i);
                let dir = self.out_dir.join(&name);
                EventConfig {
                    image: dir.join("image.tif"),
                    aoi: dir.join("aoi.geojson"),
                    delineation: dir.join("delineation.geojson"),
                    clouds: Some(dir.join("clouds.geojson")),
                    land_cover: Some(dir.join("land_cover.tif")),
                    holdout: i >= self.scenes - self.holdout_scenes,
                    name,
                }
            })
            .collect()
    }
}

/// Land-cover codes used by the generator and their B, G, R, NIR
/// reflectances in digital numbers (reflectance × 10⁴).
const LAND_COVER: [(u32, [f64; 4]); 6] = [
    (10, [300.0, 500.0, 300.0, 3000.0]),
    (20, [450.0, 700.0, 600.0, 2500.0]),
    (30, [500.0, 800.0, 700.0, 2800.0]),
    (40, [550.0, 850.0, 800.0, 3200.0]),
    (50, [1200.0, 1300.0, 1400.0, 1800.0]),
    (60, [1500.0, 1800.0, 2200.0, 2600.0]),
];
const BURNED: [f64; 4] = [250.0, 300.0, 350.0, 900.0];
const CLOUD: [f64; 4] = [6000.0, 6000.0, 6000.0, 6500.0];

/// Facts about one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub name: String,
    pub burned_fraction: f64,
    pub scars: usize,
    pub clouds: usize,
    pub attempts: usize,
}

fn ring(points: Vec<(f64, f64)>) -> Polygon<f64> {
    let mut coords: Vec<Coord<f64>> = points.into_iter().map(|(x, y)| Coord { x, y }).collect();
    coords.push(coords[0]);
    Polygon::new(LineString::new(coords), Vec::new())
}

/// Star-shaped polygon with a smooth random radius profile.
fn blob(rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64, wobble: f64, vertices: usize) -> Polygon<f64> {
    let harmonics: Vec<(f64, f64)> = (2..5)
        .map(|_| (rng.random_range(-wobble..=wobble), rng.random_range(0.0..TAU)))
        .collect();
    let points = (0..vertices)
        .map(|k| {
            let a = TAU * k as f64 / vertices as f64;
            let scale = 1.0
                + harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, (amp, phase))| amp * ((h as f64 + 2.0) * a + phase).sin())
                    .sum::<f64>();
            (cx + radius * scale * a.cos(), cy + radius * scale * a.sin())
        })
        .collect();
    ring(points)
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, angle: f64) -> Polygon<f64> {
    let points = (0..32)
        .map(|k| {
            let a = TAU * k as f64 / 32.0;
            let (x, y) = (rx * a.cos(), ry * a.sin());
            (
                cx + x * angle.cos() - y * angle.sin(),
                cy + x * angle.sin() + y * angle.cos(),
            )
        })
        .collect();
    ring(points)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Generates every scene under `cfg.out_dir`; the same seed gives
/// byte-identical files.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SceneSummary>> {
    cfg.validate()?;
    (0..cfg.scenes).map(|i| generate_scene(cfg, seed, i)).collect()
}

fn generate_scene(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SceneSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let name = SynthConfig::scene_name(index);
    let dir = cfg.out_dir.join(&name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let n = cfg.size;
    let extent = n as f64 * cfg.pixel_size;
    let origin_x = 500_000.0 + index as f64 * 2.0 * extent;
    let origin_y = 4_200_000.0;
    let transform = GeoTransform::new(origin_x, origin_y, cfg.pixel_size, cfg.pixel_size, cfg.crs.as_str())?;
    let geometry = GridGeometry {
        transform: transform.clone(),
        width: n,
        height: n,
    };
    let (cx, cy) = (origin_x + extent / 2.0, origin_y - extent / 2.0);

    // irregular octagon AOI
    let aoi_points = (0..8)
        .map(|k| {
            let a = TAU * k as f64 / 8.0 + rng.random_range(-0.15..0.15);
            let r = extent * rng.random_range(0.40..0.48);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    let aoi = MultiPolygon(vec![ring(aoi_points)]);
    let in_aoi = center_mask(&aoi, &geometry);
    let aoi_pixels = in_aoi.iter().filter(|&&b| b).count();

    // burn scars, redrawn until the burned share is in range
    let [lo, hi] = cfg.burned_fraction;
    let mut attempts = 0;
    let (scars, burned, fraction) = loop {
        attempts += 1;
        if attempts > 200 {
            return Err(CliError::Config(format!(
                "synth: could not reach burned_fraction {lo}..{hi} in {name}"
            )));
        }
        let count = rng.random_range(cfg.scars[0]..=cfg.scars[1]);
        let polys: Vec<Polygon<f64>> = (0..count)
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                let d = extent * rng.random_range(0.0..0.22);
                let r = extent * rng.random_range(0.08..0.2);
                blob(&mut rng, cx + d * a.cos(), cy + d * a.sin(), r, 0.18, 48)
            })
            .collect();
        let scars = MultiPolygon(polys);
        let burned = center_mask(&scars, &geometry);
        let hits = burned.iter().zip(&in_aoi).filter(|(b, a)| **b && **a).count();
        let fraction = hits as f64 / aoi_pixels.max(1) as f64;
        if (lo..=hi).contains(&fraction) {
            break (scars, burned, fraction);
        }
    };

    let cloud_count = rng.random_range(cfg.clouds[0]..=cfg.clouds[1]);
    let clouds = MultiPolygon(
        (0..cloud_count)
            .map(|_| {
                let x = cx + extent * rng.random_range(-0.4..0.4);
                let y = cy + extent * rng.random_range(-0.4..0.4);
                let rx = extent * rng.random_range(0.04..0.09);
                let ry = extent * rng.random_range(0.04..0.09);
                ellipse(x, y, rx, ry, rng.random_range(0.0..TAU))
            })
            .collect(),
    );
    let cloudy = center_mask(&clouds, &geometry);

    // Voronoi land cover on the coarse grid
    let m = (extent / cfg.lc_pixel_size).round() as usize;
    let seeds: Vec<(f64, f64, usize)> = (0..10)
        .map(|_| {
            (
                rng.random_range(0.0..m as f64),
                rng.random_range(0.0..m as f64),
                rng.random_range(0..LAND_COVER.len()),
            )
        })
        .collect();
    let lc_class: Vec<usize> = (0..m * m)
        .map(|i| {
            let (r, c) = ((i / m) as f64 + 0.5, (i % m) as f64 + 0.5);
            seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - r).powi(2) + (a.1 - c).powi(2);
                    let db = (b.0 - r).powi(2) + (b.1 - c).powi(2);
                    da.total_cmp(&db)
                })
                .map(|s| s.2)
                .expect("seeds are non-empty")
        })
        .collect();
    let lc_transform = GeoTransform::new(
        origin_x,
        origin_y,
        cfg.lc_pixel_size,
        cfg.lc_pixel_size,
        cfg.crs.as_str(),
    )?;
    let lc_values = lc_class.iter().map(|&k| LAND_COVER[k].0 as f32).collect();
    let land_cover = RasterGrid::new(m, m, 1, lc_values, lc_transform, RasterKind::CategoryMap)?;

    let ratio = (cfg.lc_pixel_size / cfg.pixel_size).round() as usize;
    let mut image = vec![0f32; 4 * n * n];
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let base = if cloudy[i] {
                CLOUD
            } else if burned[i] {
                BURNED
            } else {
                LAND_COVER[lc_class[(r / ratio) * m + c / ratio]].1
            };
            for (b, v) in base.iter().enumerate() {
                let noisy = v + rng.random_range(-cfg.noise..=cfg.noise);
                image[b * n * n + i] = noisy.round().clamp(1.0, 65535.0) as f32;
            }
        }
    }
    let image = RasterGrid::new(n, n, 4, image, transform, RasterKind::Image)?.with_sample_type(SampleType::U16)?;

    write_raster(&image, &dir.join("image.tif"))?;
    write_raster(&land_cover, &dir.join("land_cover.tif"))?;
    write_text(
        &dir.join("aoi.geojson"),
        &VectorLayer::new(cfg.crs.as_str(), aoi).to_geojson_string(),
    )?;
    write_text(
        &dir.join("delineation.geojson"),
        &VectorLayer::new(cfg.crs.as_str(), scars.clone()).to_geojson_string(),
    )?;
    write_text(
        &dir.join("clouds.geojson"),
        &VectorLayer::new(cfg.crs.as_str(), clouds).to_geojson_string(),
    )?;
    Ok(SceneSummary {
        name,
        burned_fraction: fraction,
        scars: scars.0.len(),
        clouds: cloud_count,
        attempts,
    })
}
