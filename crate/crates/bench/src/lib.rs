//! Seeded fixtures shared by the benchmarks.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarseg_core::{GeoTransform, RasterGrid, RasterKind};

/// Uniform random image raster with `bands` bands.
pub fn random_raster(width: usize, height: usize, bands: usize, seed: u64) -> RasterGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..width * height * bands).map(|_| rng.random::<f32>()).collect();
    let t = GeoTransform::new(500_000.0, 4_200_000.0, 1.5, 1.5, "EPSG:32634").expect("valid transform");
    RasterGrid::new(width, height, bands, values, t, RasterKind::Image).expect("valid raster")
}

/// Random 4-band C×H×W patch.
pub fn random_patch(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..4 * size * size).map(|_| rng.random()).collect();
    Tensor::from_vec(v, (4, size, size), &Device::Cpu).expect("valid shape")
}

/// Random binary mask values with the given burned share.
pub fn random_mask(len: usize, burned: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_bool(burned) as u8 as f32).collect()
}
