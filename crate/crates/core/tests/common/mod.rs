#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarseg_core::training::{Dataset, Sample};

/// 4-band patches with a bright disc marking the burned class, plus a
/// two-class land-cover plane (left/right halves).
pub fn disc_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let samples = (0..n)
        .map(|_| {
            let cr = rng.random_range(size as f64 * 0.25..size as f64 * 0.75);
            let cc = rng.random_range(size as f64 * 0.25..size as f64 * 0.75);
            let rad = rng.random_range(size as f64 * 0.12..size as f64 * 0.3);
            let mut image = vec![0f32; 4 * plane];
            let mut ba = vec![0f32; plane];
            let mut lc = vec![0f32; plane];
            for r in 0..size {
                for c in 0..size {
                    let i = r * size + c;
                    let d = ((r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2)).sqrt();
                    let inside = d <= rad;
                    ba[i] = inside as u8 as f32;
                    lc[i] = if c < size / 2 { 0.0 } else { 1.0 };
                    for b in 0..4 {
                        let base = if inside { 0.8 } else { 0.2 };
                        image[b * plane + i] = base + rng.random_range(-0.1..0.1);
                    }
                }
            }
            Sample {
                image,
                channels: 4,
                height: size,
                width: size,
                ba,
                lc: Some(lc),
            }
        })
        .collect();
    Dataset::new(samples)
}
