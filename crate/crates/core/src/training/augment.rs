use rand::Rng;

use crate::error::{Error, Result};
use crate::tta::D4;

/// One training example: a C×H×W image with aligned label planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// H×W burned-area labels (0/1, 255 = nodata).
    pub ba: Vec<f32>,
    /// H×W land-cover class indices (255 = nodata).
    pub lc: Option<Vec<f32>>,
}

impl Sample {
    pub fn transformed(&self, t: D4) -> Result<Sample> {
        if t.swaps_axes() && self.height != self.width {
            return Err(Error::NonSquare {
                height: self.height,
                width: self.width,
            });
        }
        let (h, w) = (self.height, self.width);
        let (oh, ow) = t.output_dims(h, w);
        Ok(Sample {
            image: t.apply(&self.image, self.channels, h, w),
            channels: self.channels,
            height: oh,
            width: ow,
            ba: t.apply(&self.ba, 1, h, w),
            lc: self.lc.as_ref().map(|lc| t.apply(lc, 1, h, w)),
        })
    }
}

/// Which of the three random flips/rotation fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl AugmentDraw {
    /// Three independent Bernoulli(p) draws, always consuming three numbers.
    pub fn sample<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Self {
        let mut coin = || rng.random::<f64>() < p;
        let hflip = coin();
        let vflip = coin();
        let rot90 = coin();
        AugmentDraw { hflip, vflip, rot90 }
    }
}

/// Applies horizontal flip, vertical flip and a 90° rotation, each with
/// probability `p`, identically to the image and both label planes.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, p: f64, rng: &mut R) -> Result<Sample> {
    let draw = AugmentDraw::sample(p, rng);
    apply_draw(sample, draw)
}

pub fn apply_draw(sample: &Sample, draw: AugmentDraw) -> Result<Sample> {
    let mut out = sample.clone();
    if draw.hflip {
        out = out.transformed(D4::HFlip)?;
    }
    if draw.vflip {
        out = out.transformed(D4::VFlip)?;
    }
    if draw.rot90 {
        out = out.transformed(D4::Rot90)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> Sample {
        let n = h * w;
        Sample {
            image: (0..2 * n).map(|i| i as f32).collect(),
            channels: 2,
            height: h,
            width: w,
            ba: (0..n).map(|i| (i % 2) as f32).collect(),
            lc: Some((0..n).map(|i| (i % 5) as f32).collect()),
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = sample(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(augment(&s, 0.0, &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let s = sample(4, 4);
        let d = AugmentDraw {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(apply_draw(&apply_draw(&s, d).unwrap(), d).unwrap(), s);
    }

    #[test]
    fn marker_stays_aligned() {
        let n = 6;
        let mut s = Sample {
            image: vec![0.0; 3 * n * n],
            channels: 3,
            height: n,
            width: n,
            ba: vec![0.0; n * n],
            lc: Some(vec![0.0; n * n]),
        };
        let (r, c) = (1, 4);
        for ch in 0..3 {
            s.image[ch * n * n + r * n + c] = 9.0;
        }
        s.ba[r * n + c] = 1.0;
        s.lc.as_mut().unwrap()[r * n + c] = 7.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..16 {
            let a = augment(&s, 0.5, &mut rng).unwrap();
            let pos = a.ba.iter().position(|&v| v == 1.0).unwrap();
            for ch in 0..3 {
                assert_eq!(a.image[ch * n * n + pos], 9.0);
            }
            assert_eq!(a.lc.as_ref().unwrap()[pos], 7.0);
        }
    }

    #[test]
    fn rotation_needs_square() {
        let s = sample(4, 6);
        let d = AugmentDraw {
            rot90: true,
            ..Default::default()
        };
        assert_eq!(apply_draw(&s, d).unwrap_err().category(), "NON_SQUARE");
        let d = AugmentDraw {
            hflip: true,
            vflip: true,
            rot90: false,
        };
        assert!(apply_draw(&s, d).is_ok());
    }
}
