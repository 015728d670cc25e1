//! Rounding to the coder alphabet and the additive-noise training surrogate.

use rand::Rng;

use crate::pyramid::{QuantizedPyramid, SubbandPyramid};
use crate::Error;

/// Smallest representable coefficient.
pub const ALPHABET_MIN: i32 = -(1 << 15);
/// One past the largest representable coefficient.
pub const ALPHABET_END: i32 = 1 << 15;

/// Round half away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

pub fn quantize_hard(y: &SubbandPyramid) -> Result<QuantizedPyramid, Error> {
    let mut out = QuantizedPyramid::zeros(y.width, y.height, y.levels)?;
    for (bi, (src, dst)) in y.bands.iter().zip(out.bands.iter_mut()).enumerate() {
        for (d, &v) in dst.data.iter_mut().zip(&src.data) {
            let r = round_half_away(v);
            if !r.is_finite() || r < ALPHABET_MIN as f64 || r >= ALPHABET_END as f64 {
                return Err(Error::RangeOverflow { band: bi, value: v });
            }
            *d = r as i32;
        }
    }
    Ok(out)
}

/// Uniform noise in `[-0.5, 0.5)` to add to each coefficient during training.
///
/// The noise is returned separately so the caller can add it as a constant:
/// the gradient then passes through unchanged.
pub fn uniform_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

pub fn quantize_soft<R: Rng>(y: &SubbandPyramid, rng: &mut R) -> SubbandPyramid {
    let mut out = y.clone();
    for b in &mut out.bands {
        let noise = uniform_noise(b.len(), rng);
        for (v, u) in b.data.iter_mut().zip(noise) {
            *v += u;
        }
    }
    out
}
