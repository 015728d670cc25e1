//! Temperature-scaled draws from the posterior field.
//!
//! Normal variates come from a counter-based generator: the value for a
//! coefficient depends only on the seed, the stream and the coefficient's
//! index, never on the order in which coefficients are visited.

use crate::posterior::GaussianField;
use crate::pyramid::SubbandPyramid;
use crate::Error;

/// Variance-scale sweep used for diversity reports.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub alpha: f64,
    pub seed: u64,
    pub count: usize,
}

impl SampleSpec {
    pub fn new(alpha: f64, seed: u64, count: usize) -> Result<Self, Error> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(Self { alpha, seed, count })
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 pseudo-random bits for `(seed, stream, counter)`.
pub fn counter_bits(seed: u64, stream: u64, counter: u64) -> u64 {
    let k = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = mix64(k ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93));
    mix64(k ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Uniform in the open interval `(0, 1)`.
fn unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal variate for `(seed, stream, index)` by Box-Muller.
pub fn gaussian(seed: u64, stream: u64, index: u64) -> f64 {
    let u1 = unit(counter_bits(seed, stream, 2 * index));
    let u2 = unit(counter_bits(seed, stream, 2 * index + 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `mu + alpha * s * eps` for every coefficient. `stream` separates image
/// channels drawn with the same seed.
pub fn sample_coefficients(field: &GaussianField, alpha: f64, seed: u64, stream: u64) -> SubbandPyramid {
    let mut out = field.mean.clone();
    if alpha == 0.0 {
        return out;
    }
    let mut index = 0u64;
    for (ob, sb) in out.bands.iter_mut().zip(&field.scale.bands) {
        for (v, &s) in ob.data.iter_mut().zip(&sb.data) {
            *v += alpha * s * gaussian(seed, stream, index);
            index += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variates_are_standard_normal() {
        let n = 200_000;
        let (mut m, mut v) = (0.0, 0.0);
        for i in 0..n {
            let x = gaussian(7, 0, i);
            m += x;
            v += x * x;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 0.01, "{m}");
        assert!((v - 1.0).abs() < 0.01, "{v}");
        assert_ne!(gaussian(7, 0, 3), gaussian(8, 0, 3));
        assert_ne!(gaussian(7, 0, 3), gaussian(7, 1, 3));
        assert_eq!(gaussian(7, 2, 3).to_bits(), gaussian(7, 2, 3).to_bits());
    }

    #[test]
    fn negative_alpha_is_rejected() {
        assert!(SampleSpec::new(-0.1, 0, 1).is_err());
        assert!(SampleSpec::new(f64::NAN, 0, 1).is_err());
        assert!(SampleSpec::new(0.7, 0, 1).is_ok());
    }
}
