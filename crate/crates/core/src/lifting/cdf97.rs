//! Plain-loop CDF 9/7 lifting, kept separate from the graph code so it can
//! serve as a reference.

use crate::pyramid::{check_dyadic, Plane, SubbandPyramid};
use crate::Error;

pub const ALPHA: f64 = -1.586_134_342_059_924;
pub const BETA: f64 = -0.052_980_118_572_961;
pub const GAMMA: f64 = 0.882_911_075_530_934;
pub const DELTA: f64 = 0.443_506_852_043_971;
pub const ZETA: f64 = 1.230_174_104_914_001;

/// Predict coefficients of the two lifting steps.
pub const PREDICT: [f64; 2] = [ALPHA, GAMMA];
/// Update coefficients of the two lifting steps.
pub const UPDATE: [f64; 2] = [BETA, DELTA];

fn predict(lo: &[f64], hi: &mut [f64], c: f64) {
    let n = lo.len();
    for i in 0..n {
        let next = lo[(i + 1).min(n - 1)];
        hi[i] += c * (lo[i] + next);
    }
}

fn update(lo: &mut [f64], hi: &[f64], c: f64) {
    for i in 0..lo.len() {
        let prev = hi[i.saturating_sub(1)];
        lo[i] += c * (prev + hi[i]);
    }
}

/// One-dimensional analysis of an even-length signal into `(low, high)`.
pub fn analyze(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo: Vec<f64> = x.iter().step_by(2).copied().collect();
    let mut hi: Vec<f64> = x.iter().skip(1).step_by(2).copied().collect();
    for s in 0..2 {
        predict(&lo, &mut hi, PREDICT[s]);
        update(&mut lo, &hi, UPDATE[s]);
    }
    lo.iter_mut().for_each(|v| *v /= ZETA);
    hi.iter_mut().for_each(|v| *v *= ZETA);
    (lo, hi)
}

pub fn synthesize(lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let mut lo: Vec<f64> = lo.iter().map(|v| v * ZETA).collect();
    let mut hi: Vec<f64> = hi.iter().map(|v| v / ZETA).collect();
    for s in (0..2).rev() {
        let c = UPDATE[s];
        for i in 0..lo.len() {
            lo[i] -= c * (hi[i.saturating_sub(1)] + hi[i]);
        }
        let c = PREDICT[s];
        let n = lo.len();
        for i in 0..n {
            hi[i] -= c * (lo[i] + lo[(i + 1).min(n - 1)]);
        }
    }
    let mut x = Vec::with_capacity(2 * lo.len());
    for (l, h) in lo.iter().zip(&hi) {
        x.push(*l);
        x.push(*h);
    }
    x
}

fn column(p: &Plane<f64>, x: usize) -> Vec<f64> {
    (0..p.height).map(|y| p.get(x, y)).collect()
}

fn row(p: &Plane<f64>, y: usize) -> Vec<f64> {
    p.data[y * p.width..(y + 1) * p.width].to_vec()
}

/// One level: vertical analysis, then horizontal analysis of each half.
/// Returns `(LL, HL, LH, HH)`.
pub fn analyze_level(x: &Plane<f64>) -> [Plane<f64>; 4] {
    let (w, h) = (x.width, x.height);
    let mut lo = Plane::new(w, h / 2);
    let mut hi = Plane::new(w, h / 2);
    for cx in 0..w {
        let (l, hh) = analyze(&column(x, cx));
        for y in 0..h / 2 {
            lo.set(cx, y, l[y]);
            hi.set(cx, y, hh[y]);
        }
    }
    let split = |p: &Plane<f64>| {
        let mut a = Plane::new(w / 2, h / 2);
        let mut b = Plane::new(w / 2, h / 2);
        for y in 0..h / 2 {
            let (l, hh) = analyze(&row(p, y));
            a.data[y * (w / 2)..(y + 1) * (w / 2)].copy_from_slice(&l);
            b.data[y * (w / 2)..(y + 1) * (w / 2)].copy_from_slice(&hh);
        }
        (a, b)
    };
    let (ll, hl) = split(&lo);
    let (lh, hh) = split(&hi);
    [ll, hl, lh, hh]
}

pub fn synthesize_level(ll: &Plane<f64>, hl: &Plane<f64>, lh: &Plane<f64>, hh: &Plane<f64>) -> Plane<f64> {
    let (w2, h2) = (ll.width, ll.height);
    let merge = |a: &Plane<f64>, b: &Plane<f64>| {
        let mut p = Plane::new(2 * w2, h2);
        for y in 0..h2 {
            let r = synthesize(&row(a, y), &row(b, y));
            p.data[y * 2 * w2..(y + 1) * 2 * w2].copy_from_slice(&r);
        }
        p
    };
    let lo = merge(ll, hl);
    let hi = merge(lh, hh);
    let mut x = Plane::new(2 * w2, 2 * h2);
    for cx in 0..2 * w2 {
        let c = synthesize(&column(&lo, cx), &column(&hi, cx));
        for (y, v) in c.into_iter().enumerate() {
            x.set(cx, y, v);
        }
    }
    x
}

pub fn cdf97_forward(x: &Plane<f64>, levels: usize) -> Result<SubbandPyramid, Error> {
    check_dyadic(x.width, x.height, levels)?;
    let mut details = Vec::new();
    let mut ll = x.clone();
    for _ in 0..levels {
        let [a, hl, lh, hh] = analyze_level(&ll);
        details.push([hl, lh, hh]);
        ll = a;
    }
    let mut bands = vec![ll];
    for d in details.into_iter().rev() {
        bands.extend(d);
    }
    Ok(SubbandPyramid { width: x.width, height: x.height, levels, bands })
}

pub fn cdf97_inverse(p: &SubbandPyramid) -> Result<Plane<f64>, Error> {
    p.validate()?;
    let mut ll = p.bands[0].clone();
    for k in 0..p.levels {
        let b = &p.bands[1 + 3 * k..4 + 3 * k];
        ll = synthesize_level(&ll, &b[0], &b[1], &b[2]);
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_give_unit_dc_gain_and_vanishing_detail() {
        let (lo, hi) = analyze(&[3.0; 16]);
        assert!(lo.iter().all(|v| (v - 3.0).abs() < 1e-8));
        assert!(hi.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn linear_ramps_leave_no_interior_detail() {
        // two vanishing moments: the high band of a ramp is zero away from
        // the borders, where the symmetric extension breaks linearity
        let x: Vec<f64> = (0..32).map(|i| 0.75 * i as f64 - 4.0).collect();
        let (_, hi) = analyze(&x);
        for (i, v) in hi.iter().enumerate().take(hi.len() - 3).skip(2) {
            assert!(v.abs() < 1e-8, "{i}: {v}");
        }
    }

    #[test]
    fn one_dimensional_round_trip() {
        let x: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64).sin() * 50.0).collect();
        let (lo, hi) = analyze(&x);
        let y = synthesize(&lo, &hi);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_dimensional_round_trip_and_constant_image() {
        let data: Vec<f64> = (0..32 * 16).map(|i| ((i * 7919 % 256) as f64) - 128.0).collect();
        let x = Plane::from_vec(32, 16, data).unwrap();
        let p = cdf97_forward(&x, 3).unwrap();
        let y = cdf97_inverse(&p).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-9);
        }
        let c = Plane::from_vec(16, 16, vec![42.0; 256]).unwrap();
        let p = cdf97_forward(&c, 4).unwrap();
        for b in &p.bands[1..] {
            assert!(b.data.iter().all(|v| v.abs() < 1e-9));
        }
    }
}
