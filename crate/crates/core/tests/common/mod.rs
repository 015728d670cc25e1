#![allow(dead_code)]

use probcodec::model::{Model, ModelConfig};
use probcodec::pyramid::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fresh model whose every parameter, zero-initialised layers included,
/// is perturbed by uniform noise of half-width `spread`.
pub fn randomized_model(levels: usize, seed: u64, spread: f64) -> Model {
    let mut m = Model::new(ModelConfig { levels, ..ModelConfig::default() }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for p in m.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    m
}

pub fn random_plane(w: usize, h: usize, amplitude: f64, seed: u64) -> Plane<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_vec(w, h, (0..w * h).map(|_| rng.random_range(-amplitude..amplitude)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `ln |det a|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        if pivot == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / pivot;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of `f` at `x`, one row per output.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Vec<Vec<f64>> {
    let n_out = f(x).len();
    let mut j = vec![vec![0.0; x.len()]; n_out];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] + step;
        let up = f(&work);
        work[i] = x[i] - step;
        let down = f(&work);
        work[i] = x[i];
        for o in 0..n_out {
            j[o][i] = (up[o] - down[o]) / (2.0 * step);
        }
    }
    j
}
