//! Factorised Gaussian field over coefficients given the rounded pyramid.
//!
//! Each band has its own convolutional head reading the rounded band and,
//! for detail bands, the approximation band at the same level. The mean is
//! the rounded value plus a residual bounded by half a step, so the mode
//! stays inside the cell that rounds back to the decoded value.

use std::sync::Arc;

use rand::Rng;

use crate::nn::{ConvStack, CustomOp, Graph, NnError, ParamId, ParamStore, Tensor};
use crate::pyramid::{band_count, Plane, SubbandPyramid};

pub const SCALE_MIN: f64 = 1e-3;
pub const INPUT_GAIN: f64 = 1.0 / 32.0;
pub const POSTERIOR_PREFIX: &str = "post";
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-coefficient means and scales, in pyramid layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub mean: SubbandPyramid,
    pub scale: SubbandPyramid,
}

impl GaussianField {
    pub fn mean_scale(&self) -> f64 {
        let n = self.scale.coefficient_count().max(1);
        self.scale.iter().sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorHeads {
    heads: Vec<ConvStack>,
}

impl PosteriorHeads {
    pub fn build<R: Rng>(store: &mut ParamStore, levels: usize, width: usize, rng: &mut R) -> Result<Self, NnError> {
        let heads = (0..band_count(levels))
            .map(|b| {
                ConvStack::build(store, &format!("{POSTERIOR_PREFIX}.{b}"), &[2, width, width, 2], 3, true, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { heads })
    }

    pub fn lookup(store: &ParamStore, levels: usize) -> Result<Self, NnError> {
        let heads = (0..band_count(levels))
            .map(|b| ConvStack::lookup(store, &format!("{POSTERIOR_PREFIX}.{b}"), 3))
            .collect::<Result<_, _>>()?;
        Ok(Self { heads })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.layers().iter().flat_map(|l| [l.weight, l.bias])).collect()
    }

    /// Raw `2 x H x W` head output for one band (`[mean residual, scale]`
    /// before their squashing). `reference` is `None` for the coarsest
    /// approximation band, which sees a zero plane instead.
    pub fn raw<G: Graph>(
        &self,
        g: &mut G,
        band_index: usize,
        band: &G::Value,
        reference: Option<&G::Value>,
    ) -> Result<G::Value, NnError> {
        let shape = g.value(band).shape().to_vec();
        let n = g.value(band).len();
        let (h, w) = match shape[..] {
            [1, h, w] => (h, w),
            _ => return Err(NnError::Shape(format!("band must be 1 x H x W, got {shape:?}"))),
        };
        let zero;
        let r = match reference {
            Some(r) => r,
            None => {
                zero = g.constant(Tensor::zeros(&shape));
                &zero
            }
        };
        let input = g.concat(&[band, r], &[2, h, w])?;
        let input = g.scale(&input, INPUT_GAIN);
        let out = self.heads[band_index].forward(g, &input)?;
        debug_assert_eq!(g.value(&out).len(), 2 * n);
        Ok(out)
    }
}

/// Mean, scale and the derivative factors of the squashing maps.
fn squash(yhat: f64, raw_mean: f64, raw_scale: f64) -> (f64, f64) {
    (yhat + 0.5 * raw_mean.tanh(), crate::nn::kernels::softplus(raw_scale) + SCALE_MIN)
}

/// Turns a raw head output into mean and scale planes.
pub fn field_planes(yhat: &Plane<f64>, raw: &Tensor) -> (Plane<f64>, Plane<f64>) {
    let n = yhat.len();
    let d = raw.data();
    let mut mean = Plane::new(yhat.width, yhat.height);
    let mut scale = Plane::new(yhat.width, yhat.height);
    for i in 0..n {
        let (m, s) = squash(yhat.data[i], d[i], d[n + i]);
        mean.data[i] = m;
        scale.data[i] = s;
    }
    (mean, scale)
}

/// `-sum_i ln N(y_i | mu_i, s_i)` with `mu = yhat + tanh(raw_0) / 2` and
/// `s = softplus(raw_1) + s_min`.
///
/// Inputs: targets `y` (`N`), rounded or noisy values `yhat` (`N`) and the
/// raw head output (`2N`). Output: scalar.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNll;

fn check<'a>(inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor, &'a Tensor), NnError> {
    match inputs {
        [y, yh, raw] if y.len() == yh.len() && raw.len() == 2 * y.len() => Ok((y, yh, raw)),
        _ => Err(NnError::Shape("gaussian nll expects y, yhat and a 2N raw output".into())),
    }
}

impl CustomOp for GaussianNll {
    fn name(&self) -> &'static str {
        "gaussian_nll"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NnError> {
        let (y, yh, raw) = check(inputs)?;
        let n = y.len();
        let (yd, hd, rd) = (y.data(), yh.data(), raw.data());
        let mut total = 0.0;
        for i in 0..n {
            let (m, s) = squash(hd[i], rd[i], rd[n + i]);
            let z = (yd[i] - m) / s;
            total += 0.5 * z * z + s.ln() + LN_SQRT_2PI;
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, d_out: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let (y, yh, raw) = check(inputs)?;
        let g = d_out.item();
        let n = y.len();
        let (yd, hd, rd) = (y.data(), yh.data(), raw.data());
        let mut dy = Tensor::zeros(y.shape());
        let mut dh = Tensor::zeros(yh.shape());
        let mut dr = Tensor::zeros(raw.shape());
        for i in 0..n {
            let (m, s) = squash(hd[i], rd[i], rd[n + i]);
            let z = (yd[i] - m) / s;
            // d/dy = z/s, d/dmu = -z/s, d/ds = (1 - z^2)/s
            let d_mu = -z / s;
            let t = rd[i].tanh();
            dy.data_mut()[i] = g * z / s;
            dh.data_mut()[i] = g * d_mu;
            dr.data_mut()[i] = g * d_mu * 0.5 * (1.0 - t * t);
            dr.data_mut()[n + i] = g * (1.0 - z * z) / s * crate::nn::kernels::sigmoid(rd[n + i]);
        }
        Ok(vec![dy, dh, dr])
    }
}

/// Graph form of the posterior negative log-likelihood for one band.
pub fn band_nll<G: Graph>(g: &mut G, y: &G::Value, yhat: &G::Value, raw: &G::Value) -> Result<G::Value, NnError> {
    g.custom(Arc::new(GaussianNll), &[y, yhat, raw])
}

/// `sum_i ln N(y_i | mu_i, s_i)` over a whole pyramid.
pub fn posterior_log_likelihood(y: &SubbandPyramid, field: &GaussianField) -> Result<f64, crate::Error> {
    if y.bands.len() != field.mean.bands.len() {
        return Err(crate::Error::Shape("pyramid and field differ in band count".into()));
    }
    let mut total = 0.0;
    for ((yb, mb), sb) in y.bands.iter().zip(&field.mean.bands).zip(&field.scale.bands) {
        if yb.len() != mb.len() || yb.len() != sb.len() {
            return Err(crate::Error::Shape("pyramid and field differ in band size".into()));
        }
        for ((&v, &m), &s) in yb.data.iter().zip(&mb.data).zip(&sb.data) {
            let z = (v - m) / s;
            total -= 0.5 * z * z + s.ln() + LN_SQRT_2PI;
        }
    }
    Ok(total)
}
