//! Autoregressive three-component Gaussian mixture over rounded coefficients.
//!
//! Each coefficient is predicted from its causal neighbours in the same
//! band and, for detail bands, from a window of the approximation band at
//! the same level. The window is `s x s` with `s = CONTEXT_SIZE`.

use std::collections::HashMap;
use std::f64::consts::{LN_2, SQRT_2};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::nn::{CustomOp, Graph, IndexMap, Mlp, NnError, ParamId, ParamStore, Tensor, ZERO_INDEX};
use crate::pyramid::{band_kind, BandKind, Plane, SubbandPyramid};
use crate::quant::{ALPHABET_END, ALPHABET_MIN};
use crate::rangecoder::{quantize_cdf, CodedCdf};
use crate::Error;

pub const CONTEXT_SIZE: usize = 5;
pub const COMPONENTS: usize = 3;
pub const RAW_OUTPUTS: usize = 3 * COMPONENTS;
pub const SCALE_MIN: f64 = 1e-3;
/// Probability floor applied before coding.
pub const PROB_MIN: f64 = 1.0 / 65536.0;
/// Gain on context inputs.
pub const INPUT_GAIN: f64 = 1.0 / 32.0;
/// Gains on the raw network outputs. They leave the initial state
/// (`mu = 0`, `s = softplus(0) + s_min`) unchanged.
pub const MEAN_GAIN: f64 = 32.0;
pub const SCALE_GAIN: f64 = 4.0;
/// Coded symbols per coefficient are limited to this many before escaping.
pub const MAX_WINDOW: usize = 4096;
const WINDOW_SIGMAS: f64 = 5.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn ndtr(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `ln Phi(z)`, accurate far into both tails.
pub fn log_ndtr(z: f64) -> f64 {
    if z > 3.0 {
        (-0.5 * libm::erfc(z / SQRT_2)).ln_1p()
    } else if z > -30.0 {
        (0.5 * libm::erfc(-z / SQRT_2)).ln()
    } else {
        // asymptotic series of the Mills ratio
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `ln(Phi(b) - Phi(a))` for `a < b`.
pub fn log_ndtr_diff(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        let (la, lb) = (log_ndtr(a), log_ndtr(b));
        lb + (-(la - lb).exp_m1()).ln()
    } else if a >= 0.0 {
        let (l1, l2) = (log_ndtr(-a), log_ndtr(-b));
        l1 + (-(l2 - l1).exp_m1()).ln()
    } else {
        (-(ndtr(a) + ndtr(-b))).ln_1p()
    }
}

fn log_phi(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

fn softplus(v: f64) -> f64 {
    crate::nn::kernels::softplus(v)
}

/// Mixture parameters for one coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: [f64; COMPONENTS],
    pub means: [f64; COMPONENTS],
    pub scales: [f64; COMPONENTS],
}

impl MixtureParams {
    /// Maps raw outputs `[w0..w2, m0..m2, s0..s2]` to mixture parameters.
    pub fn from_raw(raw: &[f64]) -> Self {
        debug_assert_eq!(raw.len(), RAW_OUTPUTS);
        let mx = raw[..3].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = [(raw[0] - mx).exp(), (raw[1] - mx).exp(), (raw[2] - mx).exp()];
        let z = e[0] + e[1] + e[2];
        let mut m = Self { weights: [0.0; 3], means: [0.0; 3], scales: [0.0; 3] };
        for n in 0..COMPONENTS {
            m.weights[n] = e[n] / z;
            m.means[n] = MEAN_GAIN * raw[3 + n];
            m.scales[n] = softplus(SCALE_GAIN * raw[6 + n]) + SCALE_MIN;
        }
        m
    }

    pub fn single(mean: f64, scale: f64) -> Self {
        Self { weights: [1.0, 0.0, 0.0], means: [mean; 3], scales: [scale; 3] }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut raw = [0.0; RAW_OUTPUTS];
        for (i, r) in raw.iter_mut().enumerate() {
            *r = match i {
                0..=2 => rng.random_range(-3.0..3.0),
                3..=5 => rng.random_range(-2.0..2.0),
                _ => rng.random_range(-2.0..2.0),
            };
        }
        Self::from_raw(&raw)
    }
}

/// Probability mass of the unit cell around `v`, before flooring.
pub fn coeff_probability(v: i32, m: &MixtureParams) -> f64 {
    let v = v as f64;
    let mut p = 0.0;
    for n in 0..COMPONENTS {
        if m.weights[n] == 0.0 {
            continue;
        }
        let s = m.scales[n];
        let a = (v - 0.5 - m.means[n]) / s;
        let b = (v + 0.5 - m.means[n]) / s;
        // difference taken on the side of the smaller tail
        let d = if a > 0.0 { ndtr(-a) - ndtr(-b) } else { ndtr(b) - ndtr(a) };
        p += m.weights[n] * d;
    }
    p
}

pub fn floored_probability(v: i32, m: &MixtureParams) -> f64 {
    coeff_probability(v, m).max(PROB_MIN)
}

/// Bits charged to `v` by the rate estimate. Values outside the coded
/// window pay for the escape symbol plus the raw 16-bit value.
pub fn symbol_bits(v: i32, m: &MixtureParams) -> f64 {
    let (lo, hi) = symbol_window(m);
    if (lo..=hi).contains(&v) {
        -floored_probability(v, m).log2()
    } else {
        -escape_probability(m).log2() + 16.0
    }
}

/// Floored probability mass outside the coded window.
pub fn escape_probability(m: &MixtureParams) -> f64 {
    let (lo, hi) = symbol_window(m);
    let inside: f64 = (lo..=hi).map(|v| coeff_probability(v, m)).sum();
    (1.0 - inside).max(PROB_MIN)
}

/// Coding table for one coefficient: a contiguous window of values plus a
/// trailing escape symbol for everything outside it.
#[derive(Clone, Debug)]
pub struct SymbolTable {
    pub low: i32,
    pub cdf: CodedCdf,
}

impl SymbolTable {
    pub fn window_len(&self) -> usize {
        self.cdf.symbols() - 1
    }

    pub fn escape(&self) -> usize {
        self.window_len()
    }

    /// Symbol index for `v`, or the escape symbol.
    pub fn symbol(&self, v: i32) -> usize {
        let off = v as i64 - self.low as i64;
        if off >= 0 && (off as usize) < self.window_len() {
            off as usize
        } else {
            self.escape()
        }
    }
}

/// Coded value range for a mixture.
pub fn symbol_window(m: &MixtureParams) -> (i32, i32) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut best = 0;
    for n in 0..COMPONENTS {
        if m.weights[n] > m.weights[best] {
            best = n;
        }
        if m.weights[n] < PROB_MIN {
            continue;
        }
        let r = WINDOW_SIGMAS * m.scales[n] + 0.5;
        lo = lo.min(m.means[n] - r);
        hi = hi.max(m.means[n] + r);
    }
    let clamp = |v: f64| v.clamp(ALPHABET_MIN as f64, (ALPHABET_END - 1) as f64);
    let (mut l, mut h) = (clamp(lo.ceil()) as i64, clamp(hi.floor()) as i64);
    if h < l {
        let c = clamp(m.means[best].round()) as i64;
        l = c;
        h = c;
    }
    if (h - l + 1) as usize > MAX_WINDOW {
        let half = (MAX_WINDOW / 2) as i64;
        let c = (clamp(m.means[best].round()) as i64).clamp(l + half, h - half + 1);
        l = (c - half).max(ALPHABET_MIN as i64);
        h = (l + MAX_WINDOW as i64 - 1).min(ALPHABET_END as i64 - 1);
    }
    (l as i32, h as i32)
}

pub fn symbol_table(m: &MixtureParams) -> Result<SymbolTable, Error> {
    let (lo, hi) = symbol_window(m);
    let mut probs: Vec<f64> = (lo..=hi).map(|v| coeff_probability(v, m).max(PROB_MIN)).collect();
    probs.push(escape_probability(m));
    Ok(SymbolTable { low: lo, cdf: quantize_cdf(&probs)? })
}

/// Raw 16-bit code for an escaped value.
pub fn escape_code(v: i32) -> u16 {
    (v as i16) as u16
}

pub fn escape_value(code: u16) -> i32 {
    code as i16 as i32
}

/// Context classes; each owns one network. Detail classes are shared by
/// all levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextClass {
    Approx,
    Detail(crate::pyramid::Orientation),
}

impl ContextClass {
    pub fn of_band(levels: usize, index: usize) -> Self {
        match band_kind(levels, index) {
            BandKind::Approx => ContextClass::Approx,
            BandKind::Detail { orientation, .. } => ContextClass::Detail(orientation),
        }
    }

    fn slot(self) -> usize {
        match self {
            ContextClass::Approx => 0,
            ContextClass::Detail(o) => 1 + o.index(),
        }
    }

    fn name(self) -> &'static str {
        ["ll", "hl", "lh", "hh"][self.slot()]
    }

    pub fn has_reference(self) -> bool {
        self != ContextClass::Approx
    }
}

/// Raster-causal offsets `(dy, dx)` inside the window.
pub fn causal_offsets(s: usize) -> Vec<(isize, isize)> {
    let r = (s / 2) as isize;
    let mut v = Vec::new();
    for dy in -r..=0 {
        for dx in -r..=r {
            if dy < 0 || dx < 0 {
                v.push((dy, dx));
            }
        }
    }
    v
}

pub fn reference_offsets(s: usize) -> Vec<(isize, isize)> {
    let r = (s / 2) as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

pub fn feature_len(s: usize, class: ContextClass) -> usize {
    let n = causal_offsets(s).len() + 1;
    if class.has_reference() {
        n + s * s
    } else {
        n
    }
}

/// The context of one coefficient, before gains.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub causal: Vec<f64>,
    pub reference: Option<Vec<f64>>,
}

fn sample<T: Copy + Default + Into<f64>>(p: &Plane<T>, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
    let (xx, yy) = (x as isize + dx, y as isize + dy);
    if xx < 0 || yy < 0 || xx >= p.width as isize || yy >= p.height as isize {
        0.0
    } else {
        p.get(xx as usize, yy as usize).into()
    }
}

/// Context of position `(x, y)` in `band`, taking the co-located window of
/// `reference` when given.
pub fn context_window<T: Copy + Default + Into<f64>>(
    band: &Plane<T>,
    x: usize,
    y: usize,
    reference: Option<&Plane<f64>>,
    s: usize,
) -> ContextWindow {
    let causal = causal_offsets(s).iter().map(|&(dy, dx)| sample(band, x, y, dx, dy)).collect();
    let reference =
        reference.map(|r| reference_offsets(s).iter().map(|&(dy, dx)| sample(r, x, y, dx, dy)).collect());
    ContextWindow { causal, reference }
}

/// Context of a coefficient addressed by band index within a pyramid.
pub fn extract_context(
    pyramid: &SubbandPyramid,
    band: usize,
    x: usize,
    y: usize,
    reference: Option<&Plane<f64>>,
    s: usize,
) -> Result<ContextWindow, Error> {
    let class = ContextClass::of_band(pyramid.levels, band);
    let plane = pyramid.bands.get(band).ok_or_else(|| Error::Shape(format!("no band {band}")))?;
    match (class.has_reference(), reference) {
        (true, None) => {
            return Err(Error::Sequencing(format!("band {band} needs its reference approximation first")))
        }
        (true, Some(r)) if (r.width, r.height) != (plane.width, plane.height) => {
            return Err(Error::Shape("reference plane does not match the band size".into()))
        }
        _ => {}
    }
    let r = if class.has_reference() { reference } else { None };
    Ok(context_window(plane, x, y, r, s))
}

/// Network input: scaled window followed by the level position in `(0, 1]`.
pub fn features(w: &ContextWindow, level: usize, levels: usize) -> Vec<f64> {
    let mut f: Vec<f64> = w.causal.iter().map(|v| v * INPUT_GAIN).collect();
    if let Some(r) = &w.reference {
        f.extend(r.iter().map(|v| v * INPUT_GAIN));
    }
    f.push(level_feature(level, levels));
    f
}

fn level_feature(level: usize, levels: usize) -> f64 {
    level as f64 / levels.max(1) as f64
}

pub const CONTEXT_PREFIX: &str = "ctx";

/// The four context networks.
#[derive(Clone, Debug)]
pub struct ContextModel {
    size: usize,
    heads: Vec<Mlp>,
    maps: Arc<Mutex<HashMap<(usize, usize, bool), Arc<IndexMap>>>>,
}

const CLASSES: [ContextClass; 4] = [
    ContextClass::Approx,
    ContextClass::Detail(crate::pyramid::Orientation::HL),
    ContextClass::Detail(crate::pyramid::Orientation::LH),
    ContextClass::Detail(crate::pyramid::Orientation::HH),
];

impl ContextModel {
    pub fn build<R: Rng>(store: &mut ParamStore, size: usize, hidden: usize, rng: &mut R) -> Result<Self, NnError> {
        let heads = CLASSES
            .iter()
            .map(|&c| {
                let prefix = format!("{CONTEXT_PREFIX}.{}", c.name());
                Mlp::build(store, &prefix, &[feature_len(size, c), hidden, hidden, RAW_OUTPUTS], true, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { size, heads, maps: Default::default() })
    }

    pub fn lookup(store: &ParamStore, size: usize) -> Result<Self, NnError> {
        let heads = CLASSES
            .iter()
            .map(|&c| {
                let head = Mlp::lookup(store, &format!("{CONTEXT_PREFIX}.{}", c.name()), 3)?;
                let w = store.value(head.layers()[0].weight);
                if w.shape()[1] != feature_len(size, c) {
                    return Err(NnError::Format(format!("context head `{}` has the wrong input width", c.name())));
                }
                Ok(head)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { size, heads, maps: Default::default() })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn head(&self, class: ContextClass) -> &Mlp {
        &self.heads[class.slot()]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.layers().iter().flat_map(|l| [l.weight, l.bias])).collect()
    }

    /// Mixture for one coefficient, evaluated in a fixed order so that the
    /// encoder and decoder agree bit for bit.
    pub fn predict(
        &self,
        store: &ParamStore,
        class: ContextClass,
        window: &ContextWindow,
        level: usize,
        levels: usize,
        scratch: &mut Vec<f64>,
    ) -> MixtureParams {
        let f = features(window, level, levels);
        MixtureParams::from_raw(&self.head(class).forward_row(store, &f, scratch))
    }

    /// Per-coefficient mixtures of a whole band whose values are all known.
    pub fn band_mixtures(
        &self,
        store: &ParamStore,
        class: ContextClass,
        band: &Plane<f64>,
        reference: Option<&Plane<f64>>,
        level: usize,
        levels: usize,
    ) -> Vec<MixtureParams> {
        let mut scratch = Vec::new();
        let r = if class.has_reference() { reference } else { None };
        let mut out = Vec::with_capacity(band.len());
        for y in 0..band.height {
            for x in 0..band.width {
                let w = context_window(band, x, y, r, self.size);
                out.push(self.predict(store, class, &w, level, levels, &mut scratch));
            }
        }
        out
    }

    /// Gather map from `[band | reference | level]` to the `N x D` feature
    /// matrix (before the input gain).
    fn feature_map(&self, h: usize, w: usize, with_ref: bool) -> Arc<IndexMap> {
        let mut maps = self.maps.lock().unwrap_or_else(|e| e.into_inner());
        maps.entry((h, w, with_ref))
            .or_insert_with(|| {
                let n = h * w;
                let src_len = if with_ref { 2 * n + 1 } else { n + 1 };
                let causal = causal_offsets(self.size);
                let refs = reference_offsets(self.size);
                let d = causal.len() + 1 + if with_ref { refs.len() } else { 0 };
                let at = |x: usize, y: usize, dx: isize, dy: isize| -> Option<usize> {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    (xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize)
                        .then(|| yy as usize * w + xx as usize)
                };
                let mut idx = Vec::with_capacity(n * d);
                for y in 0..h {
                    for x in 0..w {
                        for &(dy, dx) in &causal {
                            idx.push(at(x, y, dx, dy).map_or(ZERO_INDEX, |i| i as u32));
                        }
                        if with_ref {
                            for &(dy, dx) in &refs {
                                idx.push(at(x, y, dx, dy).map_or(ZERO_INDEX, |i| (n + i) as u32));
                            }
                        }
                        idx.push((src_len - 1) as u32);
                    }
                }
                Arc::new(IndexMap::new(vec![n, d], src_len, idx).expect("context map in range"))
            })
            .clone()
    }

    /// Differentiable negative log-likelihood (nats) of a band's values,
    /// given as a `1 x H x W` plane, under the unfloored mixture.
    #[allow(clippy::too_many_arguments)]
    pub fn band_nll<G: Graph>(
        &self,
        g: &mut G,
        class: ContextClass,
        band: &G::Value,
        reference: Option<&G::Value>,
        level: usize,
        levels: usize,
    ) -> Result<G::Value, NnError> {
        let (h, w) = match g.value(band).shape() {
            [1, h, w] => (*h, *w),
            s => return Err(NnError::Shape(format!("band must be 1 x H x W, got {s:?}"))),
        };
        let with_ref = class.has_reference();
        // the level entry is pre-multiplied so the gain below restores it
        let lev = g.constant(Tensor::new(vec![1], vec![level_feature(level, levels) / INPUT_GAIN])?);
        let n = h * w;
        let src = match (with_ref, reference) {
            (true, Some(r)) => g.concat(&[band, r, &lev], &[2 * n + 1])?,
            (true, None) => return Err(NnError::Shape("detail band needs a reference plane".into())),
            (false, _) => g.concat(&[band, &lev], &[n + 1])?,
        };
        let map = self.feature_map(h, w, with_ref);
        let feats = g.gather(&src, &map)?;
        let feats = g.scale(&feats, INPUT_GAIN);
        let raw = self.head(class).forward(g, &feats)?;
        g.custom(Arc::new(MixtureNll), &[&raw, band])
    }
}

/// `sum_i -ln P(v_i)` with `P` the mixture mass of `[v_i - 0.5, v_i + 0.5]`.
///
/// Inputs: raw outputs `N x 9` and the `N` target values (any shape).
#[derive(Debug, Clone, Copy)]
pub struct MixtureNll;

struct RowTerms {
    log_p: f64,
    d_raw: [f64; RAW_OUTPUTS],
    d_v: f64,
}

fn row_terms(raw: &[f64], v: f64) -> RowTerms {
    let mx = raw[..3].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + raw[..3].iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
    let mut log_wd = [0.0; COMPONENTS];
    let mut dd_mu = [0.0; COMPONENTS];
    let mut dd_s = [0.0; COMPONENTS];
    let mut dd_v = [0.0; COMPONENTS];
    let mut sig = [0.0; COMPONENTS];
    for n in 0..COMPONENTS {
        let pre = SCALE_GAIN * raw[6 + n];
        let s = softplus(pre) + SCALE_MIN;
        sig[n] = crate::nn::kernels::sigmoid(pre);
        let mu = MEAN_GAIN * raw[3 + n];
        let a = (v - 0.5 - mu) / s;
        let b = (v + 0.5 - mu) / s;
        let log_d = log_ndtr_diff(a, b);
        let ra = (log_phi(a) - log_d).exp();
        let rb = (log_phi(b) - log_d).exp();
        log_wd[n] = raw[n] - lse + log_d;
        dd_mu[n] = (ra - rb) / s;
        dd_s[n] = (a * ra - b * rb) / s;
        dd_v[n] = (rb - ra) / s;
    }
    let m = log_wd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_p = m + log_wd.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let mut t = RowTerms { log_p, d_raw: [0.0; RAW_OUTPUTS], d_v: 0.0 };
    for n in 0..COMPONENTS {
        let r = (log_wd[n] - log_p).exp();
        let w = (raw[n] - lse).exp();
        t.d_raw[n] = r - w;
        t.d_raw[3 + n] = r * dd_mu[n] * MEAN_GAIN;
        t.d_raw[6 + n] = r * dd_s[n] * SCALE_GAIN * sig[n];
        t.d_v += r * dd_v[n];
    }
    t
}

impl CustomOp for MixtureNll {
    fn name(&self) -> &'static str {
        "mixture_nll"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NnError> {
        let (raw, v) = check_nll_inputs(inputs)?;
        let mut total = 0.0;
        for (row, &val) in raw.data().chunks(RAW_OUTPUTS).zip(v.data()) {
            total -= row_terms(row, val).log_p;
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, d_out: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let (raw, v) = check_nll_inputs(inputs)?;
        let g = d_out.item();
        let mut d_raw = Tensor::zeros(raw.shape());
        let mut d_v = Tensor::zeros(v.shape());
        for (i, (row, &val)) in raw.data().chunks(RAW_OUTPUTS).zip(v.data()).enumerate() {
            let t = row_terms(row, val);
            for (k, d) in t.d_raw.iter().enumerate() {
                d_raw.data_mut()[i * RAW_OUTPUTS + k] = -g * d;
            }
            d_v.data_mut()[i] = -g * t.d_v;
        }
        Ok(vec![d_raw, d_v])
    }
}

fn check_nll_inputs<'a>(inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor), NnError> {
    match inputs {
        [raw, v] if raw.shape().len() == 2 && raw.shape()[1] == RAW_OUTPUTS && raw.shape()[0] == v.len() => {
            Ok((raw, v))
        }
        _ => Err(NnError::Shape("mixture nll expects raw N x 9 and N values".into())),
    }
}

/// Nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::Orientation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_gaussian_mass_at_zero() {
        let p = coeff_probability(0, &MixtureParams::single(0.0, 1.0));
        assert!((p - 0.382_924_922_548_026).abs() < 1e-12, "{p}");
        let p = coeff_probability(10, &MixtureParams::single(10.0, 0.001));
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_state_from_zero_outputs() {
        let m = MixtureParams::from_raw(&[0.0; RAW_OUTPUTS]);
        for n in 0..3 {
            assert!((m.weights[n] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(m.means[n], 0.0);
            assert!((m.scales[n] - (2f64.ln() + SCALE_MIN)).abs() < 1e-15);
        }
    }

    #[test]
    fn log_cdf_matches_direct_evaluation_and_extends_into_tails() {
        for z in [-25.0, -10.0, -3.0, -0.2, 0.0, 1.5, 4.0, 7.0] {
            let direct = ndtr(z).ln();
            assert!((log_ndtr(z) - direct).abs() < 1e-10 * direct.abs().max(1.0), "{z}");
        }
        // continuity at the series switch point
        let (a, b) = (log_ndtr(-30.000_001), log_ndtr(-29.999_999));
        assert!((a - b).abs() < 1e-4);
        assert!(log_ndtr(-200.0).is_finite());
        let d = log_ndtr_diff(-40.5, -39.5);
        assert!(d.is_finite() && d < -700.0);
        assert!((log_ndtr_diff(-0.5, 0.5) - 0.382_924_922_548_026f64.ln()).abs() < 1e-12);
        assert!((log_ndtr_diff(2.0, 3.0) - (ndtr(3.0) - ndtr(2.0)).ln()).abs() < 1e-10);
    }

    #[test]
    fn offsets_count_and_causality() {
        let c = causal_offsets(5);
        assert_eq!(c.len(), 12);
        assert!(c.iter().all(|&(dy, dx)| dy < 0 || (dy == 0 && dx < 0)));
        assert_eq!(reference_offsets(5).len(), 25);
        assert_eq!(feature_len(5, ContextClass::Approx), 13);
        assert_eq!(feature_len(5, ContextClass::Detail(Orientation::HH)), 38);
    }

    #[test]
    fn window_covers_components_and_respects_the_cap() {
        let m = MixtureParams { weights: [0.5, 0.5, 0.0], means: [-3.0, 10.0, 0.0], scales: [1.0, 0.5, 9.0] };
        let (lo, hi) = symbol_window(&m);
        assert_eq!((lo, hi), (-8, 13));
        let wide = MixtureParams::single(0.0, 5000.0);
        let (lo, hi) = symbol_window(&wide);
        assert_eq!((hi - lo + 1) as usize, MAX_WINDOW);
        let edge = MixtureParams::single(32767.0, 3.0);
        assert_eq!(symbol_window(&edge).1, 32767);
        let t = symbol_table(&m).unwrap();
        assert_eq!(t.symbol(-8), 0);
        assert_eq!(t.symbol(14), t.escape());
        assert_eq!(escape_value(escape_code(-32768)), -32768);
    }

    #[test]
    fn random_mixtures_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = MixtureParams::random(&mut rng);
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let total: f64 = (-2000..=2000).map(|v| coeff_probability(v, &m)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
        }
    }

    struct NllLoss {
        raw: ParamId,
        v: ParamId,
    }

    impl crate::nn::testing::LossFn for NllLoss {
        fn eval<G: Graph>(&self, g: &mut G) -> Result<G::Value, NnError> {
            let (r, v) = (g.param(self.raw), g.param(self.v));
            g.custom(Arc::new(MixtureNll), &[&r, &v])
        }
    }

    #[test]
    fn mixture_nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..20 {
            let mut store = ParamStore::new();
            let n = 6;
            let raw: Vec<f64> = (0..n * RAW_OUTPUTS).map(|_| rng.random_range(-1.5..1.5)).collect();
            // some targets far into the tails
            let spread = if case % 2 == 0 { 5.0 } else { 60.0 };
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
            let raw = store.insert("raw", Tensor::new(vec![n, RAW_OUTPUTS], raw).unwrap()).unwrap();
            let v = store.insert("v", Tensor::new(vec![n], v).unwrap()).unwrap();
            let f = NllLoss { raw, v };
            let err = crate::nn::testing::gradient_relative_error(&store, &f, &[raw, v], 1e-5, 100).unwrap();
            assert!(err < 1e-5, "case {case}: {err}");
        }
    }

    #[test]
    fn nll_agrees_with_coding_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..RAW_OUTPUTS).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = MixtureParams::from_raw(&raw);
            let v = rng.random_range(-20..20);
            let nll = MixtureNll
                .forward(&[&Tensor::new(vec![1, 9], raw).unwrap(), &Tensor::new(vec![1], vec![v as f64]).unwrap()])
                .unwrap()
                .item();
            let p = coeff_probability(v, &m);
            if p > 1e-200 {
                assert!((nll + p.ln()).abs() < 1e-8 * nll.abs().max(1.0), "{nll} vs {}", -p.ln());
            }
        }
    }
}
