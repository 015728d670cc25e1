//! Reversible lifting transform with learned residual steps.
//!
//! Every lifting step adds the classical CDF 9/7 term plus the output of a
//! small convolutional network to one half of the signal, using only the
//! other half as input. The inverse subtracts the same quantities in
//! reverse order, so the transform is exactly invertible for any weights.
//! With the networks' last layers at zero the transform is CDF 9/7.
//!
//! Each lifting pair ends with the fixed CDF 9/7 scaling and a learned
//! reciprocal gain per axis (low half times `e^a`, high half times `e^-a`),
//! which keeps the Jacobian determinant at one.

pub mod cdf97;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::nn::{ConvStack, CustomOp, Eval, Graph, IndexMap, NnError, ParamId, ParamStore, Tensor};
use crate::pyramid::{check_dyadic, Plane, SubbandPyramid};
use crate::Error;
use cdf97::{PREDICT, UPDATE, ZETA};

/// Gain applied to the networks' inputs so they see roughly unit-range data.
pub const NET_INPUT_GAIN: f64 = 1.0 / 32.0;

/// Stored log-gains are multiplied by this, so a step of the shared
/// learning rate moves them as fast as a typical network weight matters.
pub const LOG_GAIN_RATE: f64 = 10.0;
/// Each per-axis gain stays within `[1/2, 2]`.
pub const LOG_GAIN_LIMIT: f64 = std::f64::consts::LN_2;

/// Whether the residual networks take part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    /// CDF 9/7 terms only.
    Classical,
    /// CDF 9/7 terms plus the residual networks.
    Learned,
}

/// Direction a lifting stage works along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Pairs neighbouring rows (vertical filtering).
    Rows,
    /// Pairs neighbouring columns.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum MapKind {
    Even,
    Odd,
    Interleave,
    Next,
    Prev,
}

/// Memoised index maps keyed by kind, axis and source size.
#[derive(Debug, Default)]
struct MapCache {
    maps: Mutex<HashMap<(MapKind, Axis, usize, usize), Arc<IndexMap>>>,
}

impl Clone for MapCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl MapCache {
    /// `h x w` is the size of the plane the map reads from, except for
    /// `Interleave`, where it is the size of the merged output.
    fn get(&self, kind: MapKind, axis: Axis, h: usize, w: usize) -> Arc<IndexMap> {
        let mut maps = self.maps.lock().unwrap_or_else(|e| e.into_inner());
        maps.entry((kind, axis, h, w)).or_insert_with(|| Arc::new(build_map(kind, axis, h, w))).clone()
    }
}

fn build_map(kind: MapKind, axis: Axis, h: usize, w: usize) -> IndexMap {
    let at = |y: usize, x: usize, w: usize| (y * w + x) as u32;
    let (shape, idx): (Vec<usize>, Vec<u32>) = match (kind, axis) {
        (MapKind::Even | MapKind::Odd, Axis::Rows) => {
            let off = usize::from(kind == MapKind::Odd);
            let idx = (0..h / 2).flat_map(|y| (0..w).map(move |x| at(2 * y + off, x, w))).collect();
            (vec![1, h / 2, w], idx)
        }
        (MapKind::Even | MapKind::Odd, Axis::Cols) => {
            let off = usize::from(kind == MapKind::Odd);
            let idx = (0..h).flat_map(|y| (0..w / 2).map(move |x| at(y, 2 * x + off, w))).collect();
            (vec![1, h, w / 2], idx)
        }
        (MapKind::Interleave, Axis::Rows) => {
            // source: low half (h/2 x w) followed by high half
            let half = (h / 2 * w) as u32;
            let idx = (0..h)
                .flat_map(|y| (0..w).map(move |x| at(y / 2, x, w) + if y % 2 == 1 { half } else { 0 }))
                .collect();
            (vec![1, h, w], idx)
        }
        (MapKind::Interleave, Axis::Cols) => {
            let half = (h * (w / 2)) as u32;
            let idx = (0..h)
                .flat_map(|y| (0..w).map(move |x| at(y, x / 2, w / 2) + if x % 2 == 1 { half } else { 0 }))
                .collect();
            (vec![1, h, w], idx)
        }
        (MapKind::Next | MapKind::Prev, axis) => {
            let step = |i: usize, n: usize| match kind {
                MapKind::Next => (i + 1).min(n - 1),
                _ => i.saturating_sub(1),
            };
            let idx = (0..h)
                .flat_map(|y| {
                    (0..w).map(move |x| match axis {
                        Axis::Rows => at(step(y, h), x, w),
                        Axis::Cols => at(y, step(x, w), w),
                    })
                })
                .collect();
            (vec![1, h, w], idx)
        }
    };
    IndexMap::new(shape, h * w, idx).expect("lifting index maps are built in range")
}

fn plane_dims<G: Graph>(g: &G, v: &G::Value) -> Result<(usize, usize), NnError> {
    match g.value(v).shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(NnError::Shape(format!("expected a 1 x H x W plane, got {s:?}"))),
    }
}

/// The eight residual lifting networks: predict/update for two steps, for
/// the vertical stage and the horizontal stage. All levels share them.
#[derive(Clone, Debug)]
pub struct LiftingNets {
    /// Indexed `[axis][step][predict=0 | update=1]`.
    nets: Vec<ConvStack>,
    /// Log-gain per axis, rows first.
    gains: [ParamId; 2],
}

pub const LIFTING_PREFIX: &str = "lift";

impl LiftingNets {
    fn name(axis: Axis, step: usize, update: bool) -> String {
        let a = match axis {
            Axis::Rows => "rows",
            Axis::Cols => "cols",
        };
        let op = if update { "update" } else { "predict" };
        format!("{LIFTING_PREFIX}.{a}.{op}{step}")
    }

    fn gain_name(axis: Axis) -> String {
        match axis {
            Axis::Rows => format!("{LIFTING_PREFIX}.rows.gain"),
            Axis::Cols => format!("{LIFTING_PREFIX}.cols.gain"),
        }
    }

    fn slots() -> impl Iterator<Item = (Axis, usize, bool)> {
        [Axis::Rows, Axis::Cols]
            .into_iter()
            .flat_map(|a| (0..2).flat_map(move |s| [(a, s, false), (a, s, true)]))
    }

    pub fn build<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Result<Self, NnError> {
        let nets = Self::slots()
            .map(|(a, s, u)| ConvStack::build(store, &Self::name(a, s, u), &[1, width, width, 1], 3, true, rng))
            .collect::<Result<_, _>>()?;
        let mut gain = |axis| store.insert(Self::gain_name(axis), Tensor::zeros(&[1]));
        let gains = [gain(Axis::Rows)?, gain(Axis::Cols)?];
        Ok(Self { nets, gains })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self, NnError> {
        let nets = Self::slots()
            .map(|(a, s, u)| ConvStack::lookup(store, &Self::name(a, s, u), 3))
            .collect::<Result<_, _>>()?;
        let gain = |axis| {
            let name = Self::gain_name(axis);
            match store.id(&name) {
                Some(id) if store.value(id).len() == 1 => Ok(id),
                _ => Err(NnError::Shape(format!("missing scalar parameter {name}"))),
            }
        };
        let gains = [gain(Axis::Rows)?, gain(Axis::Cols)?];
        Ok(Self { nets, gains })
    }

    pub fn get(&self, axis: Axis, step: usize, update: bool) -> &ConvStack {
        let a = usize::from(axis == Axis::Cols);
        &self.nets[a * 4 + step * 2 + usize::from(update)]
    }

    pub fn gain(&self, axis: Axis) -> ParamId {
        self.gains[usize::from(axis == Axis::Cols)]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let nets = self.nets.iter().flat_map(|n| n.layers().iter().flat_map(|l| [l.weight, l.bias]));
        nets.chain(self.gains).collect()
    }

    /// True when every network's last layer and both gains are exactly zero,
    /// i.e. the learned transform coincides with CDF 9/7.
    pub fn is_idle(&self, store: &ParamStore) -> bool {
        let zero = |id: ParamId| store.value(id).data().iter().all(|&v| v == 0.0);
        let last = self.nets.iter().all(|n| n.layers().last().is_none_or(|l| zero(l.weight) && zero(l.bias)));
        last && self.gains.iter().all(|&id| zero(id))
    }
}

/// `x * exp(sign * LIMIT * tanh(RATE * a))` for a plane `x` and a scalar `a`.
#[derive(Debug, Clone, Copy)]
struct ExpGain {
    sign: f64,
}

impl ExpGain {
    fn factor(&self, a: &Tensor) -> f64 {
        (self.sign * LOG_GAIN_LIMIT * (LOG_GAIN_RATE * a.data()[0]).tanh()).exp()
    }
}

impl CustomOp for ExpGain {
    fn name(&self) -> &'static str {
        "exp_gain"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NnError> {
        match inputs {
            [x, a] if a.len() == 1 => {
                let k = self.factor(a);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect())
            }
            _ => Err(NnError::Shape("exp gain expects a tensor and a scalar".into())),
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, d_out: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let [x, a] = inputs else {
            return Err(NnError::Shape("exp gain expects a tensor and a scalar".into()));
        };
        let k = self.factor(a);
        let dx = Tensor::new(x.shape().to_vec(), d_out.data().iter().map(|d| d * k).collect())?;
        let da: f64 = d_out.data().iter().zip(output.data()).map(|(d, y)| d * y).sum();
        let t = (LOG_GAIN_RATE * a.data()[0]).tanh();
        let dlog = self.sign * LOG_GAIN_LIMIT * LOG_GAIN_RATE * (1.0 - t * t);
        Ok(vec![dx, Tensor::new(a.shape().to_vec(), vec![da * dlog])?])
    }
}

/// The learned transform. Holds parameter handles, not values.
#[derive(Clone, Debug)]
pub struct Lifting {
    nets: LiftingNets,
    maps: MapCache,
}

impl Lifting {
    pub fn new(nets: LiftingNets) -> Self {
        Self { nets, maps: MapCache::default() }
    }

    pub fn nets(&self) -> &LiftingNets {
        &self.nets
    }

    fn gather<G: Graph>(&self, g: &mut G, v: &G::Value, kind: MapKind, axis: Axis) -> Result<G::Value, NnError> {
        let (h, w) = plane_dims(g, v)?;
        let map = self.maps.get(kind, axis, h, w);
        g.gather(v, &map)
    }

    /// Splits a plane into its even and odd rows (or columns).
    pub fn split<G: Graph>(&self, g: &mut G, x: &G::Value, axis: Axis) -> Result<(G::Value, G::Value), NnError> {
        let (h, w) = plane_dims(g, x)?;
        let n = match axis {
            Axis::Rows => h,
            Axis::Cols => w,
        };
        if n % 2 != 0 {
            return Err(NnError::Shape(format!("cannot split {n} lines into even and odd halves")));
        }
        Ok((self.gather(g, x, MapKind::Even, axis)?, self.gather(g, x, MapKind::Odd, axis)?))
    }

    pub fn merge<G: Graph>(&self, g: &mut G, lo: &G::Value, hi: &G::Value, axis: Axis) -> Result<G::Value, NnError> {
        let (h, w) = plane_dims(g, lo)?;
        if plane_dims(g, hi)? != (h, w) {
            return Err(NnError::Shape("merging halves of different sizes".into()));
        }
        let (oh, ow) = match axis {
            Axis::Rows => (2 * h, w),
            Axis::Cols => (h, 2 * w),
        };
        let both = g.concat(&[lo, hi], &[2 * h * w])?;
        let map = self.maps.get(MapKind::Interleave, axis, oh, ow);
        g.gather(&both, &map)
    }

    /// Quantity added to the high half: `c (lo[i] + lo[i+1])` plus the network.
    fn predict_term<G: Graph>(
        &self,
        g: &mut G,
        lo: &G::Value,
        axis: Axis,
        step: usize,
        mode: TransformMode,
    ) -> Result<G::Value, NnError> {
        let next = self.gather(g, lo, MapKind::Next, axis)?;
        let s = g.add(lo, &next)?;
        let t = g.scale(&s, PREDICT[step]);
        self.with_net(g, t, lo, axis, step, false, mode)
    }

    /// Quantity added to the low half: `c (hi[i-1] + hi[i])` plus the network.
    fn update_term<G: Graph>(
        &self,
        g: &mut G,
        hi: &G::Value,
        axis: Axis,
        step: usize,
        mode: TransformMode,
    ) -> Result<G::Value, NnError> {
        let prev = self.gather(g, hi, MapKind::Prev, axis)?;
        let s = g.add(&prev, hi)?;
        let t = g.scale(&s, UPDATE[step]);
        self.with_net(g, t, hi, axis, step, true, mode)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_net<G: Graph>(
        &self,
        g: &mut G,
        t: G::Value,
        input: &G::Value,
        axis: Axis,
        step: usize,
        update: bool,
        mode: TransformMode,
    ) -> Result<G::Value, NnError> {
        if mode == TransformMode::Classical {
            return Ok(t);
        }
        let scaled = g.scale(input, NET_INPUT_GAIN);
        let r = self.nets.get(axis, step, update).forward(g, &scaled)?;
        g.add(&t, &r)
    }

    /// Two predict/update pairs followed by the diagonal scaling.
    pub fn lift_forward<G: Graph>(
        &self,
        g: &mut G,
        lo: &G::Value,
        hi: &G::Value,
        axis: Axis,
        mode: TransformMode,
    ) -> Result<(G::Value, G::Value), NnError> {
        if plane_dims(g, lo)? != plane_dims(g, hi)? {
            return Err(NnError::Shape("lifting halves differ in size".into()));
        }
        let (mut lo, mut hi) = (lo.clone(), hi.clone());
        for step in 0..2 {
            let t = self.predict_term(g, &lo, axis, step, mode)?;
            hi = g.add(&hi, &t)?;
            let t = self.update_term(g, &hi, axis, step, mode)?;
            lo = g.add(&lo, &t)?;
        }
        let (lo, hi) = (g.scale(&lo, 1.0 / ZETA), g.scale(&hi, ZETA));
        self.apply_gain(g, lo, hi, axis, mode, 1.0)
    }

    fn apply_gain<G: Graph>(
        &self,
        g: &mut G,
        lo: G::Value,
        hi: G::Value,
        axis: Axis,
        mode: TransformMode,
        sign: f64,
    ) -> Result<(G::Value, G::Value), NnError> {
        if mode == TransformMode::Classical {
            return Ok((lo, hi));
        }
        let a = g.param(self.nets.gain(axis));
        let lo = g.custom(Arc::new(ExpGain { sign }), &[&lo, &a])?;
        let hi = g.custom(Arc::new(ExpGain { sign: -sign }), &[&hi, &a])?;
        Ok((lo, hi))
    }

    pub fn lift_inverse<G: Graph>(
        &self,
        g: &mut G,
        lo: &G::Value,
        hi: &G::Value,
        axis: Axis,
        mode: TransformMode,
    ) -> Result<(G::Value, G::Value), NnError> {
        if plane_dims(g, lo)? != plane_dims(g, hi)? {
            return Err(NnError::Shape("lifting halves differ in size".into()));
        }
        let (lo, hi) = self.apply_gain(g, lo.clone(), hi.clone(), axis, mode, -1.0)?;
        let mut lo = g.scale(&lo, ZETA);
        let mut hi = g.scale(&hi, 1.0 / ZETA);
        for step in (0..2).rev() {
            let t = self.update_term(g, &hi, axis, step, mode)?;
            lo = g.sub(&lo, &t)?;
            let t = self.predict_term(g, &lo, axis, step, mode)?;
            hi = g.sub(&hi, &t)?;
        }
        Ok((lo, hi))
    }

    /// One analysis level of a `1 x H x W` plane: `[LL, HL, LH, HH]`.
    pub fn forward_level<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        mode: TransformMode,
    ) -> Result<[G::Value; 4], NnError> {
        let (lo, hi) = self.split(g, x, Axis::Rows)?;
        let (lo, hi) = self.lift_forward(g, &lo, &hi, Axis::Rows, mode)?;
        let (a, b) = self.split(g, &lo, Axis::Cols)?;
        let (ll, hl) = self.lift_forward(g, &a, &b, Axis::Cols, mode)?;
        let (a, b) = self.split(g, &hi, Axis::Cols)?;
        let (lh, hh) = self.lift_forward(g, &a, &b, Axis::Cols, mode)?;
        Ok([ll, hl, lh, hh])
    }

    pub fn inverse_level<G: Graph>(
        &self,
        g: &mut G,
        bands: [&G::Value; 4],
        mode: TransformMode,
    ) -> Result<G::Value, NnError> {
        let [ll, hl, lh, hh] = bands;
        let (a, b) = self.lift_inverse(g, ll, hl, Axis::Cols, mode)?;
        let lo = self.merge(g, &a, &b, Axis::Cols)?;
        let (a, b) = self.lift_inverse(g, lh, hh, Axis::Cols, mode)?;
        let hi = self.merge(g, &a, &b, Axis::Cols)?;
        let (lo, hi) = self.lift_inverse(g, &lo, &hi, Axis::Rows, mode)?;
        self.merge(g, &lo, &hi, Axis::Rows)
    }

    /// `levels`-deep decomposition in band order (coarse first).
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        levels: usize,
        mode: TransformMode,
    ) -> Result<Vec<G::Value>, NnError> {
        let (h, w) = plane_dims(g, x)?;
        check_dyadic(w, h, levels).map_err(|e| NnError::Shape(e.to_string()))?;
        let mut details = Vec::with_capacity(levels);
        let mut ll = x.clone();
        for _ in 0..levels {
            let [a, hl, lh, hh] = self.forward_level(g, &ll, mode)?;
            details.push([hl, lh, hh]);
            ll = a;
        }
        let mut bands = vec![ll];
        for d in details.into_iter().rev() {
            bands.extend(d);
        }
        Ok(bands)
    }

    /// Approximation planes `[LL_K, LL_{K-1}, ..., LL_0]` rebuilt from the
    /// bands, stopping early at `LL_{stop}`. `LL_0` is the image itself.
    pub fn inverse_chain<G: Graph>(
        &self,
        g: &mut G,
        bands: &[G::Value],
        levels: usize,
        stop: usize,
        mode: TransformMode,
    ) -> Result<Vec<G::Value>, NnError> {
        if bands.len() != 3 * levels + 1 {
            return Err(NnError::Shape(format!("{} levels need {} bands, got {}", levels, 3 * levels + 1, bands.len())));
        }
        let mut chain = vec![bands[0].clone()];
        for k in (stop + 1..=levels).rev() {
            let i = 1 + 3 * (levels - k);
            let ll = chain.last().expect("chain starts non-empty").clone();
            let next = self.inverse_level(g, [&ll, &bands[i], &bands[i + 1], &bands[i + 2]], mode)?;
            chain.push(next);
        }
        Ok(chain)
    }

    pub fn inverse<G: Graph>(
        &self,
        g: &mut G,
        bands: &[G::Value],
        levels: usize,
        mode: TransformMode,
    ) -> Result<G::Value, NnError> {
        let mut chain = self.inverse_chain(g, bands, levels, 0, mode)?;
        Ok(chain.pop().expect("chain is non-empty"))
    }

    pub fn forward_transform(
        &self,
        store: &ParamStore,
        x: &Plane<f64>,
        levels: usize,
        mode: TransformMode,
    ) -> Result<SubbandPyramid, Error> {
        check_dyadic(x.width, x.height, levels)?;
        let mut g = Eval::new(store);
        let bands = self.forward(&mut g, &plane_tensor(x), levels, mode)?;
        Ok(SubbandPyramid {
            width: x.width,
            height: x.height,
            levels,
            bands: bands.into_iter().map(tensor_plane).collect::<Result<_, _>>()?,
        })
    }

    pub fn inverse_transform(
        &self,
        store: &ParamStore,
        p: &SubbandPyramid,
        mode: TransformMode,
    ) -> Result<Plane<f64>, Error> {
        p.validate()?;
        let mut g = Eval::new(store);
        let bands: Vec<Tensor> = p.bands.iter().map(plane_tensor).collect();
        tensor_plane(self.inverse(&mut g, &bands, p.levels, mode)?)
    }

    /// Rebuilds `LL_level` from the coarser bands only.
    pub fn partial_inverse(
        &self,
        store: &ParamStore,
        p: &SubbandPyramid,
        level: usize,
        mode: TransformMode,
    ) -> Result<Plane<f64>, Error> {
        p.validate()?;
        if level > p.levels {
            return Err(Error::Shape(format!("no LL_{level} in a {}-level pyramid", p.levels)));
        }
        let mut g = Eval::new(store);
        let bands: Vec<Tensor> = p.bands.iter().map(plane_tensor).collect();
        let mut chain = self.inverse_chain(&mut g, &bands, p.levels, level, mode)?;
        tensor_plane(chain.pop().expect("chain is non-empty"))
    }
}

pub fn plane_tensor(p: &Plane<f64>) -> Tensor {
    Tensor::new(vec![1, p.height, p.width], p.data.clone()).expect("plane data matches its size")
}

pub fn tensor_plane(t: Tensor) -> Result<Plane<f64>, Error> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected a 1 x H x W plane, got {s:?}"))),
    };
    Plane::from_vec(w, h, t.into_data())
}

/// Even rows and odd rows of a plane.
pub fn split_rows<T: Copy + Default>(x: &Plane<T>) -> Result<(Plane<T>, Plane<T>), Error> {
    if x.height % 2 != 0 {
        return Err(Error::Shape(format!("cannot split {} rows into even and odd halves", x.height)));
    }
    let w = x.width;
    let pick = |off: usize| {
        let data = (0..x.height / 2).flat_map(|y| x.data[(2 * y + off) * w..][..w].iter().copied()).collect();
        Plane { width: w, height: x.height / 2, data }
    };
    Ok((pick(0), pick(1)))
}

pub fn interleave_rows<T: Copy + Default>(lo: &Plane<T>, hi: &Plane<T>) -> Result<Plane<T>, Error> {
    if lo.width != hi.width || lo.height != hi.height {
        return Err(Error::Shape("interleaving halves of different sizes".into()));
    }
    let w = lo.width;
    let mut data = Vec::with_capacity(2 * lo.len());
    for y in 0..lo.height {
        data.extend_from_slice(&lo.data[y * w..(y + 1) * w]);
        data.extend_from_slice(&hi.data[y * w..(y + 1) * w]);
    }
    Ok(Plane { width: w, height: 2 * lo.height, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, Lifting) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nets = LiftingNets::build(&mut store, 16, &mut rng).unwrap();
        (store, Lifting::new(nets))
    }

    fn random_plane(w: usize, h: usize, seed: u64) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_vec(w, h, (0..w * h).map(|_| rng.random_range(-128.0..128.0)).collect()).unwrap()
    }

    #[test]
    fn row_split_examples() {
        let rows = Plane::from_vec(4, 4, (0..16).map(|i| (i / 4) as i32).collect()).unwrap();
        let (lo, hi) = split_rows(&rows).unwrap();
        assert!(lo.data[..4].iter().all(|&v| v == 0) && lo.data[4..].iter().all(|&v| v == 2));
        assert!(hi.data[..4].iter().all(|&v| v == 1) && hi.data[4..].iter().all(|&v| v == 3));
        assert_eq!(interleave_rows(&lo, &hi).unwrap(), rows);
        let c = Plane::from_vec(3, 4, vec![5; 12]).unwrap();
        let (lo, hi) = split_rows(&c).unwrap();
        assert_eq!(lo, hi);
        assert!(split_rows(&Plane::<i32>::new(2, 3)).is_err());
    }

    #[test]
    fn graph_split_and_merge_agree_with_planes() {
        let (store, t) = setup(1);
        let x = random_plane(6, 4, 2);
        let mut g = Eval::new(&store);
        let (lo, hi) = t.split(&mut g, &plane_tensor(&x), Axis::Rows).unwrap();
        let (plo, phi) = split_rows(&x).unwrap();
        assert_eq!(tensor_plane(lo.clone()).unwrap(), plo);
        assert_eq!(tensor_plane(hi.clone()).unwrap(), phi);
        let back = t.merge(&mut g, &lo, &hi, Axis::Rows).unwrap();
        assert_eq!(tensor_plane(back).unwrap(), x);
        let (a, b) = t.split(&mut g, &plane_tensor(&x), Axis::Cols).unwrap();
        let back = t.merge(&mut g, &a, &b, Axis::Cols).unwrap();
        assert_eq!(tensor_plane(back).unwrap(), x);
        assert!(t.split(&mut g, &Tensor::zeros(&[1, 3, 4]), Axis::Rows).is_err());
    }

    #[test]
    fn zero_last_layers_reproduce_the_classical_transform_exactly() {
        let (store, t) = setup(3);
        let x = random_plane(32, 16, 4);
        let learned = t.forward_transform(&store, &x, 3, TransformMode::Learned).unwrap();
        let classical = t.forward_transform(&store, &x, 3, TransformMode::Classical).unwrap();
        assert_eq!(learned, classical);
        let oracle = cdf97::cdf97_forward(&x, 3).unwrap();
        for (a, b) in learned.bands.iter().zip(&oracle.bands) {
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_predict_step_matches_the_classical_intermediate() {
        let (store, t) = setup(5);
        let x = random_plane(8, 8, 6);
        let mut g = Eval::new(&store);
        let (lo, hi) = t.split(&mut g, &plane_tensor(&x), Axis::Rows).unwrap();
        let term = t.predict_term(&mut g, &lo, Axis::Rows, 0, TransformMode::Learned).unwrap();
        let h1 = g.add(&hi, &term).unwrap();
        for cx in 0..8 {
            let col: Vec<f64> = (0..8).map(|y| x.get(cx, y)).collect();
            let n = 4;
            for i in 0..n {
                let expect = col[2 * i + 1] + cdf97::ALPHA * (col[2 * i] + col[(2 * i + 2).min(2 * n - 2)]);
                assert!((h1.data()[i * 8 + cx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_inverse_recovers_coarse_approximations() {
        let (store, t) = setup(7);
        let x = random_plane(16, 16, 8);
        let p = t.forward_transform(&store, &x, 3, TransformMode::Classical).unwrap();
        let two = t.forward_transform(&store, &x, 2, TransformMode::Classical).unwrap();
        let ll2 = t.partial_inverse(&store, &p, 2, TransformMode::Classical).unwrap();
        for (a, b) in ll2.data.iter().zip(&two.bands[0].data) {
            assert!((a - b).abs() < 1e-9);
        }
        let full = t.partial_inverse(&store, &p, 0, TransformMode::Classical).unwrap();
        for (a, b) in full.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gain_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![1, 1, 3], vec![0.5, -2.0, 3.0]).unwrap();
        let a = Tensor::new(vec![1], vec![0.04]).unwrap();
        let op = ExpGain { sign: -1.0 };
        let w = [0.3, -1.1, 0.7];
        let loss = |x: &Tensor, a: &Tensor| -> f64 {
            op.forward(&[x, a]).unwrap().data().iter().zip(w).map(|(y, w)| y * w).sum()
        };
        let out = op.forward(&[&x, &a]).unwrap();
        let d_out = Tensor::new(vec![1, 1, 3], w.to_vec()).unwrap();
        let grads = op.backward(&[&x, &a], &out, &d_out).unwrap();
        let h = 1e-6;
        let ap = Tensor::new(vec![1], vec![0.04 + h]).unwrap();
        let am = Tensor::new(vec![1], vec![0.04 - h]).unwrap();
        let fd = (loss(&x, &ap) - loss(&x, &am)) / (2.0 * h);
        assert!((fd - grads[1].data()[0]).abs() < 1e-6, "{fd} vs {}", grads[1].data()[0]);
        let k = op.factor(&a);
        assert!(grads[0].data().iter().zip(w).all(|(g, w)| (g - w * k).abs() < 1e-12));
        assert!(k > 0.5 && k < 1.0);
    }

}
