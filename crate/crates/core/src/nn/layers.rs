//! Small layer stacks: convolutions or affine maps with `tanh` in between.

use rand::Rng;

use super::{Graph, NnError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

fn lookup(store: &ParamStore, prefix: &str, n: usize) -> Result<Vec<Layer>, NnError> {
    (0..n)
        .map(|i| {
            let get = |s: &str| {
                let name = format!("{prefix}.{i}.{s}");
                store.id(&name).ok_or_else(|| NnError::Format(format!("missing parameter `{name}`")))
            };
            Ok(Layer { weight: get("weight")?, bias: get("bias")? })
        })
        .collect()
}

fn build<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    widths: &[usize],
    kernel: Option<usize>,
    zero_last: bool,
    rng: &mut R,
) -> Result<Vec<Layer>, NnError> {
    let n = widths.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let (c_in, c_out) = (widths[i], widths[i + 1]);
        let shape = match kernel {
            Some(k) => vec![c_out, c_in, k, k],
            None => vec![c_out, c_in],
        };
        let fan_in = c_in * kernel.map_or(1, |k| k * k);
        let (wn, bn) = (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"));
        let layer = if zero_last && i + 1 == n {
            Layer {
                weight: store.insert(wn, Tensor::zeros(&shape))?,
                bias: store.insert(bn, Tensor::zeros(&[c_out]))?,
            }
        } else {
            Layer {
                weight: store.insert_uniform(wn, &shape, fan_in, rng)?,
                bias: store.insert_uniform(bn, &[c_out], fan_in, rng)?,
            }
        };
        layers.push(layer);
    }
    Ok(layers)
}

/// Same-size convolutions, `tanh` between layers, none after the last.
#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<Layer>,
}

impl ConvStack {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        kernel: usize,
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self { layers: build(store, prefix, channels, Some(kernel), zero_last, rng)? })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, depth: usize) -> Result<Self, NnError> {
        Ok(Self { layers: lookup(store, prefix, depth)? })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value, NnError> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let w = g.param(l.weight);
            let b = g.param(l.bias);
            h = g.conv2d(&h, &w, &b)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(&h);
            }
        }
        Ok(h)
    }
}

/// Affine layers, `tanh` between layers, none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self { layers: build(store, prefix, widths, None, zero_last, rng)? })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, depth: usize) -> Result<Self, NnError> {
        Ok(Self { layers: lookup(store, prefix, depth)? })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value, NnError> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let w = g.param(l.weight);
            let b = g.param(l.bias);
            h = g.linear(&h, &w, &b)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(&h);
            }
        }
        Ok(h)
    }

    /// Row-at-a-time evaluation with a fixed summation order, used where
    /// encoder and decoder must agree bit for bit.
    pub fn forward_row(&self, store: &ParamStore, input: &[f64], scratch: &mut Vec<f64>) -> Vec<f64> {
        let mut cur = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let w = store.value(l.weight);
            let b = store.value(l.bias).data();
            let (o, d) = (w.shape()[0], w.shape()[1]);
            debug_assert_eq!(d, cur.len());
            scratch.clear();
            for r in 0..o {
                let row = &w.data()[r * d..(r + 1) * d];
                let mut acc = 0.0;
                for (a, x) in row.iter().zip(&cur) {
                    acc += a * x;
                }
                let v = acc + b[r];
                scratch.push(if i + 1 < self.layers.len() { v.tanh() } else { v });
            }
            std::mem::swap(&mut cur, scratch);
        }
        cur
    }
}
