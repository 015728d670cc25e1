use super::{ParamId, ParamStore, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update using the gradients stored in `store`.
///
/// Parameters rejected by `trainable` are left untouched, moments included.
pub fn adam_step(
    store: &mut ParamStore,
    cfg: &AdamConfig,
    state: &mut AdamState,
    trainable: impl Fn(ParamId) -> bool,
) {
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if !trainable(id) {
            continue;
        }
        let i = id.index();
        let p = store.get_mut(id);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.grad.data();
        let w = p.value.data_mut();
        for k in 0..w.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}
