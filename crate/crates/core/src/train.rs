//! Two-stage optimisation of all model parameters.
//!
//! Stage one keeps the CDF 9/7 transform and fits the posterior heads and
//! the context model. Stage two unfreezes the residual lifting networks and
//! trains everything jointly.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{nats_to_bits, ContextClass};
use crate::lifting::{plane_tensor, TransformMode};
use crate::model::{Group, Model};
use crate::nn::{
    adam_step, read_params, testing::LossFn, write_params, AdamConfig, AdamState, Graph, IndexMap, NnError, ParamStore, Tape,
    Tensor,
};
use crate::pyramid::{band_level, check_dyadic, Plane};
use crate::quant::uniform_noise;
use crate::Error;

/// Width of the moving window used to summarise the loss.
pub const TRAILING_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the rate term.
    pub lambda: f64,
    /// Total number of optimiser steps, both stages included.
    pub steps: usize,
    /// Steps spent with the transform frozen at CDF 9/7.
    pub warmstart_steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 8.0,
            steps: 25_000,
            warmstart_steps: 5_000,
            batch: 4,
            patch: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 1_000,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: usize) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patch == 0 || self.patch % (1 << levels) != 0 {
            return bad(format!("patch {} is not a multiple of {}", self.patch, 1 << levels));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimiser settings out of range".into());
        }
        Ok(())
    }

    /// Hash of the settings that shape the optimisation, stored in the model.
    pub fn hash(&self) -> u64 {
        let key = serde_json::json!([
            self.lambda, self.warmstart_steps, self.batch, self.patch, self.lr, self.beta1, self.beta2, self.seed
        ]);
        let d = Sha256::digest(key.to_string().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn stage(&self, step: usize) -> Stage {
        if step < self.warmstart_steps {
            Stage::WarmStart
        } else {
            Stage::Joint
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    WarmStart,
    Joint,
}

impl Stage {
    pub fn mode(self) -> TransformMode {
        match self {
            Stage::WarmStart => TransformMode::Classical,
            Stage::Joint => TransformMode::Learned,
        }
    }

    pub fn trains(self, group: Group) -> bool {
        self == Stage::Joint || group != Group::Lifting
    }
}

/// One training image: a centred patch and the uniform noise added to each
/// of its subbands.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x: Plane<f64>,
    pub noise: Vec<Vec<f64>>,
}

impl TrainSample {
    pub fn new<R: Rng>(x: Plane<f64>, levels: usize, rng: &mut R) -> Result<Self, Error> {
        check_dyadic(x.width, x.height, levels)?;
        let (w, h) = (x.width >> levels, x.height >> levels);
        let mut noise = vec![uniform_noise(w * h, rng)];
        for level in (1..=levels).rev() {
            let n = (x.width >> level) * (x.height >> level);
            for _ in 0..3 {
                noise.push(uniform_noise(n, rng));
            }
        }
        Ok(Self { x, noise })
    }
}

/// Graph values of the objective and its parts for one image.
pub struct Terms<V> {
    /// `(nll + lambda * rate) / pixels + mse`.
    pub loss: V,
    /// Posterior negative log-likelihood, nats, summed.
    pub nll: V,
    /// Rate of the noisy coefficients, nats, summed.
    pub rate: V,
    /// Mean squared error between the input and the posterior-mean
    /// reconstruction.
    pub mse: V,
    pub pixels: usize,
}

fn first_channel_map(n: usize, h: usize, w: usize) -> Arc<IndexMap> {
    Arc::new(IndexMap::new(vec![1, h, w], 2 * n, (0..n as u32).collect()).expect("valid slice"))
}

/// Builds the training objective for one sample.
pub fn objective<G: Graph>(
    g: &mut G,
    model: &Model,
    sample: &TrainSample,
    lambda: f64,
    mode: TransformMode,
) -> Result<Terms<G::Value>, Error> {
    let k = model.levels();
    let lifting = model.lifting();
    let pixels = sample.x.len();
    let x = g.constant(plane_tensor(&sample.x));
    let y = lifting.forward(g, &x, k, mode)?;
    if y.len() != sample.noise.len() {
        return Err(Error::Shape(format!("{} bands but {} noise planes", y.len(), sample.noise.len())));
    }
    let mut noisy = Vec::with_capacity(y.len());
    for (band, u) in y.iter().zip(&sample.noise) {
        let shape = g.value(band).shape().to_vec();
        let u = g.constant(Tensor::new(shape, u.clone()).map_err(Error::from)?);
        noisy.push(g.add(band, &u)?);
    }
    // approximations [LL_K, ..., LL_1] rebuilt from the noisy bands
    let chain = lifting.inverse_chain(g, &noisy, k, 1, mode)?;
    let mut nll_parts = Vec::with_capacity(y.len());
    let mut rate_parts = Vec::with_capacity(y.len());
    let mut means = Vec::with_capacity(y.len());
    for b in 0..y.len() {
        let level = band_level(k, b);
        let reference = (b > 0).then(|| &chain[k - level]);
        let raw = model.posterior().raw(g, b, &noisy[b], reference)?;
        nll_parts.push(crate::posterior::band_nll(g, &y[b], &noisy[b], &raw)?);
        let (h, w) = match g.value(&noisy[b]).shape() {
            [1, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("unexpected band shape {s:?}"))),
        };
        let shift = g.gather(&raw, &first_channel_map(h * w, h, w))?;
        let shift = g.tanh(&shift);
        let shift = g.scale(&shift, 0.5);
        means.push(g.add(&noisy[b], &shift)?);
        let class = ContextClass::of_band(k, b);
        rate_parts.push(model.context().band_nll(g, class, &noisy[b], reference, level, k)?);
    }
    let x0 = lifting.inverse(g, &means, k, mode)?;
    let mse = g.mse(&x, &x0)?;
    let parts: Vec<&G::Value> = nll_parts.iter().collect();
    let nll = g.concat(&parts, &[parts.len()])?;
    let nll = g.sum(&nll);
    let parts: Vec<&G::Value> = rate_parts.iter().collect();
    let rate = g.concat(&parts, &[parts.len()])?;
    let rate = g.sum(&rate);
    let weighted = g.scale(&rate, lambda);
    let total = g.add(&nll, &weighted)?;
    let total = g.scale(&total, 1.0 / pixels as f64);
    let loss = g.add(&total, &mse)?;
    Ok(Terms { loss, nll, rate, mse, pixels })
}

/// Objective of one fixed sample as a function of the parameters.
pub struct SampleObjective<'a> {
    pub model: &'a Model,
    pub sample: &'a TrainSample,
    pub lambda: f64,
    pub mode: TransformMode,
}

impl LossFn for SampleObjective<'_> {
    fn eval<G: Graph>(&self, g: &mut G) -> Result<G::Value, NnError> {
        objective(g, self.model, self.sample, self.lambda, self.mode).map(|t| t.loss).map_err(|e| match e {
            Error::Nn(e) => e,
            other => NnError::Shape(other.to_string()),
        })
    }
}

/// Diagnostics of one optimiser step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Posterior negative log-likelihood per pixel, nats.
    pub nll: f64,
    pub reg_mse: f64,
    pub bpp_est: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss,nll,reg_mse,bpp_est";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.nll, self.reg_mse, self.bpp_est)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub step: usize,
    pub trailing_loss: f64,
    /// Worst reconstruction error of a forward/inverse round trip.
    pub inversion_error: f64,
}

struct ImageResult {
    loss: f64,
    nll: f64,
    rate: f64,
    mse: f64,
    pixels: usize,
    grads: crate::nn::Gradients,
}

fn image_step(model: &Model, sample: &TrainSample, lambda: f64, mode: TransformMode) -> Result<ImageResult, Error> {
    let mut tape = Tape::new(&model.store);
    let t = objective(&mut tape, model, sample, lambda, mode)?;
    let read = |v| tape.value(v).item();
    let (loss, nll, rate, mse) = (read(&t.loss), read(&t.nll), read(&t.rate), read(&t.mse));
    let grads = tape.backward(t.loss)?;
    Ok(ImageResult { loss, nll, rate, mse, pixels: t.pixels, grads })
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Random crop with random flips.
pub fn random_patch<R: Rng>(img: &Plane<f64>, patch: usize, rng: &mut R) -> Result<Plane<f64>, Error> {
    if img.width < patch || img.height < patch {
        return Err(Error::Shape(format!("{}x{} image is smaller than a {patch} patch", img.width, img.height)));
    }
    let x0 = rng.random_range(0..=img.width - patch);
    let y0 = rng.random_range(0..=img.height - patch);
    let (fx, fy) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = Plane::new(patch, patch);
    for y in 0..patch {
        let sy = y0 + if fy { patch - 1 - y } else { y };
        for x in 0..patch {
            let sx = x0 + if fx { patch - 1 - x } else { x };
            out.data[y * patch + x] = img.data[sy * img.width + sx];
        }
    }
    Ok(out)
}

/// Optimiser state plus the data it iterates over.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    data: Vec<Plane<f64>>,
    recent: VecDeque<f64>,
}

impl Trainer {
    /// `data` holds centred single-channel planes.
    pub fn new(model: Model, config: TrainConfig, data: Vec<Plane<f64>>) -> Result<Self, Error> {
        let adam = AdamState::new(&model.store);
        Self::resume(model, adam, config, data)
    }

    pub fn resume(mut model: Model, adam: AdamState, config: TrainConfig, data: Vec<Plane<f64>>) -> Result<Self, Error> {
        config.validate(model.levels())?;
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if let Some(p) = data.iter().find(|p| p.width < config.patch || p.height < config.patch) {
            return Err(Error::Invalid(format!("{}x{} image is smaller than the patch", p.width, p.height)));
        }
        if adam.m.len() != model.store.len() {
            return Err(Error::ModelFormat("optimiser state does not match the model".into()));
        }
        model.config_hash = config.hash();
        Ok(Self { model, adam, config, data, recent: VecDeque::new() })
    }

    pub fn step_count(&self) -> usize {
        self.adam.step as usize
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.steps
    }

    /// Mean loss over the last [`TRAILING_WINDOW`] steps of this session.
    pub fn trailing_loss(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len().max(1) as f64
    }

    /// The batch used at `step`; depends only on the seed and the step.
    pub fn batch_samples(&self, step: usize) -> Result<Vec<TrainSample>, Error> {
        let mut rng = step_rng(self.config.seed, step);
        (0..self.config.batch)
            .map(|_| {
                let img = &self.data[rng.random_range(0..self.data.len())];
                let x = random_patch(img, self.config.patch, &mut rng)?;
                TrainSample::new(x, self.model.levels(), &mut rng)
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord, Error> {
        let step = self.step_count();
        let stage = self.config.stage(step);
        let samples = self.batch_samples(step)?;
        let lambda = self.config.lambda;
        let model = &self.model;
        let threads = self.config.threads.clamp(1, samples.len());
        let results: Vec<Result<ImageResult, Error>> = if threads == 1 {
            samples.iter().map(|s| image_step(model, s, lambda, stage.mode())).collect()
        } else {
            let chunk = samples.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = samples
                    .chunks(chunk)
                    .map(|c| {
                        scope.spawn(move || {
                            c.iter().map(|s| image_step(model, s, lambda, stage.mode())).collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
            })
        };
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = results.len() as f64;
        let mut rec = StepRecord { step, loss: 0.0, nll: 0.0, reg_mse: 0.0, bpp_est: 0.0 };
        for r in &results {
            rec.loss += r.loss / n;
            rec.nll += r.nll / r.pixels as f64 / n;
            rec.reg_mse += r.mse / n;
            rec.bpp_est += nats_to_bits(r.rate) / r.pixels as f64 / n;
        }
        if !rec.loss.is_finite() {
            let detail = results
                .iter()
                .enumerate()
                .map(|(i, r)| format!("image {i}: loss {} nll {} rate {} mse {}", r.loss, r.nll, r.rate, r.mse))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::NonFinite { step, detail });
        }
        self.model.store.zero_grads();
        for r in &results {
            self.model.store.accumulate(&r.grads, 1.0 / n);
        }
        let groups: Vec<Group> = self.model.store.iter().map(|(id, _)| self.model.group(id)).collect();
        adam_step(&mut self.model.store, &self.config.adam(), &mut self.adam, |id| stage.trains(groups[id.index()]));
        if stage == Stage::WarmStart {
            debug_assert_eq!(self.model.transform_mode(), TransformMode::Classical);
        }
        self.recent.push_back(rec.loss);
        if self.recent.len() > TRAILING_WINDOW {
            self.recent.pop_front();
        }
        Ok(rec)
    }

    /// Forward/inverse round trip of a random patch with the current weights.
    pub fn inversion_error(&self) -> Result<f64, Error> {
        let mut rng = step_rng(self.config.seed ^ 0x5eed, self.step_count());
        let img = &self.data[rng.random_range(0..self.data.len())];
        let x = random_patch(img, self.config.patch, &mut rng)?;
        let mode = self.config.stage(self.step_count().saturating_sub(1)).mode();
        let lifting = self.model.lifting();
        let y = lifting.forward_transform(&self.model.store, &x, self.model.levels(), mode)?;
        let back = lifting.inverse_transform(&self.model.store, &y, mode)?;
        Ok(x.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, Error> {
        let inversion_error = self.inversion_error()?;
        if inversion_error > 1e-9 {
            return Err(Error::Invalid(format!(
                "transform is no longer invertible at step {}: error {inversion_error:e}",
                self.step_count()
            )));
        }
        Ok(Checkpoint { step: self.step_count(), trailing_loss: self.trailing_loss(), inversion_error })
    }

    /// Runs until `config.steps`, reporting each step and checkpoint.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepRecord) -> Result<(), Error>,
        mut on_checkpoint: impl FnMut(&Trainer, &Checkpoint) -> Result<(), Error>,
    ) -> Result<Vec<Checkpoint>, Error> {
        let mut out = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            on_step(&rec)?;
            let done = self.step_count();
            let every = self.config.checkpoint_every;
            if (every > 0 && done % every == 0) || self.is_done() {
                let c = self.checkpoint()?;
                log::info!("step {done}: trailing loss {:.6}", c.trailing_loss);
                on_checkpoint(self, &c)?;
                out.push(c);
            }
        }
        Ok(out)
    }

    pub fn optimizer_bytes(&self) -> Result<Vec<u8>, Error> {
        optimizer_to_bytes(&self.model.store, &self.adam)
    }
}

/// Serialises Adam moments in the parameter-file format.
pub fn optimizer_to_bytes(store: &ParamStore, adam: &AdamState) -> Result<Vec<u8>, Error> {
    let mut s = ParamStore::new();
    s.insert("step", Tensor::scalar(adam.step as f64))?;
    for (id, p) in store.iter() {
        s.insert(format!("m/{}", p.name), adam.m[id.index()].clone())?;
        s.insert(format!("v/{}", p.name), adam.v[id.index()].clone())?;
    }
    let mut out = Vec::new();
    write_params(&s, &mut out)?;
    Ok(out)
}

pub fn optimizer_from_bytes(store: &ParamStore, bytes: &[u8]) -> Result<AdamState, Error> {
    let s = read_params(bytes).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let get = |name: &str, shape: &[usize]| -> Result<Tensor, Error> {
        let t = s.id(name).map(|id| s.value(id).clone()).ok_or_else(|| Error::ModelFormat(format!("missing {name}")))?;
        if t.shape() != shape {
            return Err(Error::ModelFormat(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let step = get("step", &[])?.item();
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(Error::ModelFormat(format!("bad step count {step}")));
    }
    let mut adam = AdamState::new(store);
    adam.step = step as u64;
    for (id, p) in store.iter() {
        adam.m[id.index()] = get(&format!("m/{}", p.name), p.value.shape())?;
        adam.v[id.index()] = get(&format!("v/{}", p.name), p.value.shape())?;
    }
    if s.len() != 1 + 2 * store.len() {
        return Err(Error::ModelFormat("optimiser state has extra entries".into()));
    }
    Ok(adam)
}

/// Path of the optimiser sidecar written next to a model file.
pub fn optimizer_path(model_path: &Path) -> std::path::PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".adam");
    s.into()
}
