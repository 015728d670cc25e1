//! All trainable parts of the codec together with their metadata.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::entropy::{ContextClass, ContextModel, CONTEXT_SIZE};
use crate::lifting::{plane_tensor, tensor_plane, Lifting, LiftingNets, TransformMode};
use crate::nn::{read_params, write_params, Eval, NnError, ParamId, ParamStore, Tensor};
use crate::posterior::{field_planes, GaussianField, PosteriorHeads};
use crate::pyramid::{band_level, Plane, QuantizedPyramid, SubbandPyramid};
use crate::Error;

/// Bumped whenever the parameter layout or any fixed constant changes.
pub const ARCH_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub context_size: usize,
    pub lifting_width: usize,
    pub posterior_width: usize,
    pub context_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { levels: 4, context_size: CONTEXT_SIZE, lifting_width: 16, posterior_width: 32, context_hidden: 64 }
    }
}

/// Parameter groups, used to freeze parts of the model during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Lifting,
    Posterior,
    Context,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: u64,
    pub store: ParamStore,
    lifting: Lifting,
    posterior: PosteriorHeads,
    context: ContextModel,
    groups: Vec<Group>,
}

fn group_map(store: &ParamStore, l: &Lifting, p: &PosteriorHeads, c: &ContextModel) -> Vec<Group> {
    let mut groups = vec![Group::Lifting; store.len()];
    for id in p.param_ids() {
        groups[id.index()] = Group::Posterior;
    }
    for id in c.param_ids() {
        groups[id.index()] = Group::Context;
    }
    debug_assert!(l.nets().param_ids().iter().all(|id| groups[id.index()] == Group::Lifting));
    groups
}

impl Model {
    /// Fresh model: CDF 9/7 transform, zero-output heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        if config.levels == 0 || config.levels > 8 || config.context_size % 2 == 0 {
            return Err(Error::Invalid(format!("unsupported model configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lifting = Lifting::new(LiftingNets::build(&mut store, config.lifting_width, &mut rng)?);
        let posterior = PosteriorHeads::build(&mut store, config.levels, config.posterior_width, &mut rng)?;
        let context = ContextModel::build(&mut store, config.context_size, config.context_hidden, &mut rng)?;
        let groups = group_map(&store, &lifting, &posterior, &context);
        Ok(Self { config, config_hash: 0, store, lifting, posterior, context, groups })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn lifting(&self) -> &Lifting {
        &self.lifting
    }

    pub fn posterior(&self) -> &PosteriorHeads {
        &self.posterior
    }

    pub fn context(&self) -> &ContextModel {
        &self.context
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.index()]
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.store.iter().map(|(id, _)| id).filter(|&id| self.group(id) == group).collect()
    }

    /// Classical when every residual network still outputs exactly zero.
    pub fn transform_mode(&self) -> TransformMode {
        let idle = self.lifting.nets().is_idle(&self.store);
        if idle {
            TransformMode::Classical
        } else {
            TransformMode::Learned
        }
    }

    pub fn forward_transform(&self, x: &Plane<f64>) -> Result<SubbandPyramid, Error> {
        self.lifting.forward_transform(&self.store, x, self.levels(), self.transform_mode())
    }

    pub fn inverse_transform(&self, p: &SubbandPyramid) -> Result<Plane<f64>, Error> {
        self.lifting.inverse_transform(&self.store, p, self.transform_mode())
    }

    /// `LL_{k-1}` from `LL_k` and the level-`k` details.
    pub fn next_reference(&self, ll: &Plane<f64>, details: [&Plane<f64>; 3]) -> Result<Plane<f64>, Error> {
        let mut g = Eval::new(&self.store);
        let t = [plane_tensor(ll), plane_tensor(details[0]), plane_tensor(details[1]), plane_tensor(details[2])];
        let out = self.lifting.inverse_level(&mut g, [&t[0], &t[1], &t[2], &t[3]], self.transform_mode())?;
        tensor_plane(out)
    }

    /// Reference approximation for every band: `None` for `LL_K`, `LL_k`
    /// for the level-`k` details.
    pub fn references(&self, p: &SubbandPyramid) -> Result<Vec<Option<Plane<f64>>>, Error> {
        p.validate()?;
        let k = p.levels;
        let mut out = vec![None];
        let mut ll = p.bands[0].clone();
        for level in (1..=k).rev() {
            let i = 1 + 3 * (k - level);
            for _ in 0..3 {
                out.push(Some(ll.clone()));
            }
            if level > 1 {
                ll = self.next_reference(&ll, [&p.bands[i], &p.bands[i + 1], &p.bands[i + 2]])?;
            }
        }
        Ok(out)
    }

    pub fn posterior_field(&self, yhat: &QuantizedPyramid) -> Result<GaussianField, Error> {
        let real = yhat.to_real();
        let refs = self.references(&real)?;
        let mut g = Eval::new(&self.store);
        let mut mean = real.clone();
        let mut scale = real.clone();
        for (b, band) in real.bands.iter().enumerate() {
            let bt = plane_tensor(band);
            let rt = refs[b].as_ref().map(plane_tensor);
            let raw = self.posterior.raw(&mut g, b, &bt, rt.as_ref())?;
            let (m, s) = field_planes(band, &raw);
            mean.bands[b] = m;
            scale.bands[b] = s;
        }
        Ok(GaussianField { mean, scale })
    }

    /// `-sum log2 p(v)` under the floored coding probabilities.
    pub fn rate_estimate(&self, yhat: &QuantizedPyramid) -> Result<f64, Error> {
        let real = yhat.to_real();
        let refs = self.references(&real)?;
        let k = yhat.levels;
        let mut bits = 0.0;
        for (b, band) in yhat.bands.iter().enumerate() {
            let class = ContextClass::of_band(k, b);
            let mix = self.context.band_mixtures(&self.store, class, &real.bands[b], refs[b].as_ref(), band_level(k, b), k);
            for (&v, m) in band.data.iter().zip(&mix) {
                bits += crate::entropy::symbol_bits(v, m);
            }
        }
        Ok(bits)
    }

    fn meta_store(&self) -> Result<ParamStore, NnError> {
        let mut all = self.store.clone();
        let c = &self.config;
        let put = |s: &mut ParamStore, name: &str, v: Vec<f64>| {
            s.insert(format!("{META_PREFIX}{name}"), Tensor::new(vec![v.len()], v)?).map(|_| ())
        };
        put(&mut all, "arch_version", vec![ARCH_VERSION as f64])?;
        put(&mut all, "levels", vec![c.levels as f64])?;
        put(&mut all, "context_size", vec![c.context_size as f64])?;
        put(&mut all, "widths", vec![c.lifting_width as f64, c.posterior_width as f64, c.context_hidden as f64])?;
        let h = self.config_hash;
        put(&mut all, "config_hash", (0..4).map(|i| ((h >> (16 * i)) & 0xFFFF) as f64).collect())?;
        Ok(all)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let mut buf = Vec::new();
        write_params(&self.meta_store()?, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let stored = read_params(bytes).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let meta = |name: &str| -> Result<Vec<f64>, Error> {
            let id = stored
                .id(&format!("{META_PREFIX}{name}"))
                .ok_or_else(|| Error::ModelFormat(format!("missing metadata `{name}`")))?;
            Ok(stored.value(id).data().to_vec())
        };
        let arch = meta("arch_version")?;
        if arch != [ARCH_VERSION as f64] {
            return Err(Error::ModelFormat(format!("unsupported architecture version {arch:?}")));
        }
        let widths = meta("widths")?;
        let config = ModelConfig {
            levels: meta("levels")?.first().copied().unwrap_or(0.0) as usize,
            context_size: meta("context_size")?.first().copied().unwrap_or(0.0) as usize,
            lifting_width: widths.first().copied().unwrap_or(0.0) as usize,
            posterior_width: widths.get(1).copied().unwrap_or(0.0) as usize,
            context_hidden: widths.get(2).copied().unwrap_or(0.0) as usize,
        };
        let hash = meta("config_hash")?;
        let config_hash = hash.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
        // rebuild the reference layout and copy values over, checking shapes
        let mut model = Model::new(config, 0)?;
        model.config_hash = config_hash;
        for p in model.store.iter_mut() {
            let id = stored.id(&p.name).ok_or_else(|| Error::ModelFormat(format!("missing parameter `{}`", p.name)))?;
            let v = stored.value(id);
            if v.shape() != p.value.shape() {
                return Err(Error::ModelFormat(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            if !v.is_finite() {
                return Err(Error::ModelFormat(format!("parameter `{}` holds non-finite values", p.name)));
            }
            p.value = v.clone();
        }
        let expected = model.store.len() + 5;
        if stored.len() != expected {
            return Err(Error::ModelFormat(format!("model file has {} tensors, expected {expected}", stored.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// First 16 bytes of the SHA-256 of the serialised model.
    pub fn fingerprint(&self) -> Result<[u8; 16], Error> {
        Ok(fingerprint_bytes(&self.to_bytes()?))
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> [u8; 16] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}
