//! Low-rank adapters on the base projections.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::safetensors::{self, Container, RawTensor, StorageDtype};
use crate::checkpoint::write_atomic;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{
    build_forward, param_schema, AdapterVars, ForwardOptions, ModelConfig, ParamKind, ParamVars, ParameterStore,
};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// `A [r × in]` and `B [out × r]` for one base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet<T> {
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by base tensor name.
    pub adapters: BTreeMap<String, LoraAdapter<T>>,
}

/// Base tensors that receive adapters: every attention and FFN projection.
/// Embedding, output head, norms and routers are excluded.
pub fn lora_targets(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    param_schema(config)
        .into_iter()
        .filter(|s| s.kind == ParamKind::Linear)
        .map(|s| (s.name, s.shape[0], s.shape[1]))
        .collect()
}

impl<T: Scalar> LoraAdapterSet<T> {
    /// `B = 0`; `A` uniform in `±1/√in` from `rng`.
    pub fn init(config: &ModelConfig, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 || !(alpha > 0.0) {
            return Err(Error::Config(format!(
                "lora needs rank >= 1 and alpha > 0, got {rank}, {alpha}"
            )));
        }
        let mut adapters = BTreeMap::new();
        for (name, out, inp) in lora_targets(config) {
            let bound = 1.0 / (inp as f64).sqrt();
            let a = Tensor::from_fn(vec![rank, inp], |_| T::of(rng.gen_range(-bound..bound)));
            let b = Tensor::zeros(vec![out, rank]);
            adapters.insert(name, LoraAdapter { a, b });
        }
        Ok(Self { rank, alpha, adapters })
    }

    pub fn init_seeded(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::init(config, rank, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(|a| a.a.numel() + a.b.numel()).sum()
    }

    /// Adds every adapter to `graph`.
    pub fn attach(&self, graph: &mut Graph<T>, trainable: bool) -> AdapterVars<T> {
        let pairs = self
            .adapters
            .iter()
            .map(|(name, ad)| {
                let a = graph.leaf(ad.a.clone(), trainable);
                let b = graph.leaf(ad.b.clone(), trainable);
                (name.clone(), (a, b))
            })
            .collect::<BTreeMap<String, (Var, Var)>>();
        AdapterVars {
            pairs,
            scale: T::of(self.scale()),
        }
    }

    /// Checks adapter shapes against the base parameters.
    pub fn validate(&self, params: &ParameterStore<T>) -> Result<()> {
        for (name, ad) in &self.adapters {
            let w = params.get(name)?;
            let (out, inp) = w.dims2()?;
            if ad.a.shape() != [self.rank, inp] || ad.b.shape() != [out, self.rank] {
                return Err(Error::shape(
                    "lora adapter",
                    w.shape(),
                    &[ad.b.shape()[0], ad.a.shape()[1]],
                ));
            }
        }
        Ok(())
    }

    /// `W + (α / r) · B A` for every adapted weight.
    pub fn merge(&self, params: &ParameterStore<T>) -> Result<ParameterStore<T>> {
        self.validate(params)?;
        let mut out = params.clone();
        let s = T::of(self.scale());
        for (name, ad) in &self.adapters {
            if ad.b.data().iter().all(|v| *v == T::zero()) {
                continue;
            }
            let delta = kernels::matmul(&ad.b, &ad.a)?;
            let w = out.get_mut(name)?;
            for (wi, di) in w.data_mut().iter_mut().zip(delta.data()) {
                *wi = *wi + s * *di;
            }
        }
        Ok(out)
    }

    /// Logits of the base model with adapters applied on the fly.
    pub fn logits(&self, config: &ModelConfig, params: &ParameterStore<T>, ids: &[u32]) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let pv = ParamVars::new(&mut graph, params, false);
        let av = self.attach(&mut graph, false);
        let mut opts = ForwardOptions {
            adapters: Some(&av),
            dropout_rng: None,
        };
        let nodes = build_forward(&mut graph, config, &pv, ids, &mut opts)?;
        Ok(graph.value(nodes.logits).clone())
    }
}

impl LoraAdapterSet<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, ad) in &self.adapters {
            for (suffix, t) in [("lora_a", &ad.a), ("lora_b", &ad.b)] {
                tensors.insert(
                    format!("{name}.{suffix}"),
                    RawTensor {
                        dtype: StorageDtype::F32,
                        shape: t.shape().to_vec(),
                        bytes: safetensors::encode_f32(StorageDtype::F32, t.data()),
                    },
                );
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("lora_rank".to_string(), self.rank.to_string());
        meta.insert("lora_alpha".to_string(), self.alpha.to_string());
        write_atomic(path, &safetensors::serialize(&tensors, &meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Container::parse(bytes)?;
        let meta = |k: &str| {
            c.metadata()
                .get(k)
                .ok_or_else(|| CheckpointError::Schema(format!("adapter file lacks `{k}` metadata")))
        };
        let rank: usize = meta("lora_rank")?
            .parse()
            .map_err(|_| CheckpointError::Schema("bad lora_rank".into()))?;
        let alpha: f64 = meta("lora_alpha")?
            .parse()
            .map_err(|_| CheckpointError::Schema("bad lora_alpha".into()))?;
        let mut adapters = BTreeMap::new();
        for name in c.entries().keys() {
            if let Some(base) = name.strip_suffix(".lora_a") {
                let b = c.tensor_f32(&format!("{base}.lora_b"))?;
                adapters.insert(
                    base.to_string(),
                    LoraAdapter {
                        a: c.tensor_f32(name)?,
                        b,
                    },
                );
            }
        }
        Ok(Self { rank, alpha, adapters })
    }
}
