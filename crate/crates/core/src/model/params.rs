use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, NormKind, ResidualVariant};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Internal tensor names. Layers are 1-based here and 0-based in the name.
pub mod names {
    pub const EMBED: &str = "embed_tokens";
    pub const FINAL_NORM: &str = "final_norm";
    pub const FINAL_NORM_BIAS: &str = "final_norm_bias";
    pub const LM_HEAD: &str = "lm_head";

    fn layer_prefix(layer: usize) -> String {
        format!("layers.{}", layer - 1)
    }

    fn ffn_prefix(layer: usize, expert: Option<usize>) -> String {
        match expert {
            Some(e) => format!("{}.moe.experts.{e}", layer_prefix(layer)),
            None => format!("{}.ffn", layer_prefix(layer)),
        }
    }

    pub fn ffn_gate(layer: usize, expert: Option<usize>) -> String {
        format!("{}.gate_proj", ffn_prefix(layer, expert))
    }

    pub fn ffn_up(layer: usize, expert: Option<usize>) -> String {
        format!("{}.up_proj", ffn_prefix(layer, expert))
    }

    pub fn ffn_down(layer: usize, expert: Option<usize>) -> String {
        format!("{}.down_proj", ffn_prefix(layer, expert))
    }

    pub fn router(layer: usize) -> String {
        format!("{}.moe.router", layer_prefix(layer))
    }

    pub fn attn(layer: usize, proj: &str) -> String {
        format!("{}.attn.{proj}", layer_prefix(layer))
    }

    /// `norm` is one of `attn_norm`, `ffn_norm`, `post_attn_norm`, `post_ffn_norm`.
    pub fn norm(layer: usize, norm: &str) -> String {
        format!("{}.{norm}", layer_prefix(layer))
    }

    pub fn norm_bias(layer: usize, norm: &str) -> String {
        format!("{}.{norm}_bias", layer_prefix(layer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    /// Attention or FFN projection, stored `[out × in]`.
    Linear,
    Router,
    NormGain,
    NormBias,
    LmHead,
}

/// One entry of the architecture schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Name with `{layer}` (0-based) and `{expert}` placeholders.
    pub template: String,
    pub layer: Option<usize>,
    pub expert: Option<usize>,
}

/// Every tensor the architecture needs, in a fixed order.
pub fn param_schema(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.hidden_dim;
    let q_dim = config.num_heads * config.head_dim;
    let kv_dim = config.kv_dim();
    let mut out = Vec::new();
    let mut push = |template: String, shape: Vec<usize>, kind, layer: Option<usize>, expert: Option<usize>| {
        let mut name = template.clone();
        if let Some(l) = layer {
            name = name.replace("{layer}", &l.to_string());
        }
        if let Some(e) = expert {
            name = name.replace("{expert}", &e.to_string());
        }
        out.push(ParamSpec {
            name,
            shape,
            kind,
            template,
            layer,
            expert,
        });
    };
    let layernorm = config.norm == NormKind::Layernorm;

    push(
        names::EMBED.into(),
        vec![config.vocab_size, d],
        ParamKind::Embedding,
        None,
        None,
    );
    let mut norms = vec!["attn_norm", "ffn_norm"];
    if config.residual == ResidualVariant::SandwichLn {
        norms.extend(["post_attn_norm", "post_ffn_norm"]);
    }
    for l in 0..config.num_layers {
        let li = Some(l);
        for n in &norms {
            push(format!("layers.{{layer}}.{n}"), vec![d], ParamKind::NormGain, li, None);
            if layernorm {
                push(
                    format!("layers.{{layer}}.{n}_bias"),
                    vec![d],
                    ParamKind::NormBias,
                    li,
                    None,
                );
            }
        }
        for (proj, shape) in [
            ("q_proj", vec![q_dim, d]),
            ("k_proj", vec![kv_dim, d]),
            ("v_proj", vec![kv_dim, d]),
            ("o_proj", vec![d, q_dim]),
        ] {
            push(
                format!("layers.{{layer}}.attn.{proj}"),
                shape,
                ParamKind::Linear,
                li,
                None,
            );
        }
        let ffn_shapes = [
            ("gate_proj", vec![config.ffn_dim, d]),
            ("up_proj", vec![config.ffn_dim, d]),
            ("down_proj", vec![d, config.ffn_dim]),
        ];
        match &config.moe {
            Some(moe) if moe.layers.contains(&(l + 1)) => {
                push(
                    "layers.{layer}.moe.router".into(),
                    vec![moe.num_experts, d],
                    ParamKind::Router,
                    li,
                    None,
                );
                for e in 0..moe.num_experts {
                    for (proj, shape) in &ffn_shapes {
                        push(
                            format!("layers.{{layer}}.moe.experts.{{expert}}.{proj}"),
                            shape.clone(),
                            ParamKind::Linear,
                            li,
                            Some(e),
                        );
                    }
                }
            }
            _ => {
                for (proj, shape) in &ffn_shapes {
                    push(
                        format!("layers.{{layer}}.ffn.{proj}"),
                        shape.clone(),
                        ParamKind::Linear,
                        li,
                        None,
                    );
                }
            }
        }
    }
    push(names::FINAL_NORM.into(), vec![d], ParamKind::NormGain, None, None);
    if layernorm {
        push(names::FINAL_NORM_BIAS.into(), vec![d], ParamKind::NormBias, None, None);
    }
    push(
        names::LM_HEAD.into(),
        vec![config.vocab_size, d],
        ParamKind::LmHead,
        None,
        None,
    );
    out
}

/// Borrowed view of one gated FFN.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights<'a, T> {
    /// `[d_ff × d]`
    pub gate: &'a Tensor<T>,
    /// `[d_ff × d]`
    pub up: &'a Tensor<T>,
    /// `[d × d_ff]`
    pub down: &'a Tensor<T>,
}

/// Named map of every model tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Random initialization: projections, embeddings and head from
    /// `N(0, std²)`, norm gains at one and biases at zero.
    pub fn random(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std: {e}")))?;
        let mut store = Self::new();
        for spec in param_schema(config) {
            let t = match spec.kind {
                ParamKind::NormGain => Tensor::full(spec.shape, T::one()),
                ParamKind::NormBias => Tensor::zeros(spec.shape),
                _ => Tensor::from_fn(spec.shape, |_| T::of(normal.sample(&mut rng))),
            };
            store.tensors.insert(spec.name, t);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| {
            Error::Checkpoint(CheckpointError::MissingTensor {
                tensor: name.to_string(),
            })
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| {
            Error::Checkpoint(CheckpointError::MissingTensor {
                tensor: name.to_string(),
            })
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// FFN weights of 1-based `layer`, or of `expert` in an MoE layer.
    pub fn ffn(&self, layer: usize, expert: Option<usize>) -> Result<FfnWeights<'_, T>> {
        Ok(FfnWeights {
            gate: self.get(&names::ffn_gate(layer, expert))?,
            up: self.get(&names::ffn_up(layer, expert))?,
            down: self.get(&names::ffn_down(layer, expert))?,
        })
    }

    /// Checks that the store holds exactly the schema's tensors with the
    /// schema's shapes.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let schema = param_schema(config);
        for spec in &schema {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    tensor: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        if self.tensors.len() != schema.len() {
            let known: std::collections::BTreeSet<&str> = schema.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::Schema(format!("unexpected tensor `{extra}`")).into());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and raw element bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Tensors that differ bitwise from `other`, each with the rows (first
    /// dimension) that changed.
    pub fn diff(&self, other: &Self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, a) in &self.tensors {
            match other.tensors.get(name) {
                Some(b) if a.shape() == b.shape() => {
                    if a.bitwise_eq(b) {
                        continue;
                    }
                    let rows: Vec<usize> = (0..a.rows())
                        .filter(|&r| a.row(r).iter().zip(b.row(r)).any(|(x, y)| x.bits() != y.bits()))
                        .collect();
                    out.push((name.clone(), rows));
                }
                _ => out.push((name.clone(), (0..a.rows()).collect())),
            }
        }
        for name in other.tensors.keys() {
            if !self.tensors.contains_key(name) {
                out.push((name.clone(), Vec::new()));
            }
        }
        out
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|o| v.bitwise_eq(o)))
    }
}
