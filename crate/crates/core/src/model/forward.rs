use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NormKind, Positional, ResidualVariant};
use super::params::{names, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// Graph leaves for every base tensor.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new<T: Scalar>(graph: &mut Graph<T>, params: &ParameterStore<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| {
            Error::Checkpoint(crate::error::CheckpointError::MissingTensor {
                tensor: name.to_string(),
            })
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Low-rank adapters attached to base projections, keyed by base tensor
/// name: `y = x Wᵀ + scale · (x Aᵀ) Bᵀ`.
pub struct AdapterVars<T> {
    pub pairs: BTreeMap<String, (Var, Var)>,
    pub scale: T,
}

/// Graph nodes of one FFN block.
#[derive(Debug, Clone)]
pub enum FfnNodes {
    Dense {
        inter: Var,
    },
    Moe {
        router_probs: Var,
        gate: Var,
        /// `(expert, intermediate state)` for every expert some token routed to.
        experts: Vec<(usize, Var)>,
    },
}

/// Graph nodes of the tracked states of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub h_prev: Var,
    pub ln1: Var,
    pub attn_out: Var,
    pub post_attn: Option<Var>,
    pub h_hat: Var,
    pub ln2: Var,
    pub ffn_out: Var,
    pub post_ffn: Option<Var>,
    pub h: Var,
    pub ffn: FfnNodes,
    /// Post-softmax attention `[T × T]`, one per head.
    pub attn_probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub embed: Var,
    pub layers: Vec<LayerNodes>,
    pub final_norm: Var,
    pub logits: Var,
}

/// Knobs for [`build_forward`].
#[derive(Default)]
pub struct ForwardOptions<'a, T> {
    pub adapters: Option<&'a AdapterVars<T>>,
    /// Enables training-mode residual dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

pub(crate) fn check_ids(config: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Input("token sequence must not be empty".into()));
    }
    if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            position,
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

struct Builder<'a, 'o, T> {
    graph: &'a mut Graph<T>,
    config: &'a ModelConfig,
    pv: &'a ParamVars,
    opts: &'a mut ForwardOptions<'o, T>,
}

impl<T: Scalar> Builder<'_, '_, T> {
    fn linear(&mut self, x: Var, weight: &str) -> Result<Var> {
        let w = self.pv.get(weight)?;
        let y = self.graph.matmul_bt(x, w)?;
        match self
            .opts
            .adapters
            .and_then(|a| a.pairs.get(weight).map(|p| (*p, a.scale)))
        {
            Some(((a, b), s)) => {
                let xa = self.graph.matmul_bt(x, a)?;
                let xab = self.graph.matmul_bt(xa, b)?;
                let delta = self.graph.scale(xab, s);
                self.graph.add(y, delta)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, gain: &str, bias: &str) -> Result<Var> {
        let g = self.pv.get(gain)?;
        match self.config.norm {
            NormKind::Rmsnorm => self.graph.rmsnorm(x, g, self.config.norm_eps),
            NormKind::Layernorm => {
                let b = self.pv.get(bias)?;
                self.graph.layernorm(x, g, b, self.config.norm_eps)
            }
        }
    }

    fn layer_norm(&mut self, x: Var, layer: usize, which: &str) -> Result<Var> {
        self.norm(x, &names::norm(layer, which), &names::norm_bias(layer, which))
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = match self.config.residual {
            ResidualVariant::ResidualDropout { p } if p > 0.0 => p,
            _ => return x,
        };
        let Some(rng) = self.opts.dropout_rng.as_deref_mut() else {
            return x;
        };
        let shape = self.graph.value(x).shape().to_vec();
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() >= p { keep } else { T::zero() });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m).expect("dropout mask matches its input")
    }

    fn attention(&mut self, x: Var, layer: usize) -> Result<(Var, Vec<Var>)> {
        let c = self.config;
        let hd = c.head_dim;
        let mut q = self.linear(x, &names::attn(layer, "q_proj"))?;
        let mut k = self.linear(x, &names::attn(layer, "k_proj"))?;
        let v = self.linear(x, &names::attn(layer, "v_proj"))?;
        if let Positional::Rope { theta } = c.positional {
            q = self.graph.rope(q, c.num_heads, hd, theta, 0)?;
            k = self.graph.rope(k, c.kv_heads(), hd, theta, 0)?;
        }
        let group = c.num_heads / c.kv_heads();
        let inv_sqrt = T::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(c.num_heads);
        let mut probs = Vec::with_capacity(c.num_heads);
        for h in 0..c.num_heads {
            let kvh = h / group;
            let qh = self.graph.slice_cols(q, h * hd, hd)?;
            let kh = self.graph.slice_cols(k, kvh * hd, hd)?;
            let vh = self.graph.slice_cols(v, kvh * hd, hd)?;
            let scores = self.graph.matmul_bt(qh, kh)?;
            let scores = self.graph.scale(scores, inv_sqrt);
            let p = self.graph.causal_softmax(scores)?;
            heads.push(self.graph.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            self.graph.concat_cols(&heads)?
        };
        Ok((self.linear(merged, &names::attn(layer, "o_proj"))?, probs))
    }

    fn dense_ffn(&mut self, x: Var, layer: usize, expert: Option<usize>) -> Result<(Var, Var)> {
        let g = self.linear(x, &names::ffn_gate(layer, expert))?;
        let u = self.linear(x, &names::ffn_up(layer, expert))?;
        let act = self.graph.silu(g);
        let inter = self.graph.mul(act, u)?;
        let out = self.linear(inter, &names::ffn_down(layer, expert))?;
        Ok((inter, out))
    }

    fn ffn(&mut self, x: Var, layer: usize) -> Result<(FfnNodes, Var)> {
        let Some(moe) = self.config.moe.as_ref().filter(|m| m.layers.contains(&layer)) else {
            let (inter, out) = self.dense_ffn(x, layer, None)?;
            return Ok((FfnNodes::Dense { inter }, out));
        };
        let num_experts = moe.num_experts;
        let router = self.pv.get(&names::router(layer))?;
        let logits = self.graph.matmul_bt(x, router)?;
        let router_probs = self.graph.softmax_lastdim(logits);
        let gate = self.graph.top2_gate(router_probs)?;
        let mut experts = Vec::new();
        let mut total: Option<Var> = None;
        for e in 0..num_experts {
            let gv = self.graph.value(gate);
            let used = (0..gv.rows()).any(|t| gv.row(t)[e] != T::zero());
            if !used {
                continue;
            }
            let (inter, out) = self.dense_ffn(x, layer, Some(e))?;
            let weighted = self.graph.row_scale(out, gate, e)?;
            total = Some(match total {
                Some(acc) => self.graph.add(acc, weighted)?,
                None => weighted,
            });
            experts.push((e, inter));
        }
        let out = total.expect("top-2 routing selects at least one expert");
        Ok((
            FfnNodes::Moe {
                router_probs,
                gate,
                experts,
            },
            out,
        ))
    }

    fn check_finite(&self, v: Var, layer: usize) -> Result<()> {
        if self.graph.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NumericFault { layer })
        }
    }

    fn decoder_layer(&mut self, h_prev: Var, layer: usize) -> Result<LayerNodes> {
        let sandwich = self.config.residual == ResidualVariant::SandwichLn;
        let ln1 = self.layer_norm(h_prev, layer, "attn_norm")?;
        let (attn_out, attn_probs) = self.attention(ln1, layer)?;
        let post_attn = if sandwich {
            Some(self.layer_norm(attn_out, layer, "post_attn_norm")?)
        } else {
            None
        };
        let branch = self.dropout(post_attn.unwrap_or(attn_out));
        let h_hat = self.graph.add(h_prev, branch)?;
        let ln2 = self.layer_norm(h_hat, layer, "ffn_norm")?;
        let (ffn, ffn_out) = self.ffn(ln2, layer)?;
        let post_ffn = if sandwich {
            Some(self.layer_norm(ffn_out, layer, "post_ffn_norm")?)
        } else {
            None
        };
        let branch = self.dropout(post_ffn.unwrap_or(ffn_out));
        let h = self.graph.add(h_hat, branch)?;
        self.check_finite(h, layer)?;
        Ok(LayerNodes {
            h_prev,
            ln1,
            attn_out,
            post_attn,
            h_hat,
            ln2,
            ffn_out,
            post_ffn,
            h,
            ffn,
            attn_probs,
        })
    }
}

/// Records the full forward pass for `ids` on `graph`.
pub fn build_forward<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    pv: &ParamVars,
    ids: &[u32],
    opts: &mut ForwardOptions<'_, T>,
) -> Result<ForwardNodes> {
    check_ids(config, ids)?;
    let mut b = Builder {
        graph,
        config,
        pv,
        opts,
    };
    let embed_table = b.pv.get(names::EMBED)?;
    let embed = b.graph.gather_rows(embed_table, ids)?;
    b.check_finite(embed, 0)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut h = embed;
    for layer in 1..=config.num_layers {
        let nodes = b.decoder_layer(h, layer)?;
        h = nodes.h;
        layers.push(nodes);
    }
    let final_norm = b.norm(h, names::FINAL_NORM, names::FINAL_NORM_BIAS)?;
    let head = b.pv.get(names::LM_HEAD)?;
    let logits = b.graph.matmul_bt(final_norm, head)?;
    b.check_finite(logits, config.num_layers + 1)?;
    Ok(ForwardNodes {
        embed,
        layers,
        final_norm,
        logits,
    })
}

/// Inference forward: logits `[T × V]`. Residual dropout is disabled.
pub fn forward<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let pv = ParamVars::new(&mut graph, params, false);
    let nodes = build_forward(&mut graph, config, &pv, ids, &mut ForwardOptions::default())?;
    Ok(graph.value(nodes.logits).clone())
}

/// A model bound to its weights.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ParameterStore<T>,
}

impl<'a, T: Scalar> Model<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParameterStore<T>) -> Self {
        Self { config, params }
    }

    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>> {
        forward(self.config, self.params, ids)
    }
}

/// Intermediate state `SiLU(W_gate x) ⊙ W_up x` of one FFN block.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnIntermediate<T> {
    Dense(Vec<T>),
    Moe {
        router_probs: Vec<T>,
        selected: [usize; 2],
        /// Intermediate state of each routed expert, in routing order.
        experts: Vec<(usize, Vec<T>)>,
    },
}

fn gated_intermediate<T: Scalar>(gate: &Tensor<T>, up: &Tensor<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let g = kernels::matmul_bt(x, gate)?;
    let u = kernels::matmul_bt(x, up)?;
    Ok(kernels::mul(&kernels::silu(&g), &u)?.into_vec())
}

/// FFN intermediate state of 1-based `layer` for an already-normalized
/// input vector `x`.
pub fn ffn_intermediate<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    layer: usize,
    x: &[T],
) -> Result<FfnIntermediate<T>> {
    if layer == 0 || layer > config.num_layers {
        return Err(Error::Input(format!(
            "layer {layer} outside [1, {}]",
            config.num_layers
        )));
    }
    if x.len() != config.hidden_dim {
        return Err(Error::shape("ffn_intermediate", &[x.len()], &[config.hidden_dim]));
    }
    let xt = Tensor::matrix(1, x.len(), x.to_vec());
    if config.is_moe_layer(layer) {
        let (router_probs, selected) = moe_route(params.get(&names::router(layer))?, x)?;
        let mut experts = Vec::with_capacity(2);
        for e in selected {
            let w = params.ffn(layer, Some(e))?;
            experts.push((e, gated_intermediate(w.gate, w.up, &xt)?));
        }
        Ok(FfnIntermediate::Moe {
            router_probs,
            selected,
            experts,
        })
    } else {
        let w = params.ffn(layer, None)?;
        Ok(FfnIntermediate::Dense(gated_intermediate(w.gate, w.up, &xt)?))
    }
}

/// Router probabilities `softmax(R x)` and the top-2 experts (ties to the
/// lower index). `router` is `[num_experts × d]`.
pub fn moe_route<T: Scalar>(router: &Tensor<T>, x: &[T]) -> Result<(Vec<T>, [usize; 2])> {
    let (e, d) = router.dims2()?;
    if e < 2 {
        return Err(Error::Config(format!("moe routing needs at least 2 experts, got {e}")));
    }
    if d != x.len() {
        return Err(Error::shape("moe_route", router.shape(), &[x.len()]));
    }
    let logits = kernels::matmul_bt(&Tensor::matrix(1, d, x.to_vec()), router)?;
    let probs = kernels::softmax_lastdim(&logits).into_vec();
    let top = kernels::top2(&probs)?;
    Ok((probs, top))
}
