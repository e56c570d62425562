//! Per-layer state capture at one token position and the magnitude
//! statistics computed from it.
//!
//! Tracing runs the ordinary forward graph and copies node values out
//! afterwards, so traced logits are bitwise identical to [`forward`].
//!
//! [`forward`]: crate::model::forward

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_forward, FfnNodes, ForwardOptions, ModelConfig, ParamVars, ParameterStore};
use crate::tensor::{kernels, Graph, Scalar, Tensor};

/// Routing details of an MoE layer at the traced position.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeTrace<T> {
    pub router_probs: Vec<T>,
    pub selected: [usize; 2],
    /// Router argmax; its intermediate state is the one recorded.
    pub probed_expert: usize,
}

/// States of one decoder layer at the traced position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    /// 1-based.
    pub layer: usize,
    pub h_prev: Vec<T>,
    pub ln1: Vec<T>,
    pub attn_out: Vec<T>,
    pub post_attn: Option<Vec<T>>,
    pub h_hat: Vec<T>,
    pub ln2: Vec<T>,
    pub ffn_out: Vec<T>,
    pub post_ffn: Option<Vec<T>>,
    pub h: Vec<T>,
    /// FFN intermediate state `SiLU(W_gate x) ⊙ W_up x`.
    pub inter: Vec<T>,
    pub moe: Option<MoeTrace<T>>,
    /// Post-softmax attention over the whole sequence, one `[T × T]` per head.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTrace<T> {
    pub position: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerTrace<T>>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    HPrev,
    Ln1,
    AttnOut,
    HHat,
    Ln2,
    FfnOut,
    H,
    Inter,
}

impl StateKind {
    pub const ALL: [StateKind; 8] = [
        StateKind::HPrev,
        StateKind::Ln1,
        StateKind::AttnOut,
        StateKind::HHat,
        StateKind::Ln2,
        StateKind::FfnOut,
        StateKind::H,
        StateKind::Inter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::HPrev => "h_prev",
            StateKind::Ln1 => "ln1",
            StateKind::AttnOut => "attn_out",
            StateKind::HHat => "h_hat",
            StateKind::Ln2 => "ln2",
            StateKind::FfnOut => "ffn_out",
            StateKind::H => "h",
            StateKind::Inter => "inter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl<T: Scalar> LayerTrace<T> {
    pub fn state(&self, kind: StateKind) -> &[T] {
        match kind {
            StateKind::HPrev => &self.h_prev,
            StateKind::Ln1 => &self.ln1,
            StateKind::AttnOut => &self.attn_out,
            StateKind::HHat => &self.h_hat,
            StateKind::Ln2 => &self.ln2,
            StateKind::FfnOut => &self.ffn_out,
            StateKind::H => &self.h,
            StateKind::Inter => &self.inter,
        }
    }
}

/// Runs the model on `ids` and records every tracked state at `position`.
pub fn trace_forward<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    ids: &[u32],
    position: usize,
) -> Result<StateTrace<T>> {
    if position >= ids.len() {
        return Err(Error::Input(format!(
            "trace position {position} outside a sequence of length {}",
            ids.len()
        )));
    }
    let mut graph = Graph::new();
    let pv = ParamVars::new(&mut graph, params, false);
    let nodes = build_forward(&mut graph, config, &pv, ids, &mut ForwardOptions::default())?;
    let row = |v| graph.value(v).row(position).to_vec();

    let mut layers = Vec::with_capacity(nodes.layers.len());
    for (i, ln) in nodes.layers.iter().enumerate() {
        let (inter, moe) = match &ln.ffn {
            FfnNodes::Dense { inter } => (row(*inter), None),
            FfnNodes::Moe {
                router_probs, experts, ..
            } => {
                let probs = row(*router_probs);
                let selected = kernels::top2(&probs)?;
                let probed = selected[0];
                let inter = experts
                    .iter()
                    .find(|(e, _)| *e == probed)
                    .map(|(_, v)| row(*v))
                    .expect("the router argmax expert is always evaluated");
                (
                    inter,
                    Some(MoeTrace {
                        router_probs: probs,
                        selected,
                        probed_expert: probed,
                    }),
                )
            }
        };
        layers.push(LayerTrace {
            layer: i + 1,
            h_prev: row(ln.h_prev),
            ln1: row(ln.ln1),
            attn_out: row(ln.attn_out),
            post_attn: ln.post_attn.map(row),
            h_hat: row(ln.h_hat),
            ln2: row(ln.ln2),
            ffn_out: row(ln.ffn_out),
            post_ffn: ln.post_ffn.map(row),
            h: row(ln.h),
            inter,
            moe,
            attention: ln.attn_probs.iter().map(|&p| graph.value(p).clone()).collect(),
        });
    }
    Ok(StateTrace {
        position,
        seq_len: ids.len(),
        logits: graph.value(nodes.logits).clone(),
        layers,
    })
}

/// Top-3 absolute values (padded with zeros) and the lower-middle median
/// of the absolute values.
pub fn magnitude_stats(values: &[f64]) -> ([f64; 3], f64) {
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    let mut top = [0.0; 3];
    for (slot, v) in top.iter_mut().zip(&abs) {
        *slot = *v;
    }
    let median = if abs.is_empty() {
        0.0
    } else {
        // Descending order, so the lower-middle element sits at n / 2.
        abs[abs.len() / 2]
    };
    (top, median)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub state_kind: StateKind,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub rows: Vec<ProfileRow>,
}

impl MagnitudeProfile {
    pub fn get(&self, layer: usize, kind: StateKind) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.layer == layer && r.state_kind == kind)
    }

    /// Rows of one state kind in layer order.
    pub fn series(&self, kind: StateKind) -> Vec<&ProfileRow> {
        self.rows.iter().filter(|r| r.state_kind == kind).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,state_kind,top1,top2,top3,median\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer, r.state_kind, r.top1, r.top2, r.top3, r.median
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Input(format!("profile CSV line {}: `{line}`", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(ProfileRow {
                layer: f[0].parse().map_err(|_| bad())?,
                state_kind: StateKind::parse(f[1]).ok_or_else(bad)?,
                top1: num(f[2])?,
                top2: num(f[3])?,
                top3: num(f[4])?,
                median: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }
}

pub fn magnitude_profile<T: Scalar>(trace: &StateTrace<T>) -> MagnitudeProfile {
    let mut rows = Vec::with_capacity(trace.layers.len() * StateKind::ALL.len());
    for lt in &trace.layers {
        for kind in StateKind::ALL {
            let v: Vec<f64> = lt.state(kind).iter().map(|x| x.as_f64()).collect();
            let (top, median) = magnitude_stats(&v);
            rows.push(ProfileRow {
                layer: lt.layer,
                state_kind: kind,
                top1: top[0],
                top2: top[1],
                top3: top[2],
                median,
            });
        }
    }
    MagnitudeProfile { rows }
}

/// Per layer, the attention mass on key `sink`, averaged over heads and over
/// the query positions that can see it.
pub fn attention_sink_fraction<T: Scalar>(trace: &StateTrace<T>, sink: usize) -> Result<Vec<f64>> {
    if sink >= trace.seq_len {
        return Err(Error::Input(format!(
            "sink position {sink} outside a sequence of length {}",
            trace.seq_len
        )));
    }
    let queries = (trace.seq_len - sink) as f64;
    Ok(trace
        .layers
        .iter()
        .map(|lt| {
            let per_head: f64 = lt
                .attention
                .iter()
                .map(|p| (sink..trace.seq_len).map(|q| p.row(q)[sink].as_f64()).sum::<f64>() / queries)
                .sum();
            (per_head / lt.attention.len() as f64).clamp(0.0, 1.0)
        })
        .collect())
}
