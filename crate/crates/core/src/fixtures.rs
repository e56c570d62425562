//! Planted models and synthetic corpora with known answers.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, MoeConfig, ParameterStore};
use crate::tensor::Scalar;
use crate::trace::trace_forward;

/// Where and how to plant massive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    /// 1-based layer.
    pub layer: usize,
    /// Expert to plant into when `layer` is an MoE layer.
    pub expert: Option<usize>,
    /// Intermediate rows to plant, largest first.
    pub rows: Vec<usize>,
    /// Multiplier applied to the planted `W_gate` / `W_up` rows.
    pub scale: f64,
    /// Output coordinate of `W_down` that the planted rows write into.
    pub down_coord: Option<usize>,
}

impl Plant {
    pub fn new(layer: usize, rows: Vec<usize>) -> Self {
        Self {
            layer,
            expert: None,
            rows,
            scale: 1000.0,
            down_coord: None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sets the component of `row` along `x` so that `row · x = target`.
fn set_projection(row: &mut [f64], x: &[f64], target: f64) {
    let xx = dot(x, x);
    let shift = (target - dot(row, x)) / xx;
    for (r, xi) in row.iter_mut().zip(x) {
        *r += shift * xi;
    }
}

fn read_row<T: Scalar>(params: &ParameterStore<T>, name: &str, row: usize) -> Result<Vec<f64>> {
    Ok(params.get(name)?.row(row).iter().map(|v| v.as_f64()).collect())
}

fn write_row<T: Scalar>(params: &mut ParameterStore<T>, name: &str, row: usize, values: &[f64]) -> Result<()> {
    let t = params.get_mut(name)?;
    for (dst, v) in t.row_mut(row).iter_mut().zip(values) {
        *dst = T::of(*v);
    }
    Ok(())
}

/// Plants massive weights: each planted gate/up row gets a positive
/// (gate) and signed (up) response to the layer's normalized bos input,
/// graded so `plant.rows[0]` ends up largest, and is then multiplied by
/// `plant.scale`. For MoE layers the router is tilted so the planted
/// expert wins at bos by a logit margin of 10.
pub fn plant_massive_weights<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<T>,
    plant: &Plant,
) -> Result<()> {
    let moe_layer = config.is_moe_layer(plant.layer);
    if moe_layer != plant.expert.is_some() {
        return Err(Error::Config(format!(
            "plant at layer {} needs an expert exactly when the layer is MoE",
            plant.layer
        )));
    }
    if let Some(&bad) = plant.rows.iter().find(|&&r| r >= config.ffn_dim) {
        return Err(Error::Config(format!(
            "planted row {bad} outside d_ff {}",
            config.ffn_dim
        )));
    }
    let trace = trace_forward(config, params, &[config.bos_token_id], 0)?;
    let lt = trace
        .layers
        .get(plant.layer.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("plant layer {} out of range", plant.layer)))?;
    let x: Vec<f64> = lt.ln2.iter().map(|v| v.as_f64()).collect();
    let x_norm = dot(&x, &x).sqrt();

    if let (true, Some(e)) = (moe_layer, plant.expert) {
        let name = names::router(plant.layer);
        let experts = config.moe.as_ref().map_or(0, |m| m.num_experts);
        let best_other = (0..experts)
            .filter(|&o| o != e)
            .map(|o| read_row(params, &name, o).map(|r| dot(&r, &x)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut r = read_row(params, &name, e)?;
        set_projection(&mut r, &x, best_other + 10.0);
        write_row(params, &name, e, &r)?;
    }

    let gate_name = names::ffn_gate(plant.layer, plant.expert);
    let up_name = names::ffn_up(plant.layer, plant.expert);
    let n = plant.rows.len();
    // One reference scale per matrix keeps the planted magnitudes ordered by grade.
    let mut sigmas = Vec::with_capacity(2);
    for name in [&gate_name, &up_name] {
        let t = params.get(name)?;
        let ms = t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / t.numel() as f64;
        sigmas.push(ms.sqrt().max(1e-3));
    }
    for (rank, &j) in plant.rows.iter().enumerate() {
        let grade = 1.0 + 0.25 * (n - 1 - rank) as f64;
        for ((name, signed), &sigma) in [(&gate_name, false), (&up_name, true)].into_iter().zip(&sigmas) {
            let mut row = read_row(params, name, j)?;
            let sign = if signed && dot(&row, &x) < 0.0 { -1.0 } else { 1.0 };
            set_projection(&mut row, &x, sign * grade * sigma * x_norm);
            row.iter_mut().for_each(|v| *v *= plant.scale);
            write_row(params, name, j, &row)?;
        }
    }

    if let Some(c) = plant.down_coord {
        if c >= config.hidden_dim {
            return Err(Error::Config(format!("down_coord {c} outside d {}", config.hidden_dim)));
        }
        // Same sign as the planted intermediate value so contributions add.
        let up = params.get(&up_name)?.clone();
        let down = params.get_mut(&names::ffn_down(plant.layer, plant.expert))?;
        let cols = down.cols();
        for &j in &plant.rows {
            let s = if dot(&up.row(j).iter().map(|v| v.as_f64()).collect::<Vec<_>>(), &x) < 0.0 {
                -1.0
            } else {
                1.0
            };
            down.data_mut()[c * cols + j] = T::of(s);
        }
    }
    Ok(())
}

/// Random toy weights with one planted site.
pub fn planted_model<T: Scalar>(config: &ModelConfig, seed: u64, plant: &Plant) -> Result<ParameterStore<T>> {
    let mut params = ParameterStore::random(config, seed, 0.02)?;
    plant_massive_weights(config, &mut params, plant)?;
    Ok(params)
}

/// A randomly drawn plant for `config`: layer, expert (for MoE layers),
/// `k` distinct rows and, optionally, a `W_down` coordinate.
pub fn random_plant(config: &ModelConfig, k: usize, rng: &mut impl Rng) -> Plant {
    let layer = rng.gen_range(1..=config.num_layers);
    let expert = config
        .moe
        .as_ref()
        .filter(|m| m.layers.contains(&layer))
        .map(|m| rng.gen_range(0..m.num_experts));
    let rows = sample(rng, config.ffn_dim, k).into_vec();
    Plant {
        layer,
        expert,
        rows,
        scale: 1000.0,
        down_coord: None,
    }
}

/// Toy dense config sized for tests.
pub fn toy_config(vocab: usize, hidden: usize, ffn: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig::toy(vocab, hidden, ffn, layers, heads)
}

/// Toy config whose even layers are top-2 MoE layers.
pub fn toy_moe_config(
    vocab: usize,
    hidden: usize,
    ffn: usize,
    layers: usize,
    heads: usize,
    experts: usize,
) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab, hidden, ffn, layers, heads);
    c.moe = Some(MoeConfig {
        num_experts: experts,
        top_t: 2,
        layers: (1..=layers).filter(|l| l % 2 == 0).collect(),
    });
    c
}

/// A sparse first-order Markov chain over the non-bos tokens.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    bos: u32,
    successors: Vec<Vec<u32>>,
    weights: Vec<WeightedIndex<f64>>,
}

impl MarkovCorpus {
    /// Each token gets `branching` successors with random weights; bos is
    /// excluded from the content vocabulary.
    pub fn new(vocab: usize, bos: u32, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<u32> = (0..vocab as u32).filter(|&t| t != bos).collect();
        let mut successors = Vec::with_capacity(vocab);
        let mut weights = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let succ: Vec<u32> = sample(&mut rng, content.len(), branching.min(content.len()))
                .into_iter()
                .map(|i| content[i])
                .collect();
            let w: Vec<f64> = (0..succ.len()).map(|_| rng.gen::<f64>().powi(2) + 0.05).collect();
            successors.push(succ);
            weights.push(WeightedIndex::new(w).expect("positive weights"));
        }
        Self {
            bos,
            successors,
            weights,
        }
    }

    /// One document: bos followed by `len - 1` chain tokens.
    pub fn document(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = self.bos;
        out.push(cur);
        while out.len() < len {
            let i = self.weights[cur as usize].sample(rng);
            cur = self.successors[cur as usize][i];
            out.push(cur);
        }
        out
    }

    /// `docs` documents of length `len`, concatenated.
    pub fn stream(&self, docs: usize, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..docs).flat_map(|_| self.document(len, &mut rng)).collect()
    }

    /// Multiple-choice items: the true next `span` tokens versus
    /// `options - 1` uniformly random spans.
    pub fn mc_items(
        &self,
        n: usize,
        context: usize,
        span: usize,
        options: usize,
        seed: u64,
    ) -> Vec<crate::checkpoint::McItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = self.successors.len() as u32;
        (0..n)
            .map(|_| {
                let doc = self.document(context + span, &mut rng);
                let gold = rng.gen_range(0..options);
                let opts = (0..options)
                    .map(|o| {
                        if o == gold {
                            doc[context..].to_vec()
                        } else {
                            (0..span)
                                .map(|_| loop {
                                    let t = rng.gen_range(0..vocab);
                                    if t != self.bos {
                                        break t;
                                    }
                                })
                                .collect()
                        }
                    })
                    .collect();
                crate::checkpoint::McItem {
                    context: doc[..context].to_vec(),
                    options: opts,
                    gold,
                }
            })
            .collect()
    }
}
