//! Massive-layer and massive-weight detection from the bos token alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::Scalar;
use crate::trace::{trace_forward, StateTrace};

/// Reporting threshold for a skewed router.
pub const ROUTER_FLAG_THRESHOLD: f64 = 0.9;

/// Growth factor over the median of earlier layer maxima that counts as an
/// explosion under [`LayerRule::FirstExplosion`].
pub const EXPLOSION_FACTOR: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRule {
    /// Layer with the largest intermediate magnitude; ties go to the lower layer.
    #[default]
    GlobalArgmax,
    /// Earliest layer whose maximum is at least [`EXPLOSION_FACTOR`] times
    /// the median of the earlier layers' maxima. Falls back to the global
    /// argmax when no layer qualifies.
    FirstExplosion,
}

impl LayerRule {
    fn other(self) -> Self {
        match self {
            LayerRule::GlobalArgmax => LayerRule::FirstExplosion,
            LayerRule::FirstExplosion => LayerRule::GlobalArgmax,
        }
    }
}

/// The other rule's answer when the two disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternateLayer {
    pub rule: LayerRule,
    pub layer: usize,
    pub expert: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassiveWeightReport {
    /// 1-based.
    pub layer: usize,
    pub expert: Option<usize>,
    pub k: usize,
    pub indices: Vec<usize>,
    pub magnitudes: Vec<f64>,
    pub rule: LayerRule,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<AlternateLayer>,
}

/// Per-layer summary of the bos intermediate states.
#[derive(Debug, Clone, PartialEq)]
pub struct BosProbe {
    /// `|ĥ^inter|` per layer (for MoE layers, of the router-argmax expert).
    pub inter_abs: Vec<Vec<f64>>,
    pub experts: Vec<Option<usize>>,
}

impl BosProbe {
    pub fn from_trace<T: Scalar>(trace: &StateTrace<T>) -> Self {
        Self {
            inter_abs: trace
                .layers
                .iter()
                .map(|lt| lt.inter.iter().map(|v| v.as_f64().abs()).collect())
                .collect(),
            experts: trace
                .layers
                .iter()
                .map(|lt| lt.moe.as_ref().map(|m| m.probed_expert))
                .collect(),
        }
    }

    pub fn run<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>) -> Result<Self> {
        Ok(Self::from_trace(&trace_forward(
            config,
            params,
            &[config.bos_token_id],
            0,
        )?))
    }

    pub fn layer_maxima(&self) -> Vec<f64> {
        self.inter_abs
            .iter()
            .map(|v| v.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    /// 1-based layer chosen by `rule`.
    pub fn select_layer(&self, rule: LayerRule) -> Result<usize> {
        let maxima = self.layer_maxima();
        if maxima.iter().all(|&m| m == 0.0) {
            return Err(Error::Detection(
                "every intermediate state is identically zero at bos".into(),
            ));
        }
        let argmax = maxima
            .iter()
            .enumerate()
            .fold(0, |best, (i, &m)| if m > maxima[best] { i } else { best });
        let chosen = match rule {
            LayerRule::GlobalArgmax => argmax,
            LayerRule::FirstExplosion => (1..maxima.len())
                .find(|&l| {
                    let mut prev = maxima[..l].to_vec();
                    prev.sort_by(f64::total_cmp);
                    let median = prev[(prev.len() - 1) / 2];
                    maxima[l] > 0.0 && maxima[l] >= EXPLOSION_FACTOR * median
                })
                .unwrap_or(argmax),
        };
        Ok(chosen + 1)
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Massive layer (1-based) and, for MoE layers, the bos router-argmax expert.
pub fn find_massive_layer<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
) -> Result<(usize, Option<usize>)> {
    let probe = BosProbe::run(config, params)?;
    let layer = probe.select_layer(LayerRule::GlobalArgmax)?;
    Ok((layer, probe.experts[layer - 1]))
}

pub fn find_massive_weights<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    k: usize,
) -> Result<MassiveWeightReport> {
    find_massive_weights_with(config, params, k, LayerRule::GlobalArgmax)
}

pub fn find_massive_weights_with<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    k: usize,
    rule: LayerRule,
) -> Result<MassiveWeightReport> {
    if k == 0 || k > config.ffn_dim {
        return Err(Error::Input(format!("k = {k} must lie in [1, {}]", config.ffn_dim)));
    }
    let probe = BosProbe::run(config, params)?;
    report_from_probe(config, &probe, k, rule)
}

pub fn report_from_probe(
    config: &ModelConfig,
    probe: &BosProbe,
    k: usize,
    rule: LayerRule,
) -> Result<MassiveWeightReport> {
    let layer = probe.select_layer(rule)?;
    let alt_layer = probe.select_layer(rule.other())?;
    let values = &probe.inter_abs[layer - 1];
    let indices = top_k_indices(values, k);
    Ok(MassiveWeightReport {
        layer,
        expert: probe.experts[layer - 1],
        k,
        magnitudes: indices.iter().map(|&i| values[i]).collect(),
        indices,
        rule,
        config_hash: config.config_hash(),
        alternate: (alt_layer != layer).then(|| AlternateLayer {
            rule: rule.other(),
            layer: alt_layer,
            expert: probe.experts[alt_layer - 1],
        }),
    })
}

/// Number of massive weights: `k` rows in each of `W_gate` and `W_up`, each
/// `d` wide.
pub fn massive_weight_count(config: &ModelConfig, k: usize) -> usize {
    2 * k * config.hidden_dim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterLayerProfile {
    /// 1-based.
    pub layer: usize,
    pub probs: Vec<f64>,
    pub argmax: usize,
    pub flagged: bool,
}

/// Router probabilities at bos for every MoE layer.
pub fn router_profile<T: Scalar>(config: &ModelConfig, params: &ParameterStore<T>) -> Result<Vec<RouterLayerProfile>> {
    if config.moe.is_none() {
        return Err(Error::Config(
            "router profile requested for a model without MoE layers".into(),
        ));
    }
    let trace = trace_forward(config, params, &[config.bos_token_id], 0)?;
    Ok(trace
        .layers
        .iter()
        .filter_map(|lt| {
            let m = lt.moe.as_ref()?;
            let probs: Vec<f64> = m.router_probs.iter().map(|p| p.as_f64()).collect();
            let max = probs[m.probed_expert];
            Some(RouterLayerProfile {
                layer: lt.layer,
                argmax: m.probed_expert,
                flagged: max > ROUTER_FLAG_THRESHOLD,
                probs,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_model, toy_config, toy_moe_config, Plant};
    use crate::model::names;
    use proptest::prelude::*;

    #[test]
    fn planted_layer_and_rows_are_found() {
        let c = toy_config(33, 16, 48, 4, 2);
        let p: ParameterStore<f64> = planted_model(&c, 4, &Plant::new(3, vec![3, 7])).unwrap();
        assert_eq!(find_massive_layer(&c, &p).unwrap(), (3, None));
        let r = find_massive_weights(&c, &p, 2).unwrap();
        assert_eq!(r.indices, vec![3, 7]);
        assert!(r.magnitudes[0] >= r.magnitudes[1]);
        assert_eq!(r.alternate, None);
    }

    #[test]
    fn full_k_is_a_permutation() {
        let c = toy_config(33, 16, 24, 2, 2);
        let p: ParameterStore<f64> = ParameterStore::random(&c, 13, 0.1).unwrap();
        let mut idx = find_massive_weights(&c, &p, 24).unwrap().indices;
        idx.sort();
        assert_eq!(idx, (0..24).collect::<Vec<_>>());
        assert!(find_massive_weights(&c, &p, 0).is_err());
        assert!(find_massive_weights(&c, &p, 25).is_err());
    }

    #[test]
    fn zero_intermediates_fail_detection() {
        let c = toy_config(33, 16, 24, 2, 2);
        let mut p: ParameterStore<f64> = ParameterStore::random(&c, 13, 0.1).unwrap();
        for l in 1..=2 {
            let g = p.get_mut(&names::ffn_up(l, None)).unwrap();
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(matches!(find_massive_layer(&c, &p), Err(Error::Detection(_))));
    }

    #[test]
    fn count_examples() {
        let mut c = toy_config(33, 16, 24, 2, 2);
        c.hidden_dim = 4096;
        assert_eq!(massive_weight_count(&c, 5), 40960);
        assert_eq!(massive_weight_count(&c, 0), 0);
        let frac: f64 = 40960.0 / 8.03e9 * 100.0;
        assert!((frac - 0.0005).abs() < 0.00005);
    }

    #[test]
    fn router_profile_examples() {
        let dense = toy_config(33, 16, 24, 2, 2);
        let p: ParameterStore<f64> = ParameterStore::random(&dense, 1, 0.1).unwrap();
        assert!(matches!(router_profile(&dense, &p), Err(Error::Config(_))));

        let c = toy_moe_config(33, 16, 24, 2, 2, 6);
        let mut p: ParameterStore<f64> = ParameterStore::random(&c, 1, 0.1).unwrap();
        let r = p.get_mut(&names::router(2)).unwrap();
        r.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let prof = router_profile(&c, &p).unwrap();
        assert_eq!(prof.len(), 1);
        for q in &prof[0].probs {
            assert!((q - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!(!prof[0].flagged);

        let mut plant = Plant::new(2, vec![1]);
        plant.expert = Some(4);
        let p: ParameterStore<f64> = planted_model(&c, 1, &plant).unwrap();
        let prof = router_profile(&c, &p).unwrap();
        assert_eq!(prof[0].argmax, 4);
        assert!(prof[0].flagged);
        assert!((prof[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rules_report_disagreement() {
        // Layer 2 explodes relative to layer 1; layer 4 is larger still.
        let probe = BosProbe {
            inter_abs: vec![vec![1.0], vec![80.0], vec![2.0], vec![120.0]],
            experts: vec![None; 4],
        };
        let c = toy_config(33, 16, 24, 4, 2);
        let r = report_from_probe(&c, &probe, 1, LayerRule::GlobalArgmax).unwrap();
        assert_eq!(r.layer, 4);
        assert_eq!(r.alternate.as_ref().unwrap().layer, 2);
        let r = report_from_probe(&c, &probe, 1, LayerRule::FirstExplosion).unwrap();
        assert_eq!(r.layer, 2);
    }

    #[test]
    fn argmax_ties_go_to_lowest_layer() {
        let probe = BosProbe {
            inter_abs: vec![vec![5.0], vec![5.0]],
            experts: vec![None; 2],
        };
        assert_eq!(probe.select_layer(LayerRule::GlobalArgmax).unwrap(), 1);
    }

    proptest! {
        #[test]
        fn top_k_is_sort_prefix(v in prop::collection::vec(0f64..10.0, 1..30), k in 1usize..30) {
            let k = k.min(v.len());
            let a = top_k_indices(&v, k);
            let b = top_k_indices(&v, v.len());
            prop_assert_eq!(&a[..], &b[..k]);
            for w in a.windows(2) {
                prop_assert!(v[w[0]] > v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1]));
            }
        }
    }
}
