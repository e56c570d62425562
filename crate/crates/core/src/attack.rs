//! Top-k zeroing and top-k retaining of massive weights.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, ParameterStore};
use crate::probe::MassiveWeightReport;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Zero the selected rows of `W_gate` and `W_up`.
    Zeroing,
    /// Zero every other row of `W_gate` and `W_up`.
    Retaining,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Zeroing => "zeroing",
            AttackKind::Retaining => "retaining",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroing" => Ok(AttackKind::Zeroing),
            "retaining" => Ok(AttackKind::Retaining),
            other => Err(Error::Input(format!("unknown attack kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTarget {
    /// 1-based.
    pub layer: usize,
    pub expert: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub k: usize,
    pub target: AttackTarget,
    #[serde(default)]
    pub in_place: bool,
    pub report: MassiveWeightReport,
}

impl AttackSpec {
    /// Attack on the report's layer and expert using its first `k` indices.
    pub fn from_report(kind: AttackKind, k: usize, report: &MassiveWeightReport) -> Result<Self> {
        let spec = Self {
            kind,
            k,
            target: AttackTarget {
                layer: report.layer,
                expert: report.expert,
            },
            in_place: false,
            report: report.clone(),
        };
        Ok(spec)
    }

    /// The attacked row indices.
    pub fn indices(&self) -> &[usize] {
        &self.report.indices[..self.k.min(self.report.indices.len())]
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.k > config.ffn_dim {
            return Err(Error::Input(format!(
                "attack k = {} exceeds d_ff = {}",
                self.k, config.ffn_dim
            )));
        }
        if self.k > self.report.indices.len() {
            return Err(Error::Input(format!(
                "attack k = {} but the report lists only {} indices",
                self.k,
                self.report.indices.len()
            )));
        }
        if self.target.layer != self.report.layer || self.target.expert != self.report.expert {
            return Err(Error::Contract("attack target does not match its report".into()));
        }
        if self.target.layer == 0 || self.target.layer > config.num_layers {
            return Err(Error::Input(format!(
                "attack layer {} outside [1, {}]",
                self.target.layer, config.num_layers
            )));
        }
        let mut seen = BTreeSet::new();
        for &i in self.indices() {
            if i >= config.ffn_dim || !seen.insert(i) {
                return Err(Error::Input(format!("attack index {i} is out of range or repeated")));
            }
        }
        Ok(())
    }
}

/// Attacked copy of `params`. Untouched tensors keep sharing storage.
pub fn apply_attack<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    spec: &AttackSpec,
) -> Result<ParameterStore<T>> {
    let mut out = params.clone();
    apply_attack_in_place(config, &mut out, spec)?;
    Ok(out)
}

pub fn apply_attack_in_place<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<T>,
    spec: &AttackSpec,
) -> Result<()> {
    spec.validate(config)?;
    let AttackTarget { layer, expert } = spec.target;
    let selected: BTreeSet<usize> = spec.indices().iter().copied().collect();
    let rows: Vec<usize> = match spec.kind {
        AttackKind::Zeroing => selected.into_iter().collect(),
        AttackKind::Retaining => (0..config.ffn_dim).filter(|i| !selected.contains(i)).collect(),
    };
    let names = [names::ffn_gate(layer, expert), names::ffn_up(layer, expert)];
    // Resolve both tensors before writing so a missing one leaves params untouched.
    for name in &names {
        params.get(name).map_err(|_| {
            Error::Input(format!(
                "target layer {layer}{} has no FFN weight `{name}`",
                expert.map(|e| format!(" expert {e}")).unwrap_or_default()
            ))
        })?;
    }
    if rows.is_empty() {
        return Ok(());
    }
    for name in &names {
        let t = params.get_mut(name)?;
        for &r in &rows {
            t.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

/// One row of a k-sweep; evaluation errors are kept per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub metric: std::result::Result<f64, String>,
}

/// Evaluates `eval` on a fresh attacked copy for each `k`.
pub fn k_sweep<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    kind: AttackKind,
    report: &MassiveWeightReport,
    k_values: &[usize],
    mut eval: impl FnMut(&ParameterStore<T>) -> Result<f64>,
) -> Vec<SweepRow> {
    k_values
        .iter()
        .map(|&k| {
            let metric = AttackSpec::from_report(kind, k, report)
                .and_then(|spec| apply_attack(config, params, &spec))
                .and_then(|attacked| eval(&attacked))
                .map_err(|e| e.to_string());
            SweepRow { k, metric }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_model, toy_config, toy_moe_config, Plant};
    use crate::model::ffn_intermediate;
    use crate::probe::find_massive_weights;
    use crate::trace::trace_forward;
    use proptest::prelude::*;

    fn setup() -> (ModelConfig, ParameterStore<f64>, MassiveWeightReport) {
        let c = toy_config(33, 16, 24, 3, 2);
        let p = planted_model(&c, 5, &Plant::new(2, vec![4, 9, 11])).unwrap();
        let r = find_massive_weights(&c, &p, 24).unwrap();
        (c, p, r)
    }

    #[test]
    fn trivial_attacks_are_identity() {
        let (c, p, r) = setup();
        let z = apply_attack(&c, &p, &AttackSpec::from_report(AttackKind::Zeroing, 0, &r).unwrap()).unwrap();
        assert!(z.bitwise_eq(&p));
        let keep = apply_attack(&c, &p, &AttackSpec::from_report(AttackKind::Retaining, 24, &r).unwrap()).unwrap();
        assert!(keep.bitwise_eq(&p));
    }

    #[test]
    fn zeroed_rows_give_zero_intermediate() {
        let (c, p, r) = setup();
        let spec = AttackSpec::from_report(AttackKind::Zeroing, 3, &r).unwrap();
        let z = apply_attack(&c, &p, &spec).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        match ffn_intermediate(&c, &z, r.layer, &x).unwrap() {
            crate::model::FfnIntermediate::Dense(v) => {
                for &i in spec.indices() {
                    assert_eq!(v[i], 0.0);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn diff_touches_only_target_rows() {
        let (c, p, r) = setup();
        let spec = AttackSpec::from_report(AttackKind::Zeroing, 2, &r).unwrap();
        let z = apply_attack(&c, &p, &spec).unwrap();
        let mut rows = spec.indices().to_vec();
        rows.sort();
        let diff = p.diff(&z);
        assert_eq!(
            diff,
            vec![
                (names::ffn_gate(r.layer, None), rows.clone()),
                (names::ffn_up(r.layer, None), rows)
            ]
        );
    }

    #[test]
    fn zeroing_after_retaining_clears_both_matrices() {
        let (c, p, r) = setup();
        let keep = AttackSpec::from_report(AttackKind::Retaining, 3, &r).unwrap();
        let zero = AttackSpec::from_report(AttackKind::Zeroing, 3, &r).unwrap();
        let both = apply_attack(&c, &apply_attack(&c, &p, &keep).unwrap(), &zero).unwrap();
        for name in [names::ffn_gate(r.layer, None), names::ffn_up(r.layer, None)] {
            assert!(both.get(&name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn moe_attack_targets_probed_expert_only() {
        let c = toy_moe_config(33, 16, 24, 2, 2, 4);
        let mut plant = Plant::new(2, vec![3]);
        plant.expert = Some(1);
        let p: ParameterStore<f64> = planted_model(&c, 8, &plant).unwrap();
        let r = find_massive_weights(&c, &p, 1).unwrap();
        assert_eq!((r.layer, r.expert, r.indices.clone()), (2, Some(1), vec![3]));
        let z = apply_attack(&c, &p, &AttackSpec::from_report(AttackKind::Zeroing, 1, &r).unwrap()).unwrap();
        let changed: Vec<String> = p.diff(&z).into_iter().map(|(n, _)| n).collect();
        assert_eq!(changed, vec![names::ffn_gate(2, Some(1)), names::ffn_up(2, Some(1))]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (c, p, r) = setup();
        let mut spec = AttackSpec::from_report(AttackKind::Zeroing, 2, &r).unwrap();
        spec.target.layer = 3;
        assert!(apply_attack(&c, &p, &spec).is_err());
        let mut spec = AttackSpec::from_report(AttackKind::Zeroing, 2, &r).unwrap();
        spec.report.indices[1] = spec.report.indices[0];
        assert!(apply_attack(&c, &p, &spec).is_err());
    }

    #[test]
    fn sweep_baseline_equals_unattacked_and_keeps_going() {
        let (c, p, r) = setup();
        let eval = |q: &ParameterStore<f64>| -> Result<f64> {
            let t = trace_forward(&c, q, &[c.bos_token_id, 2, 3], 2)?;
            Ok(t.logits.data().iter().sum())
        };
        let baseline = eval(&p).unwrap();
        let rows = k_sweep(&c, &p, AttackKind::Zeroing, &r, &[0, 1, 5, 99], eval);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].metric.as_ref().unwrap().to_bits(), baseline.to_bits());
        assert!(rows[1].metric.is_ok() && rows[2].metric.is_ok());
        assert!(rows[3].metric.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn attacks_are_idempotent(k in 0usize..=24, retain in any::<bool>()) {
            let (c, p, r) = setup();
            let kind = if retain { AttackKind::Retaining } else { AttackKind::Zeroing };
            let spec = AttackSpec::from_report(kind, k, &r).unwrap();
            let once = apply_attack(&c, &p, &spec).unwrap();
            let twice = apply_attack(&c, &once, &spec).unwrap();
            prop_assert!(once.bitwise_eq(&twice));
            for (name, _) in p.diff(&once) {
                prop_assert!(name == names::ffn_gate(r.layer, None) || name == names::ffn_up(r.layer, None));
            }
        }
    }
}
