//! Curriculum dropout on massive weights with bitwise rollback.
//!
//! Each step draws one `k × d` keep mask, multiplies it into the massive
//! rows of both `W_gate` and `W_up`, runs the caller's training step on the
//! masked weights and then restores the rows from the saved originals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, ParameterStore};
use crate::probe::MassiveWeightReport;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Scale kept entries by `1 / (1 − p)`. Off by default.
    #[serde(default)]
    pub rescale: bool,
    /// Draw one keep decision per row instead of per element.
    #[serde(default)]
    pub per_row: bool,
}

/// Saved massive rows and the mask of the current step.
#[derive(Debug, Clone)]
pub struct MacDropState<T> {
    pub report: MassiveWeightReport,
    pub gate_name: String,
    pub up_name: String,
    /// Row indices, in report order.
    pub rows: Vec<usize>,
    saved_gate: Vec<Vec<T>>,
    saved_up: Vec<Vec<T>>,
    /// Row-major `k × d` multiplier of the current step.
    pub mask: Vec<T>,
    pub step: usize,
    pub epoch: usize,
    pub options: MaskOptions,
}

impl<T: Scalar> MacDropState<T> {
    /// Saves the first `k` rows named by `report`.
    pub fn new(
        config: &ModelConfig,
        params: &ParameterStore<T>,
        report: &MassiveWeightReport,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k > report.indices.len() {
            return Err(Error::Input(format!(
                "macdrop k = {k} needs 1 <= k <= {} report indices",
                report.indices.len()
            )));
        }
        let rows = report.indices[..k].to_vec();
        if let Some(&bad) = rows.iter().find(|&&r| r >= config.ffn_dim) {
            return Err(Error::Input(format!(
                "massive row {bad} outside d_ff {}",
                config.ffn_dim
            )));
        }
        let gate_name = names::ffn_gate(report.layer, report.expert);
        let up_name = names::ffn_up(report.layer, report.expert);
        let gate = params.get(&gate_name)?;
        let up = params.get(&up_name)?;
        Ok(Self {
            report: report.clone(),
            saved_gate: rows.iter().map(|&r| gate.row(r).to_vec()).collect(),
            saved_up: rows.iter().map(|&r| up.row(r).to_vec()).collect(),
            mask: vec![T::one(); k * config.hidden_dim],
            gate_name,
            up_name,
            rows,
            step: 0,
            epoch: 0,
            options: MaskOptions::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.saved_gate.first().map_or(0, Vec::len)
    }

    pub fn saved_gate(&self) -> &[Vec<T>] {
        &self.saved_gate
    }

    pub fn saved_up(&self) -> &[Vec<T>] {
        &self.saved_up
    }

    /// Draws a fresh mask with drop probability `p`; returns the kept fraction.
    pub fn sample_mask(&mut self, p: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Input(format!("dropout probability {p} outside [0, 1]")));
        }
        let keep = if self.options.rescale && p < 1.0 {
            T::of(1.0 / (1.0 - p))
        } else {
            T::one()
        };
        let d = self.width();
        let mut kept = 0usize;
        for r in 0..self.k() {
            let row_draw = if self.options.per_row {
                Some(rng.gen::<f64>() >= p)
            } else {
                None
            };
            for m in &mut self.mask[r * d..(r + 1) * d] {
                let k = row_draw.unwrap_or_else(|| rng.gen::<f64>() >= p);
                kept += k as usize;
                *m = if k { keep } else { T::zero() };
            }
        }
        Ok(if self.mask.is_empty() {
            1.0
        } else {
            kept as f64 / self.mask.len() as f64
        })
    }

    /// Writes `saved ⊙ mask` into the live rows of both matrices.
    pub fn apply_mask(&self, params: &mut ParameterStore<T>) -> Result<()> {
        let d = self.width();
        for (name, saved) in [(&self.gate_name, &self.saved_gate), (&self.up_name, &self.saved_up)] {
            let t = params.get_mut(name)?;
            for (i, &r) in self.rows.iter().enumerate() {
                let mask = &self.mask[i * d..(i + 1) * d];
                for ((dst, &s), &m) in t.row_mut(r).iter_mut().zip(&saved[i]).zip(mask) {
                    *dst = s * m;
                }
            }
        }
        Ok(())
    }

    /// Restores the saved rows bitwise.
    pub fn rollback(&self, params: &mut ParameterStore<T>) -> Result<()> {
        for (name, saved) in [(&self.gate_name, &self.saved_gate), (&self.up_name, &self.saved_up)] {
            let t = params.get_mut(name)?;
            for (i, &r) in self.rows.iter().enumerate() {
                t.row_mut(r).copy_from_slice(&saved[i]);
            }
        }
        Ok(())
    }

    /// Whether the live rows equal the saved rows bitwise.
    pub fn rows_intact(&self, params: &ParameterStore<T>) -> Result<bool> {
        for (name, saved) in [(&self.gate_name, &self.saved_gate), (&self.up_name, &self.saved_up)] {
            let t = params.get(name)?;
            for (i, &r) in self.rows.iter().enumerate() {
                if t.row(r).iter().zip(&saved[i]).any(|(a, b)| a.bits() != b.bits()) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Result of one masked step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacDropStepOutcome {
    pub p: f64,
    pub loss: f64,
    pub kept_fraction: f64,
}

/// Mask, train, roll back. `inspect` sees the masked parameters before
/// training; `train` runs forward, backward and the adapter update and
/// returns the loss. The rows are restored even if `train` fails, and a
/// non-finite loss aborts with the step index.
pub fn macdrop_step_with<T: Scalar>(
    params: &mut ParameterStore<T>,
    state: &mut MacDropState<T>,
    p: f64,
    mask_rng: &mut ChaCha8Rng,
    mut inspect: impl FnMut(&ParameterStore<T>, &MacDropState<T>),
    train: impl FnOnce(&ParameterStore<T>) -> Result<f64>,
) -> Result<MacDropStepOutcome> {
    state.step += 1;
    let kept_fraction = state.sample_mask(p, mask_rng)?;
    state.apply_mask(params)?;
    inspect(params, state);
    let result = train(params);
    state.rollback(params)?;
    let loss = result?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    Ok(MacDropStepOutcome { p, loss, kept_fraction })
}

pub fn macdrop_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    state: &mut MacDropState<T>,
    p: f64,
    mask_rng: &mut ChaCha8Rng,
    train: impl FnOnce(&ParameterStore<T>) -> Result<f64>,
) -> Result<MacDropStepOutcome> {
    macdrop_step_with(params, state, p, mask_rng, |_, _| {}, train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_model, toy_config, Plant};
    use crate::probe::find_massive_weights;
    use rand::SeedableRng;

    fn setup() -> (ModelConfig, ParameterStore<f64>, MacDropState<f64>) {
        let c = toy_config(33, 16, 24, 2, 2);
        let p = planted_model(&c, 3, &Plant::new(2, vec![1, 5, 7])).unwrap();
        let r = find_massive_weights(&c, &p, 3).unwrap();
        let s = MacDropState::new(&c, &p, &r, 3).unwrap();
        (c, p, s)
    }

    #[test]
    fn extreme_probabilities() {
        let (_, mut p, mut s) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let original = p.clone();
        let gate = s.gate_name.clone();
        let rows = s.rows.clone();
        macdrop_step_with(
            &mut p,
            &mut s,
            1.0,
            &mut rng,
            |q, _| {
                for &r in &rows {
                    assert!(q.get(&gate).unwrap().row(r).iter().all(|&v| v == 0.0));
                }
            },
            |_| Ok(1.0),
        )
        .unwrap();
        assert!(p.bitwise_eq(&original));
        macdrop_step_with(
            &mut p,
            &mut s,
            0.0,
            &mut rng,
            |q, _| assert!(q.bitwise_eq(&original)),
            |_| Ok(1.0),
        )
        .unwrap();
    }

    #[test]
    fn rollback_after_failure_and_nan() {
        let (_, mut p, mut s) = setup();
        let original = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = macdrop_step(&mut p, &mut s, 0.5, &mut rng, |_| Err(Error::Input("boom".into())));
        assert!(err.is_err());
        assert!(p.bitwise_eq(&original));
        match macdrop_step(&mut p, &mut s, 0.5, &mut rng, |_| Ok(f64::NAN)) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(p.bitwise_eq(&original));
    }

    #[test]
    fn per_row_and_rescale_options() {
        let (_, _, mut s) = setup();
        s.options = MaskOptions {
            rescale: true,
            per_row: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        s.sample_mask(0.5, &mut rng).unwrap();
        let d = s.width();
        for r in 0..s.k() {
            let row = &s.mask[r * d..(r + 1) * d];
            assert!(row.iter().all(|&m| m == row[0]));
            assert!(row[0] == 0.0 || row[0] == 2.0);
        }
    }

    #[test]
    fn kept_fraction_tracks_probability() {
        let (_, _, mut s) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = s.sample_mask(0.8, &mut rng).unwrap();
        assert!((f - 0.2).abs() < 0.15, "{f}");
        assert!(s.sample_mask(1.5, &mut rng).is_err());
    }
}
