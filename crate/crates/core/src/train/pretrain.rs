use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch_loss;
use super::data::{rng_stream, streams};
use super::optim::{warmup_lr, Adam};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamVars, ParameterStore};
use crate::tensor::{Graph, Scalar};

/// Full-parameter training of a toy model on random windows of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per window, including the final target.
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            seq_len: 64,
            lr: 3e-3,
            warmup_ratio: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Trains every parameter with Adam; returns the loss of each step.
pub fn pretrain<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<T>,
    stream: &[u32],
    pc: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if pc.seq_len < 2 || pc.batch_size == 0 || !(pc.lr > 0.0) {
        return Err(Error::Config(format!("invalid pretraining configuration {pc:?}")));
    }
    if stream.len() < pc.seq_len {
        return Err(Error::Input(format!(
            "stream of {} tokens is shorter than one window of {}",
            stream.len(),
            pc.seq_len
        )));
    }
    let mut rng = rng_stream(pc.seed, streams::DATA);
    let mut optim = Adam::new(pc.beta1, pc.beta2, pc.eps);
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 1..=pc.steps {
        let batch: Vec<&[u32]> = (0..pc.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=stream.len() - pc.seq_len);
                &stream[start..start + pc.seq_len]
            })
            .collect();
        let mut graph = Graph::new();
        let pv = ParamVars::new(&mut graph, params, true);
        let loss_var = batch_loss(&mut graph, config, &pv, None, &batch, None)?;
        let loss = graph.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = graph.backward(loss_var)?;
        let named: Vec<_> = pv
            .iter()
            .map(|(name, v)| (name.clone(), grads.take(*v).expect("parameter leaf is trainable")))
            .collect();
        drop(graph);
        let lr = warmup_lr(pc.lr, pc.warmup_ratio, pc.steps, step);
        // Both maps are ordered by name, so the zip pairs each tensor with its gradient.
        let updates = named
            .iter()
            .zip(params.iter_mut())
            .map(|((name, g), (_, p))| (name.as_str(), p, g));
        optim.step(lr, updates)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{toy_config, MarkovCorpus};

    #[test]
    fn loss_drops_on_markov_text() {
        let c = toy_config(33, 16, 32, 1, 2);
        let mut p = ParameterStore::<f32>::random(&c, 4, 0.02).unwrap();
        let stream = MarkovCorpus::new(33, 32, 2, 1).stream(40, 32, 2);
        let pc = PretrainConfig {
            steps: 120,
            seq_len: 24,
            lr: 1e-2,
            ..PretrainConfig::default()
        };
        let losses = pretrain(&c, &mut p, &stream, &pc, |_, _| {}).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.5, "{head} -> {tail}");
    }

    #[test]
    fn short_stream_is_rejected() {
        let c = toy_config(33, 16, 32, 1, 2);
        let mut p = ParameterStore::<f32>::random(&c, 4, 0.02).unwrap();
        let pc = PretrainConfig::default();
        assert!(matches!(
            pretrain(&c, &mut p, &[1, 2, 3], &pc, |_, _| {}),
            Err(Error::Input(_))
        ));
    }
}
