use serde::{Deserialize, Serialize};

use super::batch_loss;
use super::data::{batches_per_epoch, chunk_stream, epoch_batches, rng_stream, streams};
use super::lora::LoraAdapterSet;
use super::macdrop::{macdrop_step, MacDropState, MaskOptions};
use super::optim::{warmup_lr, Adam};
use super::schedule::{CurriculumSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamVars, ParameterStore};
use crate::probe::{find_massive_weights, MassiveWeightReport};
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Tokens per training chunk.
    pub seq_len: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.05,
            epochs: 3,
            batch_size: 4,
            seq_len: 256,
            seed: 1,
            lora_rank: 16,
            lora_alpha: 16.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_ratio)
            && self.epochs > 0
            && self.batch_size > 0
            && self.seq_len >= 2
            && self.lora_rank > 0
            && self.lora_alpha > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacDropConfig {
    pub k: usize,
    pub p0: f64,
    pub schedule: ScheduleKind,
    /// Rate of the exponential schedule.
    pub alpha: f64,
    #[serde(default)]
    pub mask: MaskOptions,
}

impl Default for MacDropConfig {
    fn default() -> Self {
        Self {
            k: 5,
            p0: 0.8,
            schedule: ScheduleKind::Step,
            alpha: 0.01,
            mask: MaskOptions::default(),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub p: f64,
    pub loss: f64,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub adapters: LoraAdapterSet<T>,
    pub log: Vec<StepLog>,
    /// Validation loss before training, then after each epoch.
    pub val_losses: Vec<f64>,
    pub report: Option<MassiveWeightReport>,
    pub schedule: Option<CurriculumSchedule>,
    pub total_steps: usize,
}

/// Mean next-token loss over `seq_len` chunks of `stream` with adapters applied.
pub fn validation_loss<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    stream: &[u32],
    seq_len: usize,
) -> Result<f64> {
    let chunks = chunk_stream(stream, seq_len);
    if chunks.is_empty() {
        return Err(Error::Input(format!(
            "validation stream of {} tokens is shorter than one chunk of {seq_len}",
            stream.len()
        )));
    }
    let mut total = 0.0;
    for chunk in &chunks {
        let mut graph = Graph::new();
        let pv = ParamVars::new(&mut graph, params, false);
        let av = adapters.map(|a| a.attach(&mut graph, false));
        let loss = batch_loss(&mut graph, config, &pv, av.as_ref(), &[chunk.as_slice()], None)?;
        total += graph.value(loss).data()[0].as_f64();
    }
    Ok(total / chunks.len() as f64)
}

/// One LoRA update on `batch`; base weights stay frozen.
fn lora_step<T: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<T>,
    adapters: &mut LoraAdapterSet<T>,
    optim: &mut Adam<T>,
    lr: f64,
    batch: &[&[u32]],
    step: usize,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let mut graph = Graph::new();
    let pv = ParamVars::new(&mut graph, params, false);
    let av = adapters.attach(&mut graph, true);
    let loss_var = batch_loss(&mut graph, config, &pv, Some(&av), batch, Some(dropout_rng))?;
    let loss = graph.value(loss_var).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut grads = graph.backward(loss_var)?;
    // `attach` walks the same ordered map, so pairs line up with adapters.
    let mut named = Vec::with_capacity(av.pairs.len());
    for (name, (a, b)) in &av.pairs {
        let ga = grads.take(*a).expect("adapter A is a trainable leaf");
        let gb = grads.take(*b).expect("adapter B is a trainable leaf");
        named.push((format!("{name}.a"), ga, format!("{name}.b"), gb));
    }
    drop(graph);
    let mut updates = Vec::with_capacity(named.len() * 2);
    for ((ka, ga, kb, gb), ad) in named.iter().zip(adapters.adapters.values_mut()) {
        updates.push((ka.as_str(), &mut ad.a, ga));
        updates.push((kb.as_str(), &mut ad.b, gb));
    }
    optim.step(lr, updates)?;
    Ok(loss)
}

/// LoRA fine-tuning on `seq_len` chunks of `train`, with curriculum
/// dropout on the massive rows when `macdrop` is set. `params` is masked
/// and restored during each step and ends bitwise unchanged.
pub fn finetune<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<T>,
    train: &[u32],
    val: &[u32],
    tc: &TrainConfig,
    macdrop: Option<&MacDropConfig>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<FinetuneOutcome<T>> {
    tc.validate()?;
    let chunks = chunk_stream(train, tc.seq_len);
    if chunks.is_empty() {
        return Err(Error::Input(format!(
            "training stream of {} tokens is shorter than one chunk of {}",
            train.len(),
            tc.seq_len
        )));
    }
    let per_epoch = batches_per_epoch(chunks.len(), tc.batch_size);
    let total_steps = per_epoch * tc.epochs;

    let mut data_rng = rng_stream(tc.seed, streams::DATA);
    let mut mask_rng = rng_stream(tc.seed, streams::MASK);
    let mut dropout_rng = rng_stream(tc.seed, streams::DROPOUT);
    let mut adapters = LoraAdapterSet::init(
        config,
        tc.lora_rank,
        tc.lora_alpha,
        &mut rng_stream(tc.seed, streams::LORA_INIT),
    )?;
    let mut optim = Adam::new(tc.beta1, tc.beta2, tc.eps);

    let (mut state, schedule, report) = match macdrop {
        Some(m) => {
            let report = find_massive_weights(config, params, m.k)?;
            let mut state = MacDropState::new(config, params, &report, m.k)?;
            state.options = m.mask;
            let schedule = CurriculumSchedule::new(m.schedule, m.p0, m.alpha, total_steps, tc.epochs)?;
            (Some(state), Some(schedule), Some(report))
        }
        None => (None, None, None),
    };

    let mut val_losses = vec![validation_loss(config, params, Some(&adapters), val, tc.seq_len)?];
    let mut log = Vec::with_capacity(total_steps);
    let mut t = 0;
    for epoch in 1..=tc.epochs {
        for batch_idx in epoch_batches(chunks.len(), tc.batch_size, &mut data_rng) {
            t += 1;
            let batch: Vec<&[u32]> = batch_idx.iter().map(|&i| chunks[i].as_slice()).collect();
            let lr = warmup_lr(tc.lr, tc.warmup_ratio, total_steps, t);
            let entry = match (&mut state, &schedule) {
                (Some(state), Some(schedule)) => {
                    state.epoch = epoch;
                    let p = schedule.eval(t, epoch)?;
                    let out = macdrop_step(params, state, p, &mut mask_rng, |masked| {
                        lora_step(
                            config,
                            masked,
                            &mut adapters,
                            &mut optim,
                            lr,
                            &batch,
                            t,
                            &mut dropout_rng,
                        )
                    })?;
                    StepLog {
                        step: t,
                        epoch,
                        p,
                        loss: out.loss,
                        kept_fraction: out.kept_fraction,
                    }
                }
                _ => {
                    let loss = lora_step(
                        config,
                        params,
                        &mut adapters,
                        &mut optim,
                        lr,
                        &batch,
                        t,
                        &mut dropout_rng,
                    )?;
                    StepLog {
                        step: t,
                        epoch,
                        p: 0.0,
                        loss,
                        kept_fraction: 1.0,
                    }
                }
            };
            on_step(&entry);
            log.push(entry);
        }
        val_losses.push(validation_loss(config, params, Some(&adapters), val, tc.seq_len)?);
    }
    Ok(FinetuneOutcome {
        adapters,
        log,
        val_losses,
        report,
        schedule,
        total_steps,
    })
}
