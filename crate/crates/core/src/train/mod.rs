//! Training: full-parameter pretraining of toy models, LoRA fine-tuning and
//! curriculum dropout on massive weights.

pub mod data;
mod finetune;
pub mod lora;
pub mod macdrop;
pub mod optim;
mod pretrain;
pub mod schedule;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{build_forward, AdapterVars, ForwardOptions, ModelConfig, ParamVars};
use crate::tensor::{Graph, Scalar, Var};

pub use data::{rng_stream, streams};
pub use finetune::{finetune, validation_loss, FinetuneOutcome, MacDropConfig, StepLog, TrainConfig};
pub use lora::{lora_targets, LoraAdapter, LoraAdapterSet};
pub use macdrop::{macdrop_step, macdrop_step_with, MacDropState, MacDropStepOutcome, MaskOptions};
pub use optim::{warmup_lr, Adam};
pub use pretrain::{pretrain, PretrainConfig};
pub use schedule::{CurriculumSchedule, ScheduleKind};

/// Mean next-token cross-entropy over `batch`, recorded on `graph`.
pub(crate) fn batch_loss<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    pv: &ParamVars,
    adapters: Option<&AdapterVars<T>>,
    batch: &[&[u32]],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for seq in batch {
        let mut opts = ForwardOptions {
            adapters,
            dropout_rng: dropout_rng.as_deref_mut(),
        };
        let nodes = build_forward(graph, config, pv, &seq[..seq.len() - 1], &mut opts)?;
        let loss = graph.cross_entropy(nodes.logits, &seq[1..])?;
        total = Some(match total {
            Some(acc) => graph.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| crate::error::Error::Input("empty training batch".into()))?;
    Ok(graph.scale(total, T::of(1.0 / batch.len() as f64)))
}
