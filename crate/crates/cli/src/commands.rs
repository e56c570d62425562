use std::path::{Path, PathBuf};

use massweights::attack::{apply_attack, apply_attack_in_place, AttackKind, AttackSpec};
use massweights::checkpoint::{
    load_checkpoint_full, load_mc_items, load_token_stream, save_checkpoint, write_atomic, write_token_stream,
    LoadedCheckpoint, SaveOptions, StorageDtype, TokenFormat,
};
use massweights::eval::{mc_accuracy, perplexity, EvalReport, LogitModel, Normalization};
use massweights::fixtures::{plant_massive_weights, toy_config, toy_moe_config, MarkovCorpus, Plant};
use massweights::model::Model;
use massweights::probe::{find_massive_weights_with, LayerRule, MassiveWeightReport};
use massweights::trace::{magnitude_profile, trace_forward};
use massweights::train::{
    finetune, pretrain, LoraAdapterSet, MacDropConfig, MaskOptions, PretrainConfig, ScheduleKind, TrainConfig,
};
use massweights::{ModelConfig, ParameterStore, Tensor};
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::ledger::{self, LedgerRow};
use crate::plot::{figure_from_csv, render_svg, PlotKind};

pub const CHECKPOINT_DIR_ENV: &str = "MASSW_CHECKPOINT_DIR";

/// Resolves `--checkpoint` against [`CHECKPOINT_DIR_ENV`].
pub fn resolve_checkpoint(arg: &CheckpointArg) -> CliResult<PathBuf> {
    let env = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from);
    match (&arg.checkpoint, env) {
        (Some(p), Some(dir)) if p.is_relative() && !p.exists() => Ok(dir.join(p)),
        (Some(p), _) => Ok(p.clone()),
        (None, Some(dir)) => Ok(dir),
        (None, None) => Err(CliError::Usage(format!(
            "--checkpoint is required when {CHECKPOINT_DIR_ENV} is not set"
        ))),
    }
}

fn load(arg: &CheckpointArg) -> CliResult<LoadedCheckpoint> {
    Ok(load_checkpoint_full(resolve_checkpoint(arg)?)?)
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    match path {
        Some(p) => Ok(write_atomic(p, &bytes)?),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(write_atomic(path, &out)?)
}

fn rule(r: RuleArg) -> LayerRule {
    match r {
        RuleArg::GlobalArgmax => LayerRule::GlobalArgmax,
        RuleArg::FirstExplosion => LayerRule::FirstExplosion,
    }
}

fn attack_kind(k: AttackKindArg) -> AttackKind {
    match k {
        AttackKindArg::Zeroing => AttackKind::Zeroing,
        AttackKindArg::Retaining => AttackKind::Retaining,
    }
}

/// Detection size covering every requested attack size that can be valid;
/// larger sizes then fail individually.
fn detect_size(config: &ModelConfig, k_max: usize) -> usize {
    k_max.clamp(1, config.ffn_dim)
}

/// Loads a saved report or detects one large enough for `k_max`.
fn report_for(ck: &LoadedCheckpoint, saved: Option<&Path>, k_max: usize, r: RuleArg) -> CliResult<MassiveWeightReport> {
    match saved {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| massweights::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let report: MassiveWeightReport =
                serde_json::from_slice(&text).map_err(|e| CliError::Input(format!("report {}: {e}", p.display())))?;
            if report.config_hash != ck.config.config_hash() {
                return Err(CliError::Input(format!(
                    "report {} was made for a different model config",
                    p.display()
                )));
            }
            Ok(report)
        }
        None => Ok(find_massive_weights_with(
            &ck.config,
            &ck.params,
            detect_size(&ck.config, k_max),
            rule(r),
        )?),
    }
}

/// Short ledger form of an attack, e.g. `zeroing:k=5@L2` or `retaining:k=3@L2E1`.
fn attack_label(spec: &AttackSpec) -> String {
    let expert = spec.target.expert.map(|e| format!("E{e}")).unwrap_or_default();
    format!("{}:k={}@L{}{expert}", spec.kind, spec.k, spec.target.layer)
}

fn k_suffixed(out: &Path, k: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.k{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.k{k}"),
    };
    out.with_file_name(name)
}

pub fn init(a: &InitArgs) -> CliResult<()> {
    if a.heads == 0 || !a.hidden.is_multiple_of(a.heads) || a.vocab == 0 {
        return Err(CliError::Usage(
            "--hidden must be a positive multiple of --heads".into(),
        ));
    }
    let config = match a.experts {
        Some(e) => toy_moe_config(a.vocab, a.hidden, a.ffn, a.layers, a.heads, e),
        None => toy_config(a.vocab, a.hidden, a.ffn, a.layers, a.heads),
    };
    let mut params = ParameterStore::<f32>::random(&config, a.seed, a.std)?;
    if let Some(layer) = a.plant_layer {
        let plant = Plant {
            expert: a.plant_expert,
            scale: a.plant_scale,
            ..Plant::new(layer, a.plant_rows.clone())
        };
        plant_massive_weights(&config, &mut params, &plant)?;
    }
    let dtype = match a.dtype {
        DtypeArg::F32 => StorageDtype::F32,
        DtypeArg::F16 => StorageDtype::F16,
        DtypeArg::Bf16 => StorageDtype::BF16,
    };
    let opts = SaveOptions {
        dtype,
        ..SaveOptions::default()
    };
    Ok(save_checkpoint(&a.out, &config, &params, &opts)?)
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.vocab < 2 {
        return Err(CliError::Usage("--vocab must be at least 2".into()));
    }
    let bos = a.bos.unwrap_or(a.vocab as u32 - 1);
    if bos as usize >= a.vocab {
        return Err(CliError::Usage(format!(
            "--bos {bos} outside a vocabulary of {}",
            a.vocab
        )));
    }
    let corpus = MarkovCorpus::new(a.vocab, bos, a.branching.max(1), a.corpus_seed);
    match a.kind {
        SynthKind::Stream => {
            let format = if a.binary {
                TokenFormat::Binary
            } else {
                TokenFormat::Jsonl
            };
            Ok(write_token_stream(
                &a.out,
                &corpus.stream(a.docs, a.len, a.seed),
                format,
            )?)
        }
        SynthKind::Items => {
            if a.options < 2 || a.context == 0 || a.span == 0 {
                return Err(CliError::Usage(
                    "items need --options >= 2 and non-empty --context/--span".into(),
                ));
            }
            let items = corpus.mc_items(a.items, a.context, a.span, a.options, a.seed);
            write_jsonl(&a.out, &items)
        }
    }
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: f64,
}

pub fn pretrain_cmd(a: &PretrainArgs) -> CliResult<()> {
    let ck = load(&a.checkpoint)?;
    let stream = load_token_stream(&a.stream, ck.config.vocab_size)?;
    let pc = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        lr: a.lr,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let mut params = ck.params.clone();
    let losses = pretrain(&ck.config, &mut params, &stream.ids, &pc, |_, _| {})?;
    save_checkpoint(&a.out, &ck.config, &params, &ck.save_options())?;
    if let Some(log) = &a.log {
        let lines: Vec<LossLine> = losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| LossLine { step, loss })
            .collect();
        write_jsonl(log, &lines)?;
    }
    Ok(())
}

pub fn trace(a: &TraceArgs) -> CliResult<()> {
    let ck = load(&a.checkpoint)?;
    let ids = match &a.stream {
        Some(p) => {
            let s = load_token_stream(p, ck.config.vocab_size)?;
            s.ids[..a.len.min(s.ids.len())].to_vec()
        }
        None if a.ids.is_empty() => vec![ck.config.bos_token_id],
        None => a.ids.clone(),
    };
    if ids.is_empty() {
        return Err(CliError::Input("nothing to trace: the input has no tokens".into()));
    }
    let trace = trace_forward(&ck.config, &ck.params, &ids, a.position)?;
    let csv = magnitude_profile(&trace).to_csv();
    write_atomic(&a.out, csv.as_bytes())?;
    if let Some(svg) = &a.svg {
        let fig = figure_from_csv(PlotKind::MagnitudeByLayer, &csv, a.stat)?;
        write_atomic(svg, render_svg(&fig).as_bytes())?;
    }
    Ok(())
}

pub fn detect(a: &DetectArgs) -> CliResult<()> {
    let ck = load(&a.checkpoint)?;
    let report = find_massive_weights_with(&ck.config, &ck.params, a.k, rule(a.rule))?;
    write_json(a.out.as_deref(), &report)
}

pub fn attack(a: &AttackArgs) -> CliResult<()> {
    let path = resolve_checkpoint(&a.checkpoint)?;
    let mut ck = load_checkpoint_full(&path)?;
    let ks: Vec<usize> = match a.k {
        Some(k) => vec![k],
        None => a.k_list.clone(),
    };
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let report = report_for(&ck, a.report.as_deref(), k_max, a.rule)?;
    let kind = attack_kind(a.kind);
    let opts = ck.save_options();

    if a.in_place {
        let mut spec = AttackSpec::from_report(kind, ks[0], &report)?;
        spec.in_place = true;
        apply_attack_in_place(&ck.config, &mut ck.params, &spec)?;
        return Ok(save_checkpoint(&path, &ck.config, &ck.params, &opts)?);
    }
    let out = a
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("--out or --in-place is required".into()))?;
    // Validate every size before writing anything.
    let specs = ks
        .iter()
        .map(|&k| {
            let spec = AttackSpec::from_report(kind, k, &report)?;
            spec.validate(&ck.config)?;
            Ok(spec)
        })
        .collect::<CliResult<Vec<_>>>()?;
    for spec in &specs {
        let attacked = apply_attack(&ck.config, &ck.params, spec)?;
        let target = if a.k.is_some() {
            out.clone()
        } else {
            k_suffixed(out, spec.k)
        };
        save_checkpoint(&target, &ck.config, &attacked, &opts)?;
    }
    Ok(())
}

/// Base weights with LoRA adapters applied on the fly.
struct Adapted<'a> {
    config: &'a ModelConfig,
    params: &'a ParameterStore<f32>,
    adapters: &'a LoraAdapterSet<f32>,
}

impl LogitModel for Adapted<'_> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, ids: &[u32]) -> massweights::Result<Tensor<f64>> {
        Ok(self.adapters.logits(self.config, self.params, ids)?.cast())
    }
}

enum EvalData {
    Stream(Vec<u32>),
    Items(Vec<massweights::checkpoint::McItem>),
}

fn score(a: &EvalArgs, model: &impl LogitModel, data: &EvalData, dataset: &str) -> massweights::Result<EvalReport> {
    match data {
        EvalData::Stream(s) => perplexity(model, dataset, s, a.window, a.stride),
        EvalData::Items(items) => {
            let norm = match a.normalization {
                NormArg::Sum => Normalization::Sum,
                NormArg::PerToken => Normalization::PerToken,
            };
            mc_accuracy(model, dataset, items, norm)
        }
    }
}

fn evaluate(
    a: &EvalArgs,
    config: &ModelConfig,
    params: &ParameterStore<f32>,
    adapters: Option<&LoraAdapterSet<f32>>,
    data: &EvalData,
    dataset: &str,
) -> massweights::Result<EvalReport> {
    match adapters {
        Some(adapters) => score(
            a,
            &Adapted {
                config,
                params,
                adapters,
            },
            data,
            dataset,
        ),
        None => score(a, &Model::new(config, params), data, dataset),
    }
}

fn metric_name(m: MetricArg) -> &'static str {
    match m {
        MetricArg::Perplexity => "perplexity",
        MetricArg::McAccuracy => "mc_accuracy",
    }
}

#[derive(Serialize)]
struct SweepEntry {
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepOutput {
    attack: AttackKind,
    layer: usize,
    expert: Option<usize>,
    rows: Vec<SweepEntry>,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = load(&a.checkpoint)?;
    let vocab = ck.config.vocab_size;
    let (data, source) = match a.metric {
        MetricArg::Perplexity => {
            let p = a
                .stream
                .as_ref()
                .ok_or_else(|| CliError::Usage("--stream is required".into()))?;
            (EvalData::Stream(load_token_stream(p, vocab)?.ids), p)
        }
        MetricArg::McAccuracy => {
            let p = a
                .items
                .as_ref()
                .ok_or_else(|| CliError::Usage("--items is required".into()))?;
            (EvalData::Items(load_mc_items(p, vocab)?), p)
        }
    };
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let adapters = a.adapters.as_deref().map(LoraAdapterSet::<f32>::load).transpose()?;
    if let Some(ad) = &adapters {
        ad.validate(&ck.params)?;
    }
    let hash = ck.config.config_hash();
    let metric = metric_name(a.metric);
    let row = |spec: String, value: f64| LedgerRow {
        config_hash: hash.clone(),
        command: "eval".into(),
        spec,
        metric: metric.into(),
        value,
    };

    let Some(kind) = a.attack.map(attack_kind) else {
        let report = evaluate(a, &ck.config, &ck.params, adapters.as_ref(), &data, &dataset)?;
        write_json(a.out.as_deref(), &report)?;
        if !a.no_ledger {
            ledger::append(&a.ledger, &[row("none".into(), report.value)])?;
        }
        return Ok(());
    };

    let ks: Vec<usize> = match a.k {
        Some(k) => vec![k],
        None if !a.k_list.is_empty() => a.k_list.clone(),
        None => return Err(CliError::Usage("--attack needs --k or --k-list".into())),
    };
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mw = find_massive_weights_with(&ck.config, &ck.params, detect_size(&ck.config, k_max), rule(a.rule))?;

    if let Some(k) = a.k {
        let spec = AttackSpec::from_report(kind, k, &mw)?;
        let attacked = apply_attack(&ck.config, &ck.params, &spec)?;
        let report = evaluate(a, &ck.config, &attacked, adapters.as_ref(), &data, &dataset)?;
        write_json(a.out.as_deref(), &report)?;
        if !a.no_ledger {
            ledger::append(&a.ledger, &[row(attack_label(&spec), report.value)])?;
        }
        return Ok(());
    }

    let mut entries = Vec::with_capacity(ks.len());
    let mut rows = Vec::new();
    let mut table = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Input(format!("sweep table: {e}"));
    table.write_record(["series", "k", "value"]).map_err(csv_err)?;
    for &k in &ks {
        let result = AttackSpec::from_report(kind, k, &mw).and_then(|spec| {
            let attacked = apply_attack(&ck.config, &ck.params, &spec)?;
            let report = evaluate(a, &ck.config, &attacked, adapters.as_ref(), &data, &dataset)?;
            Ok((spec, report))
        });
        match result {
            Ok((spec, report)) => {
                rows.push(row(attack_label(&spec), report.value));
                table
                    .write_record([kind.to_string(), k.to_string(), report.value.to_string()])
                    .map_err(csv_err)?;
                entries.push(SweepEntry {
                    k,
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("k = {k}: {e}");
                entries.push(SweepEntry {
                    k,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Input("every sweep point failed".into()));
    }
    let out = SweepOutput {
        attack: kind,
        layer: mw.layer,
        expert: mw.expert,
        rows: entries,
    };
    write_json(a.out.as_deref(), &out)?;
    if let Some(p) = &a.csv {
        let bytes = table
            .into_inner()
            .map_err(|e| CliError::Input(format!("sweep table: {e}")))?;
        write_atomic(p, &bytes)?;
    }
    if !a.no_ledger {
        ledger::append(&a.ledger, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    macdrop: bool,
    total_steps: usize,
    val_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<MassiveWeightReport>,
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let ck = load(&a.checkpoint)?;
    let vocab = ck.config.vocab_size;
    let train = load_token_stream(&a.train, vocab)?;
    let val = load_token_stream(&a.val, vocab)?;
    let tc = TrainConfig {
        lr: a.lr,
        warmup_ratio: a.warmup_ratio,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        seed: a.seed,
        lora_rank: a.rank,
        lora_alpha: a.lora_alpha,
        ..TrainConfig::default()
    };
    let schedule = match a.schedule {
        ScheduleArg::Step => ScheduleKind::Step,
        ScheduleArg::EpochBefore => ScheduleKind::EpochBefore,
        ScheduleArg::EpochAfter => ScheduleKind::EpochAfter,
        ScheduleArg::Exp => ScheduleKind::Exp,
    };
    let md = MacDropConfig {
        k: a.k,
        p0: a.p0,
        schedule,
        alpha: a.alpha,
        mask: MaskOptions {
            rescale: a.rescale,
            per_row: a.per_row,
        },
    };
    let macdrop = (!a.no_macdrop).then_some(&md);
    let mut params = ck.params.clone();
    let outcome = finetune(&ck.config, &mut params, &train.ids, &val.ids, &tc, macdrop, |_| {})?;

    if let Some(p) = &a.log {
        write_jsonl(p, &outcome.log)?;
    }
    if let Some(p) = &a.log_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Input(format!("metrics table: {e}"));
        w.write_record(["step", "epoch", "p", "loss", "kept_fraction"])
            .map_err(csv_err)?;
        for s in &outcome.log {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                s.p.to_string(),
                s.loss.to_string(),
                s.kept_fraction.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Input(format!("metrics table: {e}")))?;
        write_atomic(p, &bytes)?;
    }
    if let Some(p) = &a.out_adapters {
        outcome.adapters.save(p)?;
    }
    if a.merge {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| CliError::Usage("--merge needs --out".into()))?;
        let merged = outcome.adapters.merge(&params)?;
        save_checkpoint(out, &ck.config, &merged, &ck.save_options())?;
    }
    if !a.no_ledger {
        let spec = match macdrop {
            Some(m) => format!(
                "macdrop:{};p0={};alpha={};k={};rescale={};per_row={}",
                m.schedule, m.p0, m.alpha, m.k, m.mask.rescale, m.mask.per_row
            ),
            None => "baseline".to_string(),
        };
        let last = *outcome.val_losses.last().expect("initial validation loss");
        ledger::append(
            &a.ledger,
            &[LedgerRow {
                config_hash: ck.config.config_hash(),
                command: "train".into(),
                spec,
                metric: "val_loss".into(),
                value: last,
            }],
        )?;
    }
    write_json(
        None,
        &TrainSummary {
            macdrop: macdrop.is_some(),
            total_steps: outcome.total_steps,
            val_losses: outcome.val_losses,
            report: outcome.report,
        },
    )
}

pub fn plot(a: &PlotArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.from).map_err(|e| massweights::Error::Io {
        path: a.from.clone(),
        source: e,
    })?;
    let fig = figure_from_csv(a.kind, &text, a.stat)?;
    Ok(write_atomic(&a.out, render_svg(&fig).as_bytes())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes_keep_the_extension() {
        assert_eq!(
            k_suffixed(Path::new("d/m.safetensors"), 5),
            Path::new("d/m.k5.safetensors")
        );
        assert_eq!(k_suffixed(Path::new("ckpt"), 0), Path::new("ckpt.k0"));
    }
}
