use std::path::{Path, PathBuf};

use avw2_core::beamform::{delay_and_sum, BeamformPlan};
use avw2_core::data_synth::{gen_corpus, read_corpus, write_atomic, write_corpus, ClipMeta, MultichannelClip};
use avw2_core::model::{Model, ModelConfig};
use avw2_core::trainer::checkpoint::{load_checkpoint, save_checkpoint, VERSION};
use avw2_core::trainer::metrics::{write_summary_csv, MetricsWriter, SummaryRow};
use avw2_core::trainer::{self, evaluate_cer, finetune_ctc, InputCondition, Pretrainer, TrainState};
use clap::Args;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{resolve, BeamformConfig, Resolved, Snapshot};
use crate::error::CliError;
use crate::ConfigArgs;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.csv";

#[derive(Args, Debug)]
pub struct GenData {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of clips.
    #[arg(long)]
    pub clips: Option<usize>,
    /// Write audio only (no video streams).
    #[arg(long)]
    pub audio_only: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct Beamform {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    /// Audio-visual multichannel corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Additional audio-only corpus.
    #[arg(long)]
    pub audio_only_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct Finetune {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero the video stream.
    #[arg(long)]
    pub audio_only: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalAsr {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for the summary CSV and config snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ExtractFeatures {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InspectCheckpoint {
    pub path: PathBuf,
    /// Print a JSON object instead of text.
    #[arg(long)]
    pub json: bool,
}

fn resolved(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<Resolved, CliError> {
    let mut sets = args.sets.clone();
    sets.extend(flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}"))));
    resolve(args.config.as_deref(), &sets)
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("AVW2_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("AVW2_THREADS={v} is not a positive integer"))),
    }
}

fn path_str(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn write_snapshot(out: &Path, command: &str, inputs: Map<String, Value>, r: &Resolved) -> Result<Snapshot, CliError> {
    let snap = Snapshot {
        command: command.into(),
        inputs,
        config: r.config.clone(),
    };
    write_json(&out.join(CONFIG_SNAPSHOT), &snap)?;
    Ok(snap)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(avw2_core::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<MultichannelClip>, CliError> {
    let clips = read_corpus(dir)?;
    if clips.is_empty() {
        return Err(avw2_core::Error::Manifest(format!("{} holds no clips", dir.display())).into());
    }
    Ok(clips)
}

/// Model configuration stored in a checkpoint's snapshot.
fn checkpoint_model(state: &TrainState, path: &Path) -> Result<ModelConfig, CliError> {
    let m = state.config.get("config").and_then(|c| c.get("model")).ok_or_else(|| {
        avw2_core::Error::Checkpoint {
            offset: 0,
            msg: format!("{} carries no model configuration", path.display()),
        }
    })?;
    Ok(serde_json::from_value(m.clone()).map_err(avw2_core::Error::from)?)
}

/// Takes the model from the checkpoint unless the user set one that differs.
fn reconcile_model(r: &mut Resolved, ckpt: ModelConfig) -> Result<(), CliError> {
    if r.touched("model") && r.config.model != ckpt {
        return Err(CliError::Conflict(
            "model configuration differs from the one stored in the checkpoint".into(),
        ));
    }
    r.config.model = ckpt;
    Ok(())
}

fn load_model(r: &mut Resolved, path: &Path) -> Result<(Model, TrainState), CliError> {
    let state = load_checkpoint(path)?;
    reconcile_model(r, checkpoint_model(&state, path)?)?;
    let model = Model::new(r.config.model.clone())?;
    model.check_params(&state.params)?;
    Ok((model, state))
}

pub fn gen_data(a: GenData) -> Result<(), CliError> {
    let r = resolved(
        &a.cfg,
        &[
            ("corpus.seed", a.seed.map(|s| s.to_string())),
            ("corpus.clips", a.clips.map(|s| s.to_string())),
        ],
    )?;
    let mut clips = gen_corpus(&r.config.corpus, threads()?)?;
    if a.audio_only {
        for c in &mut clips {
            c.video = None;
        }
    }
    write_corpus(&clips, &a.out)?;
    let mut inputs = Map::new();
    inputs.insert("audio_only".into(), Value::Bool(a.audio_only));
    write_snapshot(&a.out, "gen-data", inputs, &r)?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

pub fn beamform_clip(clip: &MultichannelClip, cfg: &BeamformConfig) -> Result<(MultichannelClip, BeamformPlan), CliError> {
    let lag = cfg.max_lag.min(clip.samples().saturating_sub(1) / 2);
    let plan = BeamformPlan::estimate(&clip.channels, lag, cfg.weighting)
        .map_err(|e| avw2_core::Error::Data { clip: clip.id.clone(), msg: e.to_string() })?;
    let out = delay_and_sum(&clip.channels, &plan)?;
    let single = MultichannelClip {
        id: clip.id.clone(),
        channels: vec![out],
        video: clip.video.clone(),
        transcript: clip.transcript.clone(),
        meta: ClipMeta {
            delays: vec![0],
            snrs: vec![None],
            seed: clip.meta.seed,
        },
    };
    Ok((single, plan))
}

pub fn beamform(a: Beamform) -> Result<(), CliError> {
    let r = resolved(&a.cfg, &[])?;
    let clips = load_corpus(&a.corpus)?;
    let mut out = Vec::with_capacity(clips.len());
    let mut plans = String::new();
    for clip in &clips {
        let (single, plan) = beamform_clip(clip, &r.config.beamform)?;
        let line = json!({"id": clip.id, "delays": plan.delays, "weights": plan.weights});
        plans.push_str(&format!("{line}\n"));
        out.push(single);
    }
    write_corpus(&out, &a.out)?;
    write_atomic(&a.out.join("plans.jsonl"), plans.as_bytes())?;
    let mut inputs = Map::new();
    inputs.insert("corpus".into(), path_str(&a.corpus));
    write_snapshot(&a.out, "beamform", inputs, &r)?;
    println!("beamformed {} clips into {}", out.len(), a.out.display());
    Ok(())
}

pub fn pretrain(a: Pretrain) -> Result<(), CliError> {
    let mut r = resolved(
        &a.cfg,
        &[
            ("pretrain.steps", a.steps.map(|s| s.to_string())),
            ("pretrain.seed", a.seed.map(|s| s.to_string())),
        ],
    )?;
    let av = load_corpus(&a.corpus)?;
    let ao = match &a.audio_only_corpus {
        Some(dir) => load_corpus(dir)?,
        None => Vec::new(),
    };
    let channels = av[0].num_channels();
    if r.touched("model.channels") && r.config.model.channels != channels {
        return Err(CliError::Conflict(format!(
            "model.channels = {} but the corpus has {channels} channels",
            r.config.model.channels
        )));
    }
    r.config.model.channels = channels;
    let mut state = match &a.resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            let stored = checkpoint_model(&state, path)?;
            if stored != r.config.model {
                return Err(CliError::Conflict("resumed checkpoint was trained with a different model".into()));
            }
            state
        }
        None => {
            let model = Model::new(r.config.model.clone())?;
            TrainState::new(model.init_params(r.config.pretrain.seed), r.config.pretrain.adam, Value::Null)
        }
    };
    let model = Model::new(r.config.model.clone())?;
    model.check_params(&state.params)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    let mut inputs = Map::new();
    inputs.insert("corpus".into(), path_str(&a.corpus));
    if let Some(p) = &a.audio_only_corpus {
        inputs.insert("audio_only_corpus".into(), path_str(p));
    }
    if let Some(p) = &a.resume {
        inputs.insert("resume".into(), path_str(p));
    }
    let snap = write_snapshot(&a.out, "pretrain", inputs, &r)?;
    state.config = serde_json::to_value(&snap).map_err(avw2_core::Error::from)?;

    let cfg = &r.config.pretrain;
    let trainer = Pretrainer::new(&model, cfg, &av, &ao)?;
    let mut metrics = MetricsWriter::create(&a.out.join(METRICS), r.config.timing)?;
    trainer.run(&mut state, cfg.steps, |rec| {
        if rec.step == 1 || rec.step % 25 == 0 || rec.step == cfg.steps {
            println!(
                "step {:>5}  total {:.4}  c1 {:.4}  c2 {:.4}  sa {:.4}  lr {:.2e}",
                rec.step, rec.losses.total, rec.losses.l_c1, rec.losses.l_c2, rec.losses.l_sa, rec.lr
            );
        }
        metrics.record(rec)
    })?;
    metrics.finish()?;
    save_checkpoint(&state, &a.out.join(CHECKPOINT))?;
    println!("saved {} at step {}", a.out.join(CHECKPOINT).display(), state.step);
    Ok(())
}

pub fn finetune(a: Finetune) -> Result<(), CliError> {
    let mut r = resolved(
        &a.cfg,
        &[
            ("finetune.steps", a.steps.map(|s| s.to_string())),
            ("finetune.seed", a.seed.map(|s| s.to_string())),
            ("finetune.audio_only", a.audio_only.then(|| "true".to_string())),
        ],
    )?;
    let (model, pre) = load_model(&mut r, &a.checkpoint)?;
    let clips = load_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    let mut inputs = Map::new();
    inputs.insert("corpus".into(), path_str(&a.corpus));
    inputs.insert("checkpoint".into(), path_str(&a.checkpoint));
    let snap = write_snapshot(&a.out, "finetune", inputs, &r)?;

    let cfg = &r.config.finetune;
    let mut lines = String::new();
    let outcome = finetune_ctc(&model, &pre.params, &clips, cfg, |rec| {
        if let Some(cer) = rec.cer {
            println!("step {:>5}  ctc {:.4}  train cer {:.4}", rec.step, rec.loss, cer);
        }
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
        Ok(())
    })?;
    write_atomic(&a.out.join(METRICS), lines.as_bytes())?;
    let mut state = TrainState::new(outcome.params, cfg.adam, serde_json::to_value(&snap).map_err(avw2_core::Error::from)?);
    state.step = cfg.steps;
    save_checkpoint(&state, &a.out.join(CHECKPOINT))?;
    if let Some(cer) = outcome.history.last().and_then(|h| h.cer) {
        println!("final training cer {cer:.4}");
    }
    Ok(())
}

pub fn eval_asr(a: EvalAsr) -> Result<(), CliError> {
    let mut r = resolved(&a.cfg, &[])?;
    let (model, state) = load_model(&mut r, &a.checkpoint)?;
    let clips = load_corpus(&a.corpus)?;
    let beamformed = clips
        .iter()
        .map(|c| beamform_clip(c, &r.config.beamform).map(|(b, _)| b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (name, set) in [("multichannel", &clips), ("beamformed", &beamformed)] {
        let rep = evaluate_cer(&model, &state.params, set, InputCondition::Multichannel)?;
        rows.push(SummaryRow {
            condition: name.into(),
            clips: rep.clips,
            reference_tokens: rep.reference_tokens,
            edits: rep.edits,
            cer: rep.cer,
        });
    }
    println!("{:<14} {:>6} {:>7} {:>6} {:>8}", "condition", "clips", "tokens", "edits", "cer");
    for row in &rows {
        println!(
            "{:<14} {:>6} {:>7} {:>6} {:>8.4}",
            row.condition, row.clips, row.reference_tokens, row.edits, row.cer
        );
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
        write_summary_csv(&out.join(SUMMARY), &rows)?;
        let mut inputs = Map::new();
        inputs.insert("corpus".into(), path_str(&a.corpus));
        inputs.insert("checkpoint".into(), path_str(&a.checkpoint));
        write_snapshot(out, "eval-asr", inputs, &r)?;
    }
    Ok(())
}

pub fn extract_features(a: ExtractFeatures) -> Result<(), CliError> {
    let mut r = resolved(&a.cfg, &[])?;
    let (model, state) = load_model(&mut r, &a.checkpoint)?;
    let clips = load_corpus(&a.corpus)?;
    let records = trainer::extract_features(&model, &state.params, &clips, &a.out)?;
    let mut inputs = Map::new();
    inputs.insert("corpus".into(), path_str(&a.corpus));
    inputs.insert("checkpoint".into(), path_str(&a.checkpoint));
    write_snapshot(&a.out, "extract-features", inputs, &r)?;
    println!("wrote features for {} clips to {}", records.len(), a.out.display());
    Ok(())
}

pub fn inspect_checkpoint(a: InspectCheckpoint) -> Result<(), CliError> {
    let state = load_checkpoint(&a.path)?;
    let command = state.config.get("command").and_then(Value::as_str).unwrap_or("unknown");
    let consistent = checkpoint_model(&state, &a.path)
        .ok()
        .and_then(|m| Model::new(m).ok())
        .map(|m| m.check_params(&state.params).is_ok());
    let summary = json!({
        "format": format!("AVW2 v{VERSION}"),
        "step": state.step,
        "tensors": state.params.len(),
        "parameters": state.params.num_values(),
        "optimizer_step": state.adam.step,
        "command": command,
        "model_consistent": consistent,
    });
    if a.json {
        println!("{summary}");
    } else {
        println!("format: AVW2 v{VERSION}");
        println!("step: {}", state.step);
        println!("tensors: {}", state.params.len());
        println!("parameters: {}", state.params.num_values());
        println!("optimizer step: {}", state.adam.step);
        println!("command: {command}");
        match consistent {
            Some(true) => println!("model config: consistent"),
            Some(false) => println!("model config: MISMATCH"),
            None => println!("model config: not recorded"),
        }
    }
    Ok(())
}
