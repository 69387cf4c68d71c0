//! Pre-training and CTC fine-tuning loops, evaluation probes and feature
//! export.
//!
//! Every random draw in a step is keyed by `(seed, step, batch slot)`, so a
//! run resumed from a checkpoint replays exactly the batches, masks, noise
//! and dropout an uninterrupted run would have seen.

pub mod checkpoint;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::ctc::{ctc_loss, edit_distance, greedy_decode};
use crate::data_synth::{f32_bytes, sha256_hex, write_atomic, MultichannelClip};
use crate::error::{Error, Result};
use crate::fusion_mask::{add_noise, draw_dropout, sample_mask_with, DropoutConfig, DropoutDecision, MaskConfig};
use crate::model::{EncodedValues, Model, ModelConfig};
use crate::objectives::{
    cosine_sim, loss_c1, loss_c2, loss_sa, sample_negatives, total_loss, BatchKind, LossBreakdown, LossConfig,
    LossParts, NegativeSet,
};
use crate::rng;

/// Recorded for the sequence-to-sequence decoder path, which CTC does not use.
pub const LABEL_SMOOTHING: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup: f64,
    pub seed: u64,
    /// Fraction of audio-only batches; `None` picks 0.5 when an audio-only
    /// corpus is supplied and 0 otherwise.
    pub mix_ratio: Option<f64>,
    pub loss: LossConfig,
    pub mask: MaskConfig,
    pub dropout: DropoutConfig,
    /// Dynamic noise SNR range in dB; `None` disables it.
    pub noise_db: Option<(f64, f64)>,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 4,
            lr: 5e-4,
            warmup: 0.1,
            seed: 0,
            mix_ratio: None,
            loss: LossConfig::default(),
            mask: MaskConfig::default(),
            dropout: DropoutConfig::default(),
            noise_db: Some((0.0, 20.0)),
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be positive"));
        }
        if let Some(r) = self.mix_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("mix ratio {r} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::invalid(format!("warmup fraction {} outside [0, 1]", self.warmup)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {}", self.lr)));
        }
        if let Some((lo, hi)) = self.noise_db {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("noise range {lo}..{hi} dB")));
            }
        }
        self.loss.validate()
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup).ceil() as u64
    }

    /// Learning rate for 1-based `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if w == 0 || step >= w {
            self.lr
        } else {
            self.lr * step as f64 / w as f64
        }
    }
}

/// Which encoder-side parameters stay fixed during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Freeze {
    None,
    /// Audio and visual encoders.
    #[default]
    Encoders,
    /// Everything except the CTC head.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub freeze: Freeze,
    /// Zero the video stream for every utterance.
    pub audio_only: bool,
    /// Evaluate training-set CER every this many steps (and at the end).
    pub eval_every: u64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            freeze: Freeze::Encoders,
            audio_only: false,
            eval_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

/// Everything needed to rebuild a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

/// Parameters, optimiser state, step counter and the config snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub config: serde_json::Value,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, adam: AdamConfig, config: serde_json::Value) -> Self {
        TrainState {
            params,
            adam: AdamState::new(adam),
            step: 0,
            config,
        }
    }
}

/// One pre-training step as recorded in the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub kind: BatchKind,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub batch: Vec<String>,
}

/// Homogeneous batch chosen for a step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

fn sum_grads(acc: &mut BTreeMap<String, Tensor<f32>>, g: BTreeMap<String, Tensor<f32>>) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += *y;
                }
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
}

fn scale_grads(acc: &mut BTreeMap<String, Tensor<f32>>, by: f32) {
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= by);
    }
}

fn numeric(step: u64, batch: &[String]) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { .. } => Error::NanLoss {
            step,
            batch: batch.to_vec(),
        },
        other => other,
    }
}

fn channel_refs(clip: &MultichannelClip) -> Vec<&[f32]> {
    clip.channels.iter().map(Vec::as_slice).collect()
}

/// Loss values of one utterance.
#[derive(Clone, Debug, Default)]
struct ClipLosses {
    c1: f64,
    c2: f64,
    sa: f64,
    per_channel: Vec<Option<f64>>,
    masked: usize,
}

pub struct Pretrainer<'a> {
    pub model: &'a Model,
    pub config: &'a PretrainConfig,
    pub av: &'a [MultichannelClip],
    pub audio_only: &'a [MultichannelClip],
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        model: &'a Model,
        config: &'a PretrainConfig,
        av: &'a [MultichannelClip],
        audio_only: &'a [MultichannelClip],
    ) -> Result<Self> {
        config.validate()?;
        let ratio = config.mix_ratio.unwrap_or(0.0);
        if av.is_empty() && audio_only.is_empty() {
            return Err(Error::invalid("pre-training needs at least one clip"));
        }
        if ratio > 0.0 && audio_only.is_empty() {
            return Err(Error::invalid("mix ratio > 0 but no audio-only corpus"));
        }
        if ratio < 1.0 && config.mix_ratio.is_some() && av.is_empty() {
            return Err(Error::invalid("mix ratio < 1 but no audio-visual corpus"));
        }
        for c in av {
            if c.num_channels() != model.config.channels {
                return Err(Error::Data {
                    clip: c.id.clone(),
                    msg: format!("{} channels, model expects {}", c.num_channels(), model.config.channels),
                });
            }
        }
        Ok(Pretrainer {
            model,
            config,
            av,
            audio_only,
        })
    }

    pub fn mix_ratio(&self) -> f64 {
        match self.config.mix_ratio {
            Some(r) => r,
            None if self.av.is_empty() => 1.0,
            None if self.audio_only.is_empty() => 0.0,
            None => 0.5,
        }
    }

    /// Batch for 1-based `step`, fixed by the seed alone.
    pub fn plan(&self, step: u64) -> BatchPlan {
        let mut r = rng::stream(self.config.seed, "schedule", step);
        let kind = if r.random_bool(self.mix_ratio()) {
            BatchKind::AudioOnly
        } else {
            BatchKind::AudioVisual
        };
        let pool = match kind {
            BatchKind::AudioVisual => self.av.len(),
            BatchKind::AudioOnly => self.audio_only.len(),
        };
        let n = self.config.batch_size.min(pool);
        let mut indices = sample(&mut r, pool, n).into_vec();
        indices.sort_unstable();
        BatchPlan { kind, indices }
    }

    fn clip(&self, kind: BatchKind, i: usize) -> &MultichannelClip {
        match kind {
            BatchKind::AudioVisual => &self.av[i],
            BatchKind::AudioOnly => &self.audio_only[i],
        }
    }

    fn noisy(&self, audio: &[&[f32]], seed: u64) -> Result<Vec<Vec<f32>>> {
        let Some((lo, hi)) = self.config.noise_db else {
            return Ok(audio.iter().map(|a| a.to_vec()).collect());
        };
        let mut r = rng::stream(seed, "snr", 0);
        audio
            .iter()
            .enumerate()
            .map(|(c, a)| {
                let snr = if hi > lo { r.random_range(lo..hi) } else { lo };
                add_noise(a, snr, rng::derive(seed, "noise", c as u64))
            })
            .collect()
    }

    fn clip_loss(
        &self,
        g: &mut Graph<f32>,
        p: &ParamStore<f32>,
        clip: &MultichannelClip,
        kind: BatchKind,
        seed: u64,
    ) -> Result<(Var, ClipLosses)> {
        let m = self.model;
        let cfg = &self.config.loss;
        let audio = channel_refs(clip);
        let (audio, video) = match kind {
            BatchKind::AudioVisual => (audio, clip.video.as_ref()),
            BatchKind::AudioOnly => (audio[..1].to_vec(), None),
        };
        let noisy = self.noisy(&audio, seed)?;
        let noisy_refs: Vec<&[f32]> = noisy.iter().map(Vec::as_slice).collect();
        let e = m.encode(g, p, &noisy_refs, video)?;
        let decision = match kind {
            BatchKind::AudioVisual => draw_dropout(&self.config.dropout, m.config.channels, seed)?,
            BatchKind::AudioOnly => DropoutDecision::audio_only(m.config.channels, 1),
        };
        let decision = m.layout(&e, Some(&decision));
        let fused = m.fuse(g, &e, &decision)?;
        let frames = g.shape(fused)[0];
        let mask = sample_mask_with(frames, self.config.mask.span, self.config.mask.prob, seed, true, 2);
        let negs = sample_negatives(&mask.indices, cfg.negatives, seed)?;
        let mut dropout_rng = rng::stream(seed, "context-dropout", 0);
        let c = m.contextualize(g, p, fused, Some(&mask), Some(&mut dropout_rng))?;
        let mut out = ClipLosses {
            masked: mask.len(),
            per_channel: vec![None; m.config.channels],
            ..ClipLosses::default()
        };
        let loss = match kind {
            BatchKind::AudioVisual => {
                let pf = m.fused_prediction(g, p, c)?;
                let l1 = loss_c1(g, pf, fused, &negs, cfg)?;
                out.c1 = g.value(l1).item() as f64;
                if cfg.use_inter && !decision.active_channels().is_empty() {
                    let pc = m.channel_prediction(g, p, c)?;
                    let (l2, per) = loss_c2(g, pc, &e.channels, &decision.channels, &negs, cfg)?;
                    out.c2 = g.value(l2).item() as f64;
                    out.per_channel = per.iter().map(|v| v.map(|v| g.value(v).item() as f64)).collect();
                    g.add(l1, l2)?
                } else {
                    l1
                }
            }
            BatchKind::AudioOnly => {
                let pc = m.channel_prediction(g, p, c)?;
                let l = loss_sa(g, pc, e.channels[0], &negs, cfg)?;
                out.sa = g.value(l).item() as f64;
                g.scale(l, cfg.single_weight)?
            }
        };
        Ok((loss, out))
    }

    /// Runs step `state.step + 1`: forward, backward, Adam update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let step = state.step + 1;
        let plan = self.plan(step);
        let ids: Vec<String> = plan.indices.iter().map(|&i| self.clip(plan.kind, i).id.clone()).collect();
        let base = rng::derive(self.config.seed, "step", step);
        let mut grads = BTreeMap::new();
        let mut parts = Vec::with_capacity(plan.indices.len());
        for (slot, &i) in plan.indices.iter().enumerate() {
            let mut g = Graph::new();
            let seed = rng::derive(base, "slot", slot as u64);
            let (loss, losses) = self
                .clip_loss(&mut g, &state.params, self.clip(plan.kind, i), plan.kind, seed)
                .map_err(numeric(step, &ids))?;
            if !g.value(loss).all_finite() {
                return Err(Error::NanLoss { step, batch: ids });
            }
            sum_grads(&mut grads, g.backward(loss)?.named(&g));
            parts.push(losses);
        }
        let n = parts.len() as f64;
        scale_grads(&mut grads, 1.0 / n as f32);
        let mean = |f: &dyn Fn(&ClipLosses) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let channels = self.model.config.channels;
        let per_channel = (0..channels)
            .map(|c| {
                let v: Vec<f64> = parts.iter().filter_map(|p| p.per_channel[c]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let (l_c1, l_c2, l_sa) = (mean(&|p| p.c1), mean(&|p| p.c2), mean(&|p| p.sa));
        let lambda = self.config.loss.single_weight;
        let total = match plan.kind {
            BatchKind::AudioVisual => total_loss(
                &LossParts {
                    c1: Some(l_c1),
                    c2: Some(l_c2),
                    sa: None,
                },
                lambda,
                plan.kind,
            )?,
            BatchKind::AudioOnly => total_loss(
                &LossParts {
                    sa: Some(l_sa),
                    ..LossParts::default()
                },
                lambda,
                plan.kind,
            )?,
        };
        if !total.is_finite() {
            return Err(Error::NanLoss { step, batch: ids });
        }
        let lr = self.config.lr_at(step);
        state.adam.step(&mut state.params, &grads, lr)?;
        state.step = step;
        Ok(StepRecord {
            step,
            kind: plan.kind,
            lr,
            losses: LossBreakdown {
                l_c1,
                l_c2,
                l_sa,
                total,
                per_channel,
                masked: parts.iter().map(|p| p.masked).sum(),
            },
            batch: ids,
        })
    }

    /// Steps until `state.step == until`, reporting each record.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: u64,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while state.step < until {
            let rec = self.step(state)?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

/// Masking and negative sampling used by [`masked_rank_accuracy`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub mask: MaskConfig,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mask: MaskConfig::default(),
            negatives: LossConfig::default().negatives,
            seed: 0,
        }
    }
}

/// Masked positions where the prediction is strictly closer (cosine) to its
/// own target than to every sampled negative, and the number of positions.
pub fn rank_hits(pred: &Tensor<f32>, targets: &Tensor<f32>, negs: &NegativeSet) -> Result<(usize, usize)> {
    let row = |t: &Tensor<f32>, i: usize| -> Vec<f64> { t.row(i).iter().map(|&v| f64::from(v)).collect() };
    let mut hits = 0;
    for (&t, srcs) in negs.positions.iter().zip(&negs.sources) {
        let p = row(pred, t);
        let pos = cosine_sim(&p, &row(targets, t))?;
        let mut best = f64::NEG_INFINITY;
        for &s in srcs {
            best = best.max(cosine_sim(&p, &row(targets, s))?);
        }
        if pos > best {
            hits += 1;
        }
    }
    Ok((hits, negs.positions.len()))
}

/// Fraction of masked positions where the fused prediction `c^f` ranks its
/// own target `z^f` above all sampled negatives. No noise, no dropout.
pub fn masked_rank_accuracy(
    model: &Model,
    params: &ParamStore<f32>,
    clips: &[MultichannelClip],
    probe: &ProbeConfig,
) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for (i, clip) in clips.iter().enumerate() {
        let seed = rng::derive(probe.seed, "probe", i as u64);
        let mut g = Graph::new();
        let e = model.encode(&mut g, params, &channel_refs(clip), clip.video.as_ref())?;
        let decision = model.layout(&e, None);
        let fused = model.fuse(&mut g, &e, &decision)?;
        let frames = g.shape(fused)[0];
        let mask = sample_mask_with(frames, probe.mask.span, probe.mask.prob, seed, true, 2);
        let negs = sample_negatives(&mask.indices, probe.negatives, seed)?;
        let c = model.contextualize(&mut g, params, fused, Some(&mask), None)?;
        let pf = model.fused_prediction(&mut g, params, c)?;
        let (h, n) = rank_hits(g.value(pf), g.value(fused), &negs)?;
        hits += h;
        total += n;
    }
    if total == 0 {
        return Err(Error::invalid("no masked positions to probe"));
    }
    Ok(hits as f64 / total as f64)
}

/// How clips are presented to the recogniser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputCondition {
    /// Every channel plus video (when the clip has it).
    Multichannel,
    /// Every channel, video zeroed.
    AudioOnly,
}

fn condition_layout(model: &Model, e: &crate::model::Encoded, cond: InputCondition) -> DropoutDecision {
    let mut d = model.layout(e, None);
    if cond == InputCondition::AudioOnly {
        d.video = true;
    }
    d
}

/// Context features `c^f` for one clip: no masking, no dropout, no noise.
pub fn context_features(
    model: &Model,
    params: &ParamStore<f32>,
    clip: &MultichannelClip,
    cond: InputCondition,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let e = model.encode(&mut g, params, &channel_refs(clip), clip.video.as_ref())?;
    let d = condition_layout(model, &e, cond);
    let fused = model.fuse(&mut g, &e, &d)?;
    let c = model.contextualize(&mut g, params, fused, None, None)?;
    Ok(g.value(c).clone())
}

/// Greedy transcript for one clip.
pub fn transcribe(
    model: &Model,
    params: &ParamStore<f32>,
    clip: &MultichannelClip,
    cond: InputCondition,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let e = model.encode(&mut g, params, &channel_refs(clip), clip.video.as_ref())?;
    let d = condition_layout(model, &e, cond);
    let fused = model.fuse(&mut g, &e, &d)?;
    let c = model.contextualize(&mut g, params, fused, None, None)?;
    let lp = model.ctc_log_probs(&mut g, params, c)?;
    Ok(greedy_decode(g.value(lp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    /// Total edits over total reference tokens.
    pub cer: f64,
    pub edits: usize,
    pub reference_tokens: usize,
    pub clips: usize,
}

pub fn evaluate_cer(
    model: &Model,
    params: &ParamStore<f32>,
    clips: &[MultichannelClip],
    cond: InputCondition,
) -> Result<CerReport> {
    let (mut edits, mut refs) = (0, 0);
    for clip in clips {
        if clip.transcript.is_empty() {
            return Err(Error::Data {
                clip: clip.id.clone(),
                msg: "empty reference transcript".into(),
            });
        }
        let hyp = transcribe(model, params, clip, cond)?;
        edits += edit_distance(&hyp, &clip.transcript);
        refs += clip.transcript.len();
    }
    if refs == 0 {
        return Err(Error::invalid("CER over an empty corpus"));
    }
    Ok(CerReport {
        cer: edits as f64 / refs as f64,
        edits,
        reference_tokens: refs,
        clips: clips.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Training-set CER when evaluated at this step.
    pub cer: Option<f64>,
}

pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<FinetuneRecord>,
}

/// Applies the freeze policy to `params`.
pub fn apply_freeze(params: &mut ParamStore<f32>, freeze: Freeze) {
    params.unfreeze_all();
    match freeze {
        Freeze::None => {}
        Freeze::Encoders => {
            params.freeze_prefix("audio_encoder");
            params.freeze_prefix("visual_encoder");
        }
        Freeze::All => {
            let names: Vec<String> = params
                .names()
                .filter(|n| !n.starts_with(crate::model::CTC_HEAD))
                .cloned()
                .collect();
            for n in names {
                params.freeze_prefix(&n);
            }
        }
    }
}

/// Trains the CTC head (and whatever the freeze policy leaves trainable) on
/// labelled clips, reporting training-set CER along the way.
pub fn finetune_ctc(
    model: &Model,
    pretrained: &ParamStore<f32>,
    clips: &[MultichannelClip],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(&FinetuneRecord) -> Result<()>,
) -> Result<FinetuneOutcome> {
    model.check_params(pretrained)?;
    if clips.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("fine-tuning needs clips, steps and a batch size"));
    }
    for c in clips {
        if let Some(t) = c.transcript.iter().find(|&&t| t >= model.config.vocab) {
            return Err(Error::Data {
                clip: c.id.clone(),
                msg: format!("token {t} outside the model vocabulary of {}", model.config.vocab),
            });
        }
        if c.transcript.is_empty() {
            return Err(Error::Data {
                clip: c.id.clone(),
                msg: "empty transcript".into(),
            });
        }
    }
    let cond = if cfg.audio_only {
        InputCondition::AudioOnly
    } else {
        InputCondition::Multichannel
    };
    let mut params = pretrained.clone();
    apply_freeze(&mut params, cfg.freeze);
    // Frozen encoders see no noise here, so their outputs can be cached.
    let cache: Option<Vec<EncodedValues>> = match cfg.freeze {
        Freeze::None => None,
        _ => Some(
            clips
                .iter()
                .map(|c| model.encode_values(&params, &channel_refs(c), c.video.as_ref()))
                .collect::<Result<_>>()?,
        ),
    };
    let mut adam = AdamState::new(cfg.adam);
    let mut history = Vec::new();
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, "finetune-batch", step);
        let n = cfg.batch_size.min(clips.len());
        let mut idx = sample(&mut r, clips.len(), n).into_vec();
        idx.sort_unstable();
        let ids: Vec<String> = idx.iter().map(|&i| clips[i].id.clone()).collect();
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &i in &idx {
            let clip = &clips[i];
            let mut g = Graph::new();
            let e = match &cache {
                Some(vals) => model.bind(&mut g, &vals[i])?,
                None => model.encode(&mut g, &params, &channel_refs(clip), clip.video.as_ref())?,
            };
            let d = condition_layout(model, &e, cond);
            let fused = model.fuse(&mut g, &e, &d)?;
            let c = model
                .contextualize(&mut g, &params, fused, None, None)
                .map_err(numeric(step, &ids))?;
            let lp = model.ctc_log_probs(&mut g, &params, c).map_err(numeric(step, &ids))?;
            let loss = ctc_loss(&mut g, lp, &clip.transcript).map_err(|e| match e {
                Error::InfeasibleTarget { .. } => Error::Data {
                    clip: clip.id.clone(),
                    msg: e.to_string(),
                },
                other => numeric(step, &ids)(other),
            })?;
            let v = f64::from(g.value(loss).item());
            if !v.is_finite() {
                return Err(Error::NanLoss { step, batch: ids });
            }
            loss_sum += v;
            sum_grads(&mut grads, g.backward(loss)?.named(&g));
        }
        scale_grads(&mut grads, 1.0 / idx.len() as f32);
        adam.step(&mut params, &grads, cfg.lr)?;
        let cer = if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            Some(evaluate_cer(model, &params, clips, cond)?.cer)
        } else {
            None
        };
        let rec = FinetuneRecord {
            step,
            loss: loss_sum / idx.len() as f64,
            lr: cfg.lr,
            cer,
        };
        on_step(&rec)?;
        history.push(rec);
    }
    params.unfreeze_all();
    Ok(FinetuneOutcome { params, history })
}

/// One exported feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub path: String,
    pub frames: usize,
    pub dim: usize,
    pub sha256: String,
}

pub const FEATURE_MANIFEST: &str = "features.jsonl";

/// Writes `c^f` for every clip as `features/<id>.f32` (row-major `T×d`,
/// little-endian) plus a `features.jsonl` index.
pub fn extract_features(
    model: &Model,
    params: &ParamStore<f32>,
    clips: &[MultichannelClip],
    out: &Path,
) -> Result<Vec<FeatureRecord>> {
    let mut records = Vec::with_capacity(clips.len());
    for clip in clips {
        let c = context_features(model, params, clip, InputCondition::Multichannel)?;
        let rel = format!("features/{}.f32", clip.id);
        let bytes = f32_bytes(c.data());
        write_atomic(&out.join(&rel), &bytes)?;
        records.push(FeatureRecord {
            id: clip.id.clone(),
            path: rel,
            frames: c.shape()[0],
            dim: c.shape()[1],
            sha256: sha256_hex(&bytes),
        });
    }
    let mut index = String::new();
    for r in &records {
        index.push_str(&serde_json::to_string(r)?);
        index.push('\n');
    }
    write_atomic(&out.join(FEATURE_MANIFEST), index.as_bytes())?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        let cfg = PretrainConfig {
            steps: 100,
            ..PretrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 10);
        assert!((cfg.lr_at(1) - 5e-5).abs() < 1e-12);
        assert_eq!(cfg.lr_at(10), 5e-4);
        assert_eq!(cfg.lr_at(99), 5e-4);
    }

    #[test]
    fn mix_ratio_bounds() {
        let cfg = PretrainConfig {
            mix_ratio: Some(1.5),
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
