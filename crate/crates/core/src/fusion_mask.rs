//! Stream fusion, span masking, modality/channel dropout and additive noise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::encoders::{FeatureSequence, StreamTag};
use crate::error::{Error, Result};
use crate::rng;

/// Retry budget for forced redraws before falling back to a direct pick.
const MAX_REDRAWS: usize = 1000;

/// Which streams are zeroed for one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutDecision {
    pub video: bool,
    pub channels: Vec<bool>,
    pub seed: u64,
}

impl DropoutDecision {
    pub fn keep_all(channels: usize) -> Self {
        DropoutDecision {
            video: false,
            channels: vec![false; channels],
            seed: 0,
        }
    }

    /// Layout for audio-only input: video and every channel but the first
    /// `present` are zero-filled.
    pub fn audio_only(channels: usize, present: usize) -> Self {
        DropoutDecision {
            video: true,
            channels: (0..channels).map(|c| c >= present).collect(),
            seed: 0,
        }
    }

    pub fn active_channels(&self) -> Vec<usize> {
        (0..self.channels.len()).filter(|&c| !self.channels[c]).collect()
    }

    pub fn any_survivor(&self) -> bool {
        !self.video || self.channels.iter().any(|d| !d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub video: f64,
    pub channel: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            video: 0.25,
            channel: 0.1,
        }
    }
}

impl DropoutConfig {
    pub const NONE: DropoutConfig = DropoutConfig {
        video: 0.0,
        channel: 0.0,
    };
}

/// Independent Bernoulli drop per stream, redrawn jointly while every
/// stream is dropped.
pub fn draw_dropout(cfg: &DropoutConfig, channels: usize, seed: u64) -> Result<DropoutDecision> {
    for (name, p) in [("video", cfg.video), ("channel", cfg.channel)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} drop probability {p} outside [0, 1]")));
        }
    }
    let mut r = rng::stream(seed, "dropout", 0);
    for _ in 0..MAX_REDRAWS {
        let d = DropoutDecision {
            video: r.random_bool(cfg.video),
            channels: (0..channels).map(|_| r.random_bool(cfg.channel)).collect(),
            seed,
        };
        if d.any_survivor() {
            return Ok(d);
        }
    }
    // Only reachable when every probability is (near) 1: keep one stream.
    let mut d = DropoutDecision {
        video: true,
        channels: vec![true; channels],
        seed,
    };
    let keep = r.random_range(0..=channels);
    if keep == channels {
        d.video = false;
    } else {
        d.channels[keep] = false;
    }
    Ok(d)
}

/// Concatenates `[video, channel 0, .., channel C-1]` along the feature
/// axis. Dropped streams contribute exact zeros and no gradient.
pub fn fuse<R: Real>(g: &mut Graph<R>, video: Var, channels: &[Var], decision: &DropoutDecision) -> Result<Var> {
    if decision.channels.len() != channels.len() {
        return Err(Error::invalid(format!(
            "dropout decision covers {} channels, got {}",
            decision.channels.len(),
            channels.len()
        )));
    }
    let t = g.shape(video)[0];
    let mut parts = Vec::with_capacity(channels.len() + 1);
    for (&v, dropped) in std::iter::once(&video)
        .chain(channels)
        .zip(std::iter::once(decision.video).chain(decision.channels.iter().copied()))
    {
        let s = g.shape(v).to_vec();
        if s.len() != 2 || s[0] != t {
            return Err(Error::shape("fuse", g.shape(video), &s));
        }
        parts.push(if dropped { g.constant(Tensor::zeros(&s)) } else { v });
    }
    g.concat_last(&parts)
}

/// Value-level [`fuse`] over encoded sequences.
pub fn fuse_features(
    video: &FeatureSequence,
    channels: &[FeatureSequence],
    decision: &DropoutDecision,
) -> Result<FeatureSequence> {
    let mut g = Graph::<f32>::new();
    let v = g.constant(video.features.clone());
    let cs: Vec<Var> = channels.iter().map(|c| g.constant(c.features.clone())).collect();
    let f = fuse(&mut g, v, &cs, decision)?;
    FeatureSequence::new(StreamTag::Fused, g.value(f).clone())
}

/// Masked time indices plus the parameters that produced them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub frames: usize,
    pub indices: Vec<usize>,
    pub span: usize,
    pub prob_bits: u64,
    pub seed: u64,
}

impl MaskSpec {
    /// Union of spans `[s, s + span)` clipped to `frames`.
    pub fn from_starts(frames: usize, span: usize, starts: &[usize]) -> Self {
        let mut flags = vec![false; frames];
        for &s in starts {
            for f in flags.iter_mut().skip(s).take(span) {
                *f = true;
            }
        }
        MaskSpec {
            frames,
            indices: (0..frames).filter(|&t| flags[t]).collect(),
            span,
            prob_bits: 0,
            seed: 0,
        }
    }

    pub fn prob(&self) -> f64 {
        f64::from_bits(self.prob_bits)
    }

    pub fn as_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.frames];
        for &i in &self.indices {
            flags[i] = true;
        }
        flags
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Span masking: each frame starts a span of `span` frames with
/// probability `prob`. With `force` and `prob > 0`, empty draws are redrawn
/// until at least `min_count` frames are masked.
pub fn sample_mask_with(frames: usize, span: usize, prob: f64, seed: u64, force: bool, min_count: usize) -> MaskSpec {
    let span = span.max(1);
    let prob = prob.clamp(0.0, 1.0);
    let need = if force && prob > 0.0 { min_count.clamp(1, frames) } else { 0 };
    let mut r = rng::stream(seed, "mask", 0);
    let mut spec = MaskSpec::from_starts(frames, span, &[]);
    for _ in 0..MAX_REDRAWS {
        let starts: Vec<usize> = (0..frames).filter(|_| r.random_bool(prob)).collect();
        spec = MaskSpec::from_starts(frames, span, &starts);
        if spec.len() >= need {
            break;
        }
    }
    if spec.len() < need {
        // Fallback for vanishing `prob`: evenly spaced spans until enough.
        let starts: Vec<usize> = (0..frames).step_by(span + 1).collect();
        let mut chosen = Vec::new();
        for s in starts {
            chosen.push(s);
            spec = MaskSpec::from_starts(frames, span, &chosen);
            if spec.len() >= need {
                break;
            }
        }
    }
    spec.prob_bits = prob.to_bits();
    spec.seed = seed;
    spec
}

/// [`sample_mask_with`] forcing at least one masked frame.
pub fn sample_mask(frames: usize, span: usize, prob: f64, seed: u64) -> MaskSpec {
    sample_mask_with(frames, span, prob, seed, true, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub span: usize,
    pub prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { span: 3, prob: 0.2 }
    }
}

/// Replaces masked rows of `features[T, D]` with `embedding[D]`.
pub fn apply_mask<R: Real>(g: &mut Graph<R>, features: Var, spec: &MaskSpec, embedding: Var) -> Result<Var> {
    let (fs, es) = (g.shape(features).to_vec(), g.shape(embedding).to_vec());
    if fs.len() != 2 || es != [fs[1]] {
        return Err(Error::shape("apply_mask", &fs, &es));
    }
    if fs[0] != spec.frames {
        return Err(Error::shape("apply_mask", &fs, &[spec.frames]));
    }
    g.mask_rows(features, embedding, &spec.as_flags())
}

/// Mean power of a signal.
pub fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len().max(1) as f64
}

/// Adds white Gaussian noise scaled so the realised SNR is exactly
/// `snr_db`. An infinite SNR returns the input unchanged.
pub fn add_noise(waveform: &[f32], snr_db: f64, seed: u64) -> Result<Vec<f32>> {
    if snr_db == f64::INFINITY {
        return Ok(waveform.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr {snr_db} dB is not a number")));
    }
    let ps = power(waveform);
    if ps <= 0.0 {
        return Err(Error::invalid("cannot set an SNR on a zero-power signal"));
    }
    let mut r = rng::stream(seed, "noise", 0);
    let noise: Vec<f64> = (0..waveform.len()).map(|_| rng::gaussian(&mut r)).collect();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let gain = (ps / 10f64.powf(snr_db / 10.0) / pn).sqrt();
    Ok(waveform
        .iter()
        .zip(&noise)
        .map(|(&x, &n)| (f64::from(x) + gain * n) as f32)
        .collect())
}
