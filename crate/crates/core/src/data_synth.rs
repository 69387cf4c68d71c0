//! Synthetic multichannel audio-visual clips and the on-disk corpus format.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.jsonl          one JSON record per clip
//! audio/<id>.ch<k>.f32    little-endian f32 samples, one file per channel
//! video/<id>.f32          little-endian f32 pixels, frame-major T×16×16
//! text/<id>.txt           space-separated token indices
//! ```

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::encoders::{AudioEncoderConfig, FRAME_SHIFT, SAMPLE_RATE, VIDEO_FPS};
use crate::error::{Error, Result};
use crate::fusion_mask::add_noise;
use crate::rng;

pub const VOCAB_SIZE: usize = 8;
pub const FRAME_SIZE: usize = 16;
pub const MAX_DELAY: i32 = 64;
pub const MANIFEST: &str = "manifest.jsonl";

/// Fundamental frequency (Hz) at the start of each token.
const TOKEN_F0: [f64; VOCAB_SIZE] = [140.0, 600.0, 180.0, 520.0, 230.0, 450.0, 290.0, 380.0];
/// Octaves swept across a token slice; the sign sets the direction.
const TOKEN_SWEEP: [f64; VOCAB_SIZE] = [2.0, -1.8, 1.6, -1.5, 1.4, -1.6, 1.2, -1.0];
/// Amplitudes of harmonics 1..=3.
const TOKEN_HARMONICS: [[f64; 3]; VOCAB_SIZE] = [
    [1.0, 0.5, 0.25],
    [0.6, 1.0, 0.3],
    [1.0, 0.2, 0.6],
    [0.4, 0.6, 1.0],
    [1.0, 0.8, 0.1],
    [0.5, 0.3, 0.9],
    [0.9, 0.1, 0.4],
    [0.3, 1.0, 0.7],
];
const CONTENT_GAIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub tokens: Vec<usize>,
    pub channels: usize,
    /// Seconds.
    pub duration: f64,
    /// Per-channel delay in samples; positive means the channel lags.
    pub delays: Vec<i32>,
    /// Per-channel SNR in dB; `f64::INFINITY` means noiseless.
    pub snrs: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub delays: Vec<i32>,
    /// `None` for a noiseless channel.
    pub snrs: Vec<Option<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelClip {
    pub id: String,
    pub channels: Vec<Vec<f32>>,
    /// `T×16×16`; absent for audio-only corpora.
    pub video: Option<Tensor<f32>>,
    pub transcript: Vec<usize>,
    pub meta: ClipMeta,
}

impl MultichannelClip {
    pub fn samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.samples() / FRAME_SHIFT
    }
}

/// Frame range `[start, end)` covered by each token.
pub fn token_slices(tokens: usize, frames: usize) -> Vec<(usize, usize)> {
    (0..tokens)
        .map(|j| (j * frames / tokens, (j + 1) * frames / tokens))
        .collect()
}

/// Sample range for each token: frame-aligned, the last one runs to the end.
fn sample_slices(tokens: usize, samples: usize) -> Vec<(usize, usize)> {
    let frames = samples / FRAME_SHIFT;
    let mut s: Vec<(usize, usize)> = token_slices(tokens, frames)
        .into_iter()
        .map(|(a, b)| (a * FRAME_SHIFT, b * FRAME_SHIFT))
        .collect();
    if let Some(last) = s.last_mut() {
        last.1 = samples;
    }
    s
}

/// Noiseless token waveform: each token is a harmonic tone whose pitch
/// sweeps exponentially across its slice under a raised-sine envelope.
pub fn content_signal(tokens: &[usize], samples: usize) -> Vec<f32> {
    let mut out = vec![0f32; samples];
    for (&tok, (a, b)) in tokens.iter().zip(sample_slices(tokens.len(), samples)) {
        let len = (b - a) as f64;
        let mut phase = 0.0;
        for n in a..b {
            let pos = (n - a) as f64 / len;
            let f0 = TOKEN_F0[tok] * (TOKEN_SWEEP[tok] * pos).exp2();
            phase += 2.0 * PI * f0 / SAMPLE_RATE as f64;
            let env = 0.25 + 0.75 * (PI * pos).sin();
            let tone: f64 = TOKEN_HARMONICS[tok]
                .iter()
                .enumerate()
                .map(|(h, amp)| amp * ((h + 1) as f64 * phase).sin())
                .sum();
            out[n] = (CONTENT_GAIN * env * tone) as f32;
        }
    }
    out
}

/// Fixed ±1 texture for a token, from a hash of its index.
fn token_texture(tok: usize) -> [f32; FRAME_SIZE * FRAME_SIZE] {
    let mut t = [0f32; FRAME_SIZE * FRAME_SIZE];
    for (i, v) in t.iter_mut().enumerate() {
        let h = rng::derive(tok as u64, "texture", i as u64);
        *v = if h & 1 == 0 { 1.0 } else { -1.0 };
    }
    t
}

/// 16×16 frame for `tok` at relative position `pos` in its slice: the
/// token texture plus a bar that opens with the envelope and drifts down
/// as the token proceeds.
pub fn video_frame(tok: usize, pos: f64) -> [f32; FRAME_SIZE * FRAME_SIZE] {
    let tex = token_texture(tok);
    let half_h = 0.5 + 2.5 * (PI * pos).sin();
    let centre = 3.0 + 9.0 * pos;
    let c = (FRAME_SIZE as f64 - 1.0) / 2.0;
    let mut f = [0f32; FRAME_SIZE * FRAME_SIZE];
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let inside = (y as f64 - centre).abs() <= half_h && (x as f64 - c).abs() <= 4.5;
            let bar = if inside { 1.0 } else { 0.0 };
            f[y * FRAME_SIZE + x] = (0.5 * f64::from(tex[y * FRAME_SIZE + x]) + bar) as f32;
        }
    }
    f
}

fn video_for(tokens: &[usize], frames: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(frames * FRAME_SIZE * FRAME_SIZE);
    for (&tok, (a, b)) in tokens.iter().zip(token_slices(tokens.len(), frames)) {
        for t in a..b {
            let pos = (t - a) as f64 / (b - a) as f64;
            data.extend_from_slice(&video_frame(tok, pos));
        }
    }
    Tensor::new(vec![frames, FRAME_SIZE, FRAME_SIZE], data)
}

/// `x` delayed by `d` samples (advanced when negative), zero-filled.
pub fn shift(x: &[f32], d: i32) -> Vec<f32> {
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let j = i - i64::from(d);
            if (0..n).contains(&j) {
                x[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

impl ClipSpec {
    pub fn samples(&self) -> usize {
        (self.duration * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("clip needs at least one channel"));
        }
        if self.delays.len() != self.channels || self.snrs.len() != self.channels {
            return Err(Error::invalid(format!(
                "{} channels but {} delays and {} SNRs",
                self.channels,
                self.delays.len(),
                self.snrs.len()
            )));
        }
        if let Some(d) = self.delays.iter().find(|d| d.abs() > MAX_DELAY) {
            return Err(Error::invalid(format!("delay {d} outside ±{MAX_DELAY} samples")));
        }
        if let Some(s) = self.snrs.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(Error::invalid(format!("invalid SNR {s}")));
        }
        if self.tokens.is_empty() {
            return Err(Error::invalid("clip needs at least one token"));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token {t} outside the {VOCAB_SIZE}-symbol vocabulary")));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid(format!("duration {} s", self.duration)));
        }
        let samples = self.samples();
        let min = AudioEncoderConfig::default().min_samples().max(2 * FRAME_SHIFT);
        if samples < min {
            return Err(Error::TooShort { len: samples, min });
        }
        let frames = samples / FRAME_SHIFT;
        if frames < self.tokens.len() {
            return Err(Error::invalid(format!(
                "{} tokens do not fit in {frames} frames",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

pub fn gen_clip(spec: &ClipSpec) -> Result<MultichannelClip> {
    spec.validate()?;
    let samples = spec.samples();
    let content = content_signal(&spec.tokens, samples);
    let mut channels = Vec::with_capacity(spec.channels);
    for (c, (&d, &snr)) in spec.delays.iter().zip(&spec.snrs).enumerate() {
        let shifted = shift(&content, d);
        channels.push(add_noise(&shifted, snr, rng::derive(spec.seed, "channel-noise", c as u64))?);
    }
    Ok(MultichannelClip {
        id: format!("s{:016x}", spec.seed),
        channels,
        video: Some(video_for(&spec.tokens, samples / FRAME_SHIFT)?),
        transcript: spec.tokens.clone(),
        meta: ClipMeta {
            delays: spec.delays.clone(),
            snrs: spec.snrs.iter().map(|s| s.is_finite().then_some(*s)).collect(),
            seed: spec.seed,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub clips: usize,
    pub channels: usize,
    pub duration: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Uniform SNR range in dB; `None` gives noiseless channels.
    pub snr_db: Option<(f64, f64)>,
    /// Channels 1.. get delays uniform in ±max_delay; channel 0 is the reference.
    pub max_delay: i32,
    pub seed: u64,
    /// Prefix for clip ids.
    pub prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 64,
            channels: 6,
            duration: 2.0,
            min_tokens: 3,
            max_tokens: 6,
            snr_db: Some((5.0, 20.0)),
            max_delay: 32,
            seed: 0,
            prefix: "clip".into(),
        }
    }
}

impl CorpusConfig {
    /// Spec for clip `index`: tokens without adjacent repeats, so every
    /// token boundary is visible in the signal.
    pub fn clip_spec(&self, index: usize) -> Result<ClipSpec> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::invalid(format!(
                "token range {}..={} is empty",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.max_delay < 0 || self.max_delay > MAX_DELAY {
            return Err(Error::invalid(format!("max delay {} outside 0..={MAX_DELAY}", self.max_delay)));
        }
        let seed = rng::derive(self.seed, "clip", index as u64);
        let mut r = rng::seeded(seed);
        let n = r.random_range(self.min_tokens..=self.max_tokens);
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        while tokens.len() < n {
            let t = r.random_range(0..VOCAB_SIZE);
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        let delays = (0..self.channels)
            .map(|c| if c == 0 { 0 } else { r.random_range(-self.max_delay..=self.max_delay) })
            .collect();
        let snrs = (0..self.channels)
            .map(|_| match self.snr_db {
                Some((lo, hi)) if hi > lo => r.random_range(lo..hi),
                Some((lo, _)) => lo,
                None => f64::INFINITY,
            })
            .collect();
        Ok(ClipSpec {
            tokens,
            channels: self.channels,
            duration: self.duration,
            delays,
            snrs,
            seed,
        })
    }

    pub fn clip_id(&self, index: usize) -> String {
        format!("{}{index:04}", self.prefix)
    }
}

/// Generates the corpus, spreading clips over `threads` workers. The output
/// does not depend on the thread count.
pub fn gen_corpus(cfg: &CorpusConfig, threads: usize) -> Result<Vec<MultichannelClip>> {
    let one = |i: usize| -> Result<MultichannelClip> {
        let mut clip = gen_clip(&cfg.clip_spec(i)?)?;
        clip.id = cfg.clip_id(i);
        Ok(clip)
    };
    let threads = threads.clamp(1, cfg.clips.max(1));
    if threads == 1 {
        return (0..cfg.clips).map(one).collect();
    }
    let mut slots: Vec<Option<Result<MultichannelClip>>> = (0..cfg.clips).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(cfg.clips.div_ceil(threads)).enumerate() {
            let base = w * cfg.clips.div_ceil(threads);
            let one = &one;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(one(base + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub audio: Vec<String>,
    pub video: Option<String>,
    pub text: String,
    pub sample_rate: usize,
    pub fps: usize,
    pub seed: u64,
    pub samples: usize,
    pub frames: usize,
    pub delays: Vec<i32>,
    pub snrs: Vec<Option<f64>>,
    /// sha256 of each referenced file, keyed like the paths.
    pub sha256: FileDigests,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigests {
    pub audio: Vec<String>,
    pub video: Option<String>,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub records: Vec<ClipRecord>,
}

impl CorpusManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClipRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Manifest(format!("line {}: duplicate clip id `{}`", n + 1, rec.id)));
            }
            if rec.audio.is_empty() || rec.audio.len() != rec.sha256.audio.len() {
                return Err(Error::Manifest(format!("line {}: clip `{}` has no audio files", n + 1, rec.id)));
            }
            records.push(rec);
        }
        Ok(CorpusManifest { records })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn f32_bytes(x: &[f32]) -> Vec<u8> {
    x.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_bytes(b: &[u8]) -> Option<Vec<f32>> {
    if b.len() % 4 != 0 {
        return None;
    }
    Some(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn transcript_text(tokens: &[usize]) -> String {
    let words: Vec<String> = tokens.iter().map(usize::to_string).collect();
    words.join(" ") + "\n"
}

fn write_clip(dir: &Path, clip: &MultichannelClip) -> Result<ClipRecord> {
    let mut audio = Vec::new();
    let mut audio_sha = Vec::new();
    for (k, ch) in clip.channels.iter().enumerate() {
        let rel = format!("audio/{}.ch{k}.f32", clip.id);
        let bytes = f32_bytes(ch);
        write_atomic(&dir.join(&rel), &bytes)?;
        audio_sha.push(sha256_hex(&bytes));
        audio.push(rel);
    }
    let (video, video_sha) = match &clip.video {
        Some(v) => {
            let rel = format!("video/{}.f32", clip.id);
            let bytes = f32_bytes(v.data());
            write_atomic(&dir.join(&rel), &bytes)?;
            (Some(rel), Some(sha256_hex(&bytes)))
        }
        None => (None, None),
    };
    let text = format!("text/{}.txt", clip.id);
    let tbytes = transcript_text(&clip.transcript).into_bytes();
    write_atomic(&dir.join(&text), &tbytes)?;
    Ok(ClipRecord {
        id: clip.id.clone(),
        audio,
        video,
        text,
        sample_rate: SAMPLE_RATE,
        fps: VIDEO_FPS,
        seed: clip.meta.seed,
        samples: clip.samples(),
        frames: clip.frames(),
        delays: clip.meta.delays.clone(),
        snrs: clip.meta.snrs.clone(),
        sha256: FileDigests {
            audio: audio_sha,
            video: video_sha,
            text: sha256_hex(&tbytes),
        },
    })
}

pub fn write_corpus(clips: &[MultichannelClip], dir: &Path) -> Result<CorpusManifest> {
    let mut ids = HashSet::new();
    for c in clips {
        if !ids.insert(&c.id) {
            return Err(Error::Manifest(format!("duplicate clip id `{}`", c.id)));
        }
        if c.channels.is_empty() || c.channels.iter().any(|ch| ch.len() != c.samples()) {
            return Err(Error::Data {
                clip: c.id.clone(),
                msg: "channels missing or of unequal length".into(),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = clips.iter().map(|c| write_clip(dir, c)).collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest { records };
    write_atomic(&dir.join(MANIFEST), manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

fn read_checked(dir: &Path, id: &str, rel: &str, digest: &str) -> Result<Vec<u8>> {
    let data_err = |msg: String| Error::Data { clip: id.to_string(), msg };
    let bytes = fs::read(dir.join(rel)).map_err(|e| data_err(format!("{rel}: {e}")))?;
    if sha256_hex(&bytes) != digest {
        return Err(data_err(format!("{rel}: checksum mismatch ({} bytes on disk)", bytes.len())));
    }
    Ok(bytes)
}

pub fn parse_transcript(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| w.parse::<usize>().map_err(|_| Error::invalid(format!("bad token `{w}`"))))
        .collect()
}

pub fn read_clip(dir: &Path, rec: &ClipRecord) -> Result<MultichannelClip> {
    let id = rec.id.as_str();
    let data_err = |msg: String| Error::Data { clip: id.to_string(), msg };
    let mut channels = Vec::with_capacity(rec.audio.len());
    for (rel, digest) in rec.audio.iter().zip(&rec.sha256.audio) {
        let bytes = read_checked(dir, id, rel, digest)?;
        let samples = f32_from_bytes(&bytes).ok_or_else(|| data_err(format!("{rel}: truncated sample")))?;
        if samples.len() != rec.samples {
            return Err(data_err(format!("{rel}: {} samples, manifest says {}", samples.len(), rec.samples)));
        }
        channels.push(samples);
    }
    let video = match (&rec.video, &rec.sha256.video) {
        (Some(rel), Some(digest)) => {
            let bytes = read_checked(dir, id, rel, digest)?;
            let px = f32_from_bytes(&bytes).ok_or_else(|| data_err(format!("{rel}: truncated pixel")))?;
            let t = Tensor::new(vec![rec.frames, FRAME_SIZE, FRAME_SIZE], px)
                .map_err(|_| data_err(format!("{rel}: does not hold {} frames", rec.frames)))?;
            Some(t)
        }
        (None, None) => None,
        _ => return Err(data_err("video path and checksum disagree".into())),
    };
    let tbytes = read_checked(dir, id, &rec.text, &rec.sha256.text)?;
    let text = String::from_utf8(tbytes).map_err(|_| data_err("transcript is not UTF-8".into()))?;
    let transcript = parse_transcript(&text).map_err(|e| data_err(e.to_string()))?;
    Ok(MultichannelClip {
        id: rec.id.clone(),
        channels,
        video,
        transcript,
        meta: ClipMeta {
            delays: rec.delays.clone(),
            snrs: rec.snrs.clone(),
            seed: rec.seed,
        },
    })
}

pub fn read_corpus(dir: &Path) -> Result<Vec<MultichannelClip>> {
    let manifest = CorpusManifest::load(dir)?;
    manifest.records.iter().map(|r| read_clip(dir, r)).collect()
}
