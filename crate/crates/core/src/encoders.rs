//! Frame-level feature extraction.
//!
//! The audio encoder is a stack of eight strided 1-D convolutions whose
//! strides multiply to 640 samples, i.e. one frame every 40 ms at 16 kHz,
//! which lines audio frames up with 25 fps video. The same parameters are
//! applied to every microphone channel. The visual encoder maps each
//! 16×16 grayscale frame to one vector.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    declare_layer_norm, declare_linear, layer_norm_affine, linear, Graph, Init, ParamBuilder, ParamStore, Real, Tensor,
    Var,
};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: usize = 16_000;
pub const VIDEO_FPS: usize = 25;
/// Samples per encoder frame (40 ms).
pub const FRAME_SHIFT: usize = SAMPLE_RATE / VIDEO_FPS;

const AUDIO_PREFIX: &str = "audio_encoder";
const VISUAL_PREFIX: &str = "visual_encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub layers: Vec<ConvLayerSpec>,
    /// Output feature width D_a.
    pub dim: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self::with_width(64)
    }
}

impl AudioEncoderConfig {
    pub const KERNELS: [usize; 8] = [10, 3, 3, 3, 3, 2, 2, 2];
    pub const STRIDES: [usize; 8] = [5, 2, 2, 2, 2, 2, 2, 2];

    /// Default kernels and strides with every layer `width` channels wide.
    pub fn with_width(width: usize) -> Self {
        let layers = Self::KERNELS
            .iter()
            .zip(Self::STRIDES)
            .map(|(&kernel, stride)| ConvLayerSpec {
                kernel,
                stride,
                channels: width,
            })
            .collect();
        AudioEncoderConfig { layers, dim: width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 8 {
            return Err(Error::invalid(format!(
                "audio encoder needs 8 conv layers, got {}",
                self.layers.len()
            )));
        }
        if self.total_stride() != FRAME_SHIFT {
            return Err(Error::invalid(format!(
                "audio encoder strides multiply to {}, need {FRAME_SHIFT}",
                self.total_stride()
            )));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0) || self.dim == 0 {
            return Err(Error::invalid("audio encoder layer with zero kernel, stride or width"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Samples seen by one output frame of the unpadded stack.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    /// Zero padding (left, right) applied to the waveform so that the frame
    /// count is exactly floor(len / 640): the stack's receptive field
    /// exceeds the frame shift by this many samples.
    pub fn padding(&self) -> (usize, usize) {
        let extra = self.receptive_field().saturating_sub(self.total_stride());
        (extra / 2, extra - extra / 2)
    }

    /// Shortest waveform that yields one frame.
    pub fn min_samples(&self) -> usize {
        let (l, r) = self.padding();
        self.receptive_field() - l - r
    }

    /// Frame count for a waveform of `n_samples`, by running the per-layer
    /// `floor((L - k) / s) + 1` recurrence over the padded length.
    pub fn num_frames(&self, n_samples: usize) -> Result<usize> {
        let (l, r) = self.padding();
        let mut len = n_samples + l + r;
        for layer in &self.layers {
            if len < layer.kernel {
                return Err(Error::TooShort {
                    len: n_samples,
                    min: self.min_samples(),
                });
            }
            len = (len - layer.kernel) / layer.stride + 1;
        }
        Ok(len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the two conv stem layers.
    pub stem_channels: [usize; 2],
    pub kernel: usize,
    pub stride: usize,
    /// Output feature width D_v.
    pub dim: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            height: 16,
            width: 16,
            stem_channels: [8, 16],
            kernel: 3,
            stride: 2,
            dim: 64,
        }
    }
}

/// Which stream a feature matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamTag {
    Visual,
    AudioChannel(usize),
    SingleAudio,
    Fused,
    Context,
}

/// T×D frame-level features of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tag: StreamTag,
    pub features: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(tag: StreamTag, features: Tensor<f32>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::invalid(format!(
                "feature sequence must be T×D, got {:?}",
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite {
                op: format!("{tag:?} features"),
            });
        }
        Ok(FeatureSequence { tag, features })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder {
    pub config: AudioEncoderConfig,
}

impl AudioEncoder {
    pub fn new(config: AudioEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(AudioEncoder { config })
    }

    pub fn declare(&self, b: &mut ParamBuilder) {
        let mut c_in = 1;
        for (i, l) in self.config.layers.iter().enumerate() {
            let fan_in = c_in * l.kernel;
            b.declare(format!("{AUDIO_PREFIX}.conv{i}.weight"), &[l.channels, c_in, l.kernel], Init::He(fan_in));
            b.declare(format!("{AUDIO_PREFIX}.conv{i}.bias"), &[l.channels], Init::Zeros);
            c_in = l.channels;
        }
        if c_in != self.config.dim {
            declare_linear(b, &format!("{AUDIO_PREFIX}.proj"), c_in, self.config.dim);
        }
        declare_layer_norm(b, &format!("{AUDIO_PREFIX}.norm"), self.config.dim);
    }

    /// Pads and stacks equal-length waveforms into a `[C, 1, L]` tensor.
    pub fn prepare<R: Real>(&self, waveforms: &[&[f32]]) -> Result<Tensor<R>> {
        let len = waveforms
            .first()
            .map(|w| w.len())
            .ok_or_else(|| Error::invalid("no waveforms to encode"))?;
        if let Some(w) = waveforms.iter().find(|w| w.len() != len) {
            return Err(Error::invalid(format!(
                "channel lengths differ: {} vs {len} samples",
                w.len()
            )));
        }
        self.config.num_frames(len)?;
        let (left, right) = self.config.padding();
        let padded = len + left + right;
        let mut data = vec![R::zero(); waveforms.len() * padded];
        for (c, w) in waveforms.iter().enumerate() {
            if let Some(bad) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("channel {c}: non-finite sample at index {bad}")));
            }
            for (dst, &v) in data[c * padded + left..].iter_mut().zip(w.iter()) {
                *dst = R::of(f64::from(v));
            }
        }
        Tensor::new(vec![waveforms.len(), 1, padded], data)
    }

    /// Encodes a `[C, 1, L_padded]` batch of channels with shared weights.
    /// Returns one `[T, D_a]` variable per channel, in channel order.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, x: Var) -> Result<Vec<Var>> {
        let n = g.shape(x)[0];
        let mut h = x;
        for i in 0..self.config.layers.len() {
            let w = g.param(p, &format!("{AUDIO_PREFIX}.conv{i}.weight"))?;
            let b = g.param(p, &format!("{AUDIO_PREFIX}.conv{i}.bias"))?;
            h = g.conv1d(h, w, b, self.config.layers[i].stride)?;
            if i == 0 {
                // Per-channel normalization over time of the first layer.
                let s = g.shape(h).to_vec();
                let flat = g.reshape(h, &[s[0] * s[1], s[2]])?;
                let normed = g.layer_norm(flat, 1e-5)?;
                h = g.reshape(normed, &s)?;
            }
            h = g.gelu(h)?;
        }
        let (width, frames) = (g.shape(h)[1], g.shape(h)[2]);
        let flat = g.reshape(h, &[n * width, frames])?;
        let mut out = Vec::with_capacity(n);
        for c in 0..n {
            let rows: Vec<usize> = (c * width..(c + 1) * width).collect();
            let block = g.gather_rows(flat, &rows)?;
            let mut z = g.transpose(block)?;
            if width != self.config.dim {
                z = linear(g, p, &format!("{AUDIO_PREFIX}.proj"), z)?;
            }
            out.push(layer_norm_affine(g, p, &format!("{AUDIO_PREFIX}.norm"), z)?);
        }
        Ok(out)
    }

    pub fn encode_audio(&self, p: &ParamStore<f32>, waveform: &[f32]) -> Result<FeatureSequence> {
        let mut seqs = self.encode_channels(p, &[waveform])?;
        let mut s = seqs.pop().expect("one channel in, one out");
        s.tag = StreamTag::SingleAudio;
        Ok(s)
    }

    pub fn encode_channels(&self, p: &ParamStore<f32>, waveforms: &[&[f32]]) -> Result<Vec<FeatureSequence>> {
        let mut g = Graph::new();
        let x = g.constant(self.prepare(waveforms)?);
        let vars = self.forward(&mut g, p, x)?;
        vars.into_iter()
            .enumerate()
            .map(|(c, v)| FeatureSequence::new(StreamTag::AudioChannel(c), g.value(v).clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
}

impl VisualEncoder {
    pub fn new(config: VisualEncoderConfig) -> Result<Self> {
        if config.height == 0 || config.width == 0 || config.kernel == 0 || config.stride == 0 || config.dim == 0 {
            return Err(Error::invalid("visual encoder dimensions must be positive"));
        }
        Ok(VisualEncoder { config })
    }

    pub fn declare(&self, b: &mut ParamBuilder) {
        let k = self.config.kernel;
        let mut c_in = 1;
        for (i, &c_out) in self.config.stem_channels.iter().enumerate() {
            b.declare(format!("{VISUAL_PREFIX}.conv{i}.weight"), &[c_out, c_in, k, k], Init::He(c_in * k * k));
            b.declare(format!("{VISUAL_PREFIX}.conv{i}.bias"), &[c_out], Init::Zeros);
            c_in = c_out;
        }
        declare_linear(b, &format!("{VISUAL_PREFIX}.proj"), c_in, self.config.dim);
        declare_layer_norm(b, &format!("{VISUAL_PREFIX}.norm"), self.config.dim);
    }

    pub fn prepare<R: Real>(&self, frames: &Tensor<f32>) -> Result<Tensor<R>> {
        let (h, w) = (self.config.height, self.config.width);
        let s = frames.shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(Error::invalid(format!("expected T×{h}×{w} frames, got {s:?}")));
        }
        if !frames.all_finite() {
            return Err(Error::invalid("non-finite pixel in video frames"));
        }
        frames.cast::<R>().reshaped(&[s[0], 1, h, w])
    }

    /// Maps `[T, 1, H, W]` frames to `[T, D_v]`, one vector per frame.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let pad = self.config.kernel / 2;
        let mut h = x;
        for i in 0..self.config.stem_channels.len() {
            let w = g.param(p, &format!("{VISUAL_PREFIX}.conv{i}.weight"))?;
            let b = g.param(p, &format!("{VISUAL_PREFIX}.conv{i}.bias"))?;
            h = g.conv2d(h, w, b, self.config.stride, pad)?;
            h = g.gelu(h)?;
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[t * s[1], s[2] * s[3]])?;
        let pooled = g.mean_last(flat)?;
        let pooled = g.reshape(pooled, &[t, s[1]])?;
        let z = linear(g, p, &format!("{VISUAL_PREFIX}.proj"), pooled)?;
        layer_norm_affine(g, p, &format!("{VISUAL_PREFIX}.norm"), z)
    }

    pub fn encode_video(&self, p: &ParamStore<f32>, frames: &Tensor<f32>) -> Result<FeatureSequence> {
        if frames.rank() == 0 || frames.shape()[0] == 0 {
            return Err(Error::invalid("empty frame stack"));
        }
        let mut g = Graph::new();
        let x = g.constant(self.prepare(frames)?);
        let v = self.forward(&mut g, p, x)?;
        FeatureSequence::new(StreamTag::Visual, g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct per-layer simulation without padding shortcuts.
    fn simulate(cfg: &AudioEncoderConfig, n: usize) -> Option<usize> {
        let (l, r) = cfg.padding();
        let mut len = n + l + r;
        for layer in &cfg.layers {
            if len < layer.kernel {
                return None;
            }
            len = (len - layer.kernel) / layer.stride + 1;
        }
        Some(len)
    }

    #[test]
    fn one_second_is_25_frames() {
        let cfg = AudioEncoderConfig::default();
        assert_eq!(cfg.total_stride(), 640);
        assert_eq!(cfg.num_frames(16_000).unwrap(), 25);
        assert_eq!(cfg.num_frames(32_000).unwrap(), 50);
    }

    #[test]
    fn minimum_length_gives_one_frame() {
        let cfg = AudioEncoderConfig::default();
        let min = cfg.min_samples();
        assert_eq!(min, 640);
        assert_eq!(cfg.num_frames(min).unwrap(), 1);
        match cfg.num_frames(min - 1) {
            Err(Error::TooShort { min: m, .. }) => assert_eq!(m, 640),
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn frame_counts_match_layer_simulation() {
        let cfg = AudioEncoderConfig::default();
        let mut r = crate::rng::seeded(3);
        for _ in 0..20 {
            let n = rand::Rng::random_range(&mut r, 640..40_000);
            assert_eq!(cfg.num_frames(n).ok(), simulate(&cfg, n));
        }
    }

    #[test]
    fn rejects_wrong_layer_count_or_shift() {
        let mut cfg = AudioEncoderConfig::default();
        cfg.layers.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = AudioEncoderConfig::default();
        cfg.layers[0].stride = 4;
        assert!(cfg.validate().is_err());
    }
}
