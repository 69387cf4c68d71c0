//! The full stack: encoders, fusion, mask embedding, context encoder and
//! the small output heads used by the objectives and by CTC fine-tuning.

use serde::{Deserialize, Serialize};

use crate::autodiff::{declare_linear, linear, Graph, Init, ParamBuilder, ParamStore, Real, Tensor, Var};
use crate::context_encoder::{ContextEncoder, TransformerConfig};
use crate::encoders::{AudioEncoder, AudioEncoderConfig, VisualEncoder, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion_mask::{apply_mask, fuse, DropoutDecision, MaskSpec};
use crate::rng::Rng;

pub const MASK_EMBEDDING: &str = "mask_emb";
pub const FUSED_HEAD: &str = "heads.fused";
pub const CHANNEL_HEAD: &str = "heads.channel";
pub const CTC_HEAD: &str = "ctc_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub audio: AudioEncoderConfig,
    pub visual: VisualEncoderConfig,
    pub transformer: TransformerConfig,
    /// Microphone channels C in the fused layout.
    pub channels: usize,
    /// Token vocabulary size, excluding the blank.
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio: AudioEncoderConfig::default(),
            visual: VisualEncoderConfig::default(),
            transformer: TransformerConfig::default(),
            channels: 6,
            vocab: 8,
        }
    }
}

/// Per-stream encoder outputs on a graph. `video` is a zero constant when
/// the clip carries no frames; missing channels are zero constants too.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub video: Var,
    pub channels: Vec<Var>,
    pub has_video: bool,
    /// Channels that carried real audio.
    pub present: usize,
}

/// Encoder outputs as plain values, for caching and export.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedValues {
    pub video: Option<Tensor<f32>>,
    pub channels: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub audio: AudioEncoder,
    pub visual: VisualEncoder,
    pub context: ContextEncoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::invalid("model needs at least one audio channel"));
        }
        if config.vocab == 0 {
            return Err(Error::invalid("model needs a non-empty vocabulary"));
        }
        let audio = AudioEncoder::new(config.audio.clone())?;
        let visual = VisualEncoder::new(config.visual.clone())?;
        let fused = config.visual.dim + config.channels * config.audio.dim;
        let context = ContextEncoder::new(config.transformer.clone(), fused, config.audio.dim)?;
        Ok(Model {
            config,
            audio,
            visual,
            context,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.context.fused_width
    }

    pub fn declare(&self) -> ParamBuilder {
        let mut b = ParamBuilder::new();
        self.audio.declare(&mut b);
        self.visual.declare(&mut b);
        self.context.declare(&mut b);
        let d = self.config.transformer.dim;
        b.declare(MASK_EMBEDDING, &[self.fused_width()], Init::Normal(1.0));
        declare_linear(&mut b, FUSED_HEAD, d, self.fused_width());
        declare_linear(&mut b, CHANNEL_HEAD, d, self.config.audio.dim);
        declare_linear(&mut b, CTC_HEAD, d, self.config.vocab + 1);
        b
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        self.declare().build(seed)
    }

    /// Checks that `p` holds exactly the declared parameters with the
    /// declared shapes.
    pub fn check_params<R: Real>(&self, p: &ParamStore<R>) -> Result<()> {
        let want = self.declare().build::<f32>(0);
        for (name, t) in want.iter() {
            match p.get(name) {
                None => return Err(Error::invalid(format!("parameter `{name}` missing"))),
                Some(have) if have.shape() != t.shape() => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, config expects {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = p.names().find(|n| !want.contains(n)) {
            return Err(Error::invalid(format!("parameter `{extra}` is not part of this model")));
        }
        Ok(())
    }

    /// Runs the encoders. `audio` holds either all C channels or a single
    /// channel (audio-only data, placed in channel slot 0).
    pub fn encode<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &ParamStore<R>,
        audio: &[&[f32]],
        video: Option<&Tensor<f32>>,
    ) -> Result<Encoded> {
        let c = self.config.channels;
        if audio.len() != c && audio.len() != 1 {
            return Err(Error::invalid(format!("expected 1 or {c} audio channels, got {}", audio.len())));
        }
        let x = g.constant(self.audio.prepare(audio)?);
        let channels = self.audio.forward(g, p, x)?;
        let frames = g.shape(channels[0])[0];
        let video_var = match video {
            Some(v) => {
                if v.shape().first() != Some(&frames) {
                    return Err(Error::invalid(format!(
                        "{} video frames for {frames} audio frames",
                        v.shape().first().copied().unwrap_or(0)
                    )));
                }
                let vx = g.constant(self.visual.prepare(v)?);
                Some(self.visual.forward(g, p, vx)?)
            }
            None => None,
        };
        Ok(self.complete(g, video_var, channels, frames))
    }

    fn complete<R: Real>(&self, g: &mut Graph<R>, video: Option<Var>, mut channels: Vec<Var>, frames: usize) -> Encoded {
        let present = channels.len();
        while channels.len() < self.config.channels {
            channels.push(g.constant(Tensor::zeros(&[frames, self.config.audio.dim])));
        }
        let has_video = video.is_some();
        let video = video.unwrap_or_else(|| g.constant(Tensor::zeros(&[frames, self.config.visual.dim])));
        Encoded {
            video,
            channels,
            has_video,
            present,
        }
    }

    /// Binds cached encoder outputs as constants.
    pub fn bind<R: Real>(&self, g: &mut Graph<R>, values: &EncodedValues) -> Result<Encoded> {
        let first = values.channels.first().ok_or_else(|| Error::invalid("no cached channels"))?;
        let frames = first.shape()[0];
        let channels = values.channels.iter().map(|t| g.constant(t.cast())).collect();
        let video = values.video.as_ref().map(|v| g.constant(v.cast()));
        Ok(self.complete(g, video, channels, frames))
    }

    pub fn encode_values(
        &self,
        p: &ParamStore<f32>,
        audio: &[&[f32]],
        video: Option<&Tensor<f32>>,
    ) -> Result<EncodedValues> {
        let mut g = Graph::new();
        let e = self.encode(&mut g, p, audio, video)?;
        Ok(EncodedValues {
            video: e.has_video.then(|| g.value(e.video).clone()),
            channels: e.channels[..e.present].iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Stream layout for an encoded clip: single-channel data always runs
    /// with video and the other channels zeroed.
    pub fn layout(&self, e: &Encoded, decision: Option<&DropoutDecision>) -> DropoutDecision {
        let c = self.config.channels;
        if e.present < c {
            return DropoutDecision::audio_only(c, e.present);
        }
        let mut d = decision.cloned().unwrap_or_else(|| DropoutDecision::keep_all(c));
        d.video |= !e.has_video;
        d
    }

    pub fn fuse<R: Real>(&self, g: &mut Graph<R>, e: &Encoded, decision: &DropoutDecision) -> Result<Var> {
        fuse(g, e.video, &e.channels, decision)
    }

    /// Mask (optional), project and run the transformer over `fused[T, D_f]`.
    pub fn contextualize<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &ParamStore<R>,
        fused: Var,
        mask: Option<&MaskSpec>,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let x = match mask {
            Some(m) if !m.is_empty() => {
                let emb = g.param(p, MASK_EMBEDDING)?;
                apply_mask(g, fused, m, emb)?
            }
            _ => fused,
        };
        let h = self.context.project(g, p, x)?;
        self.context.forward(g, p, h, None, dropout)
    }

    pub fn fused_prediction<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, c: Var) -> Result<Var> {
        linear(g, p, FUSED_HEAD, c)
    }

    pub fn channel_prediction<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, c: Var) -> Result<Var> {
        linear(g, p, CHANNEL_HEAD, c)
    }

    /// Per-frame log-probabilities over blank plus the vocabulary.
    pub fn ctc_log_probs<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, c: Var) -> Result<Var> {
        let logits = linear(g, p, CTC_HEAD, c)?;
        g.log_softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_width_matches_layout() {
        let m = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(m.fused_width(), 448);
        let p = m.init_params(1);
        m.check_params(&p).unwrap();
        assert_eq!(p.get(MASK_EMBEDDING).unwrap().shape(), &[448]);
    }

    #[test]
    fn shape_disagreement_detected() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let other = Model::new(ModelConfig {
            channels: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(m.check_params(&other.init_params(1)).is_err());
    }
}
