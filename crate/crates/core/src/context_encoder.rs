//! Input projection plus a pre-norm transformer encoder.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{declare_layer_norm, declare_linear, layer_norm_affine, linear, Graph, ParamBuilder, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const PREFIX: &str = "context";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            ff_dim: 256,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which input projection a feature width maps to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Fused,
    SingleAudio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    pub config: TransformerConfig,
    pub fused_width: usize,
    pub audio_width: usize,
}

/// `T×d` sinusoidal absolute position table.
pub fn position_encoding<R: Real>(frames: usize, dim: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for j in 0..dim {
            let rate = 10_000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * rate;
            data.push(R::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![frames, dim], data).expect("frames, dim > 0")
}

impl ContextEncoder {
    pub fn new(config: TransformerConfig, fused_width: usize, audio_width: usize) -> Result<Self> {
        config.validate()?;
        Ok(ContextEncoder {
            config,
            fused_width,
            audio_width,
        })
    }

    pub fn declare(&self, b: &mut ParamBuilder) {
        let d = self.config.dim;
        declare_linear(b, &format!("{PREFIX}.proj_fused"), self.fused_width, d);
        declare_linear(b, &format!("{PREFIX}.proj_audio"), self.audio_width, d);
        for i in 0..self.config.layers {
            let l = format!("{PREFIX}.layer{i}");
            declare_layer_norm(b, &format!("{l}.ln_attn"), d);
            for m in ["query", "key", "value", "out"] {
                declare_linear(b, &format!("{l}.attn.{m}"), d, d);
            }
            declare_layer_norm(b, &format!("{l}.ln_ff"), d);
            declare_linear(b, &format!("{l}.ff.up"), d, self.config.ff_dim);
            declare_linear(b, &format!("{l}.ff.down"), self.config.ff_dim, d);
        }
        declare_layer_norm(b, &format!("{PREFIX}.ln_final"), d);
    }

    pub fn kind_for_width(&self, width: usize) -> Result<InputKind> {
        if width == self.fused_width {
            Ok(InputKind::Fused)
        } else if width == self.audio_width {
            Ok(InputKind::SingleAudio)
        } else {
            Err(Error::invalid(format!(
                "no input projection for width {width} (fused {}, audio {})",
                self.fused_width, self.audio_width
            )))
        }
    }

    /// Linear map chosen by input width, plus sinusoidal positions.
    pub fn project<R: Real>(&self, g: &mut Graph<R>, p: &ParamStore<R>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("project", &s, &[]));
        }
        let name = match self.kind_for_width(s[1])? {
            InputKind::Fused => "proj_fused",
            InputKind::SingleAudio => "proj_audio",
        };
        let y = linear(g, p, &format!("{PREFIX}.{name}"), x)?;
        let pe = g.constant(position_encoding(s[0], self.config.dim));
        g.add(y, pe)
    }

    /// Runs the block stack over `x[T, d]`. When `attention` is given, the
    /// per-head attention matrices are pushed onto it in layer/head order.
    /// `dropout_rng` enables dropout at the configured rate.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &ParamStore<R>,
        x: Var,
        mut attention: Option<&mut Vec<Var>>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.dim {
            return Err(Error::shape("transformer", &s, &[self.config.dim]));
        }
        let mut h = x;
        for i in 0..self.config.layers {
            let attn = attention.as_deref_mut();
            h = self
                .block(g, p, i, h, attn, dropout_rng.as_deref_mut())
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFinite {
                        op: format!("{PREFIX}.layer{i}/{op}"),
                    },
                    other => other,
                })?;
        }
        layer_norm_affine(g, p, &format!("{PREFIX}.ln_final"), h)
    }

    fn block<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &ParamStore<R>,
        i: usize,
        x: Var,
        attention: Option<&mut Vec<Var>>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let l = format!("{PREFIX}.layer{i}");
        let normed = layer_norm_affine(g, p, &format!("{l}.ln_attn"), x)?;
        let attn = self.self_attention(g, p, &l, normed, attention)?;
        let attn = self.dropout(g, attn, dropout_rng.as_deref_mut())?;
        let x = g.add(x, attn)?;

        let normed = layer_norm_affine(g, p, &format!("{l}.ln_ff"), x)?;
        let up = linear(g, p, &format!("{l}.ff.up"), normed)?;
        let up = g.gelu(up)?;
        let down = linear(g, p, &format!("{l}.ff.down"), up)?;
        let down = self.dropout(g, down, dropout_rng)?;
        g.add(x, down)
    }

    fn self_attention<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &ParamStore<R>,
        l: &str,
        x: Var,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = linear(g, p, &format!("{l}.attn.query"), x)?;
        let k = linear(g, p, &format!("{l}.attn.key"), x)?;
        let v = linear(g, p, &format!("{l}.attn.value"), x)?;
        let dh = self.config.dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores)?;
            if let Some(a) = attention.as_deref_mut() {
                a.push(probs);
            }
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_last(&heads)?;
        linear(g, p, &format!("{l}.attn.out"), cat)
    }

    fn dropout<R: Real>(&self, g: &mut Graph<R>, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(r) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = R::of(1.0 / (1.0 - rate));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if r.random_bool(rate) { R::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_must_split_into_heads() {
        let cfg = TransformerConfig {
            heads: 5,
            ..TransformerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn position_table_starts_with_sin_cos_of_zero() {
        let pe = position_encoding::<f64>(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-12);
    }
}
