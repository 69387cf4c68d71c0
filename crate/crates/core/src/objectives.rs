//! Contrastive objectives.
//!
//! At every masked frame `t` the context output is scored against the true
//! target at `t` and against K distractors drawn from other masked frames of
//! the same utterance, using temperature-scaled cosine similarity:
//!
//! * intra-channel: context vs fused features `z^f`
//! * inter-channel: context vs each active channel's features `z^{a_i}`,
//!   summed over channels
//! * single-channel: context vs single-audio features `z^{sa}`
//!
//! and the total is `l_c1 + l_c2 + λ·l_sa`.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Where distractors come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSource {
    /// Target-stream features at other masked frames.
    #[default]
    Targets,
    /// Context outputs at other masked frames.
    ContextOutputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// λ, weight of the single-channel term.
    pub single_weight: f64,
    pub negatives: usize,
    /// Stop gradients from flowing into the target features.
    pub stop_target_grad: bool,
    pub negative_source: NegativeSource,
    /// Include the inter-channel term (off for intra-only ablations).
    pub use_inter: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            single_weight: 1.0,
            negatives: 10,
            stop_target_grad: false,
            negative_source: NegativeSource::Targets,
            use_inter: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {} must be finite and > 0", self.temperature)));
        }
        if !(self.single_weight >= 0.0) {
            return Err(Error::invalid(format!("λ = {} must be >= 0", self.single_weight)));
        }
        if self.negatives == 0 {
            return Err(Error::invalid("need at least one negative per position"));
        }
        Ok(())
    }
}

/// Distractor frames for every masked frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    /// Masked frames, ascending.
    pub positions: Vec<usize>,
    /// `sources[i]` holds K frames, none equal to `positions[i]`.
    pub sources: Vec<Vec<usize>>,
}

impl NegativeSet {
    pub fn k(&self) -> usize {
        self.sources.first().map_or(0, Vec::len)
    }
}

/// For each masked frame, K frames drawn uniformly with replacement from
/// the other masked frames.
pub fn sample_negatives(masked: &[usize], k: usize, seed: u64) -> Result<NegativeSet> {
    if masked.len() < 2 {
        return Err(Error::invalid(format!(
            "negative sampling needs >= 2 masked frames, got {}",
            masked.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("negative count must be >= 1"));
    }
    let mut r = rng::stream(seed, "negatives", 0);
    let sources = (0..masked.len())
        .map(|i| {
            (0..k)
                .map(|_| {
                    // Uniform over the other len-1 entries.
                    let j = r.random_range(0..masked.len() - 1);
                    masked[if j >= i { j + 1 } else { j }]
                })
                .collect()
        })
        .collect();
    Ok(NegativeSet {
        positions: masked.to_vec(),
        sources,
    })
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// `-log softmax` of the positive among `{pos} ∪ negatives` at temperature κ.
pub fn info_nce(pred: &[f64], pos: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::invalid("info_nce needs at least one negative"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_sim(pred, pos)? / temperature);
    for n in negatives {
        logits.push(cosine_sim(pred, n)? / temperature);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

fn normalized_rows<R: Real>(g: &mut Graph<R>, x: Var, rows: &[usize]) -> Result<Var> {
    let picked = g.gather_rows(x, rows)?;
    let norms = g.l2_norm_last(picked).map_err(|_| Error::invalid("zero-norm feature vector in contrastive loss"))?;
    g.div_rows(picked, norms)
}

/// Mean over masked frames of the InfoNCE term, on the tape.
/// `pred` and `targets` are `[T, D]` with matching D.
pub fn masked_contrastive<R: Real>(
    g: &mut Graph<R>,
    pred: Var,
    targets: Var,
    negs: &NegativeSet,
    cfg: &LossConfig,
) -> Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(targets).to_vec());
    if ps.len() != 2 || ps != ts {
        return Err(Error::shape("contrastive loss", &ps, &ts));
    }
    let m = negs.positions.len();
    if m < 2 {
        return Err(Error::invalid(format!("contrastive loss needs >= 2 masked frames, got {m}")));
    }
    let targets = if cfg.stop_target_grad {
        let t = g.value(targets).clone();
        g.constant(t)
    } else {
        targets
    };
    let local: HashMap<usize, usize> = negs.positions.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let pn = normalized_rows(g, pred, &negs.positions)?;
    let zn = normalized_rows(g, targets, &negs.positions)?;
    let znt = g.transpose(zn)?;
    let sim = g.matmul(pn, znt)?;
    let (table, width, neg_offset) = match cfg.negative_source {
        NegativeSource::Targets => (sim, m, 0),
        NegativeSource::ContextOutputs => {
            let pnt = g.transpose(pn)?;
            let self_sim = g.matmul(pn, pnt)?;
            (g.concat_last(&[sim, self_sim])?, 2 * m, m)
        }
    };
    let k = negs.k();
    let mut idx = Vec::with_capacity(m * (k + 1));
    for (i, srcs) in negs.sources.iter().enumerate() {
        if srcs.len() != k {
            return Err(Error::invalid("ragged negative set"));
        }
        idx.push(i * width + i);
        for s in srcs {
            let j = *local
                .get(s)
                .ok_or_else(|| Error::invalid(format!("negative frame {s} is not masked")))?;
            idx.push(i * width + neg_offset + j);
        }
    }
    let logits = g.gather(table, &idx, &[m, k + 1])?;
    let logits = g.scale(logits, 1.0 / cfg.temperature)?;
    let logp = g.log_softmax(logits)?;
    let pos: Vec<usize> = (0..m).map(|i| i * (k + 1)).collect();
    let pos = g.gather(logp, &pos, &[m])?;
    let mean = g.mean(pos)?;
    g.scale(mean, -1.0)
}

/// Intra-channel term: context predictions vs fused features.
pub fn loss_c1<R: Real>(g: &mut Graph<R>, pred: Var, fused: Var, negs: &NegativeSet, cfg: &LossConfig) -> Result<Var> {
    masked_contrastive(g, pred, fused, negs, cfg)
}

/// Inter-channel term summed over active channels. Returns the sum and the
/// per-channel terms (`None` for dropped channels).
pub fn loss_c2<R: Real>(
    g: &mut Graph<R>,
    pred: Var,
    channels: &[Var],
    dropped: &[bool],
    negs: &NegativeSet,
    cfg: &LossConfig,
) -> Result<(Var, Vec<Option<Var>>)> {
    if dropped.len() != channels.len() {
        return Err(Error::invalid("channel/dropout length mismatch"));
    }
    let mut total: Option<Var> = None;
    let mut per = Vec::with_capacity(channels.len());
    for (&z, &d) in channels.iter().zip(dropped) {
        if d {
            per.push(None);
            continue;
        }
        let term = masked_contrastive(g, pred, z, negs, cfg)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        per.push(Some(term));
    }
    let total = total.ok_or_else(|| Error::invalid("inter-channel loss with no active channels"))?;
    Ok((total, per))
}

/// Single-channel term: context predictions vs single-audio features.
pub fn loss_sa<R: Real>(g: &mut Graph<R>, pred: Var, single: Var, negs: &NegativeSet, cfg: &LossConfig) -> Result<Var> {
    masked_contrastive(g, pred, single, negs, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchKind {
    AudioVisual,
    AudioOnly,
}

/// Scalar loss values recorded per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_sa: f64,
    pub total: f64,
    /// Inter-channel term per channel; `None` where the channel was dropped.
    pub per_channel: Vec<Option<f64>>,
    pub masked: usize,
}

/// Loss parts present for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub sa: Option<f64>,
}

/// Weighted total: AV batches need both contrastive parts and add λ·l_sa
/// when single-audio items ride along; audio-only batches are λ·l_sa.
pub fn total_loss(parts: &LossParts, lambda: f64, kind: BatchKind) -> Result<f64> {
    match kind {
        BatchKind::AudioVisual => {
            let c1 = parts.c1.ok_or_else(|| Error::invalid("audio-visual batch is missing l_c1"))?;
            let c2 = parts.c2.ok_or_else(|| Error::invalid("audio-visual batch is missing l_c2"))?;
            Ok(c1 + c2 + lambda * parts.sa.unwrap_or(0.0))
        }
        BatchKind::AudioOnly => {
            let sa = parts.sa.ok_or_else(|| Error::invalid("audio-only batch is missing l_sa"))?;
            Ok(lambda * sa)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let v = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        // Equal similarities: uniform softmax over K + 1 candidates.
        let p = [1.0, 0.0];
        let same = [3.0, 0.0];
        for k in 1..8 {
            let negs: Vec<&[f64]> = vec![&same; k];
            let l = info_nce(&p, &same, &negs, 0.1).unwrap();
            assert!((l - ((k + 1) as f64).ln()).abs() < 1e-6);
        }
        // sim(pos) = 1, sim(neg) = -1, κ = 1: ln(1 + e^-2).
        let l = info_nce(&[1.0, 0.0], &[1.0, 0.0], &[&[-1.0, 0.0]], 1.0).unwrap();
        assert!((l - 0.126_928_011_042_973).abs() < 1e-6, "{l}");
        // Low temperature with a clearly best positive.
        let l = info_nce(&[1.0, 0.0], &[1.0, 0.1], &[&[0.0, 1.0], &[-1.0, 0.3]], 0.01).unwrap();
        assert!(l < 1e-3);
        assert!(info_nce(&p, &same, &[&[0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn two_positions_force_the_other() {
        let n = sample_negatives(&[3, 8], 1, 5).unwrap();
        assert_eq!(n.sources, vec![vec![8], vec![3]]);
        assert!(sample_negatives(&[3], 1, 5).is_err());
    }

    #[test]
    fn negatives_exclude_self_and_stay_masked() {
        let masked = [1, 2, 5, 9, 10];
        let n = sample_negatives(&masked, 10, 2).unwrap();
        for (t, srcs) in n.positions.iter().zip(&n.sources) {
            assert_eq!(srcs.len(), 10);
            assert!(srcs.iter().all(|s| s != t && masked.contains(s)));
        }
        assert_eq!(n, sample_negatives(&masked, 10, 2).unwrap());
    }

    #[test]
    fn total_loss_rules() {
        let parts = LossParts {
            c1: Some(0.5),
            c2: Some(1.5),
            sa: Some(2.0),
        };
        assert_eq!(total_loss(&parts, 1.0, BatchKind::AudioVisual).unwrap(), 4.0);
        assert_eq!(total_loss(&parts, 0.0, BatchKind::AudioVisual).unwrap(), 2.0);
        assert_eq!(total_loss(&parts, 0.5, BatchKind::AudioOnly).unwrap(), 1.0);
        let missing = LossParts { c1: Some(1.0), ..LossParts::default() };
        assert!(total_loss(&missing, 1.0, BatchKind::AudioVisual).is_err());
        assert!(total_loss(&missing, 1.0, BatchKind::AudioOnly).is_err());
    }
}
