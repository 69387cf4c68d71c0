//! CTC loss (log-space forward recursion on the tape), greedy decoding and
//! character error rate.
//!
//! Class 0 of every log-probability row is the blank; token id `k` lives in
//! class `k + 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var, LOG_ZERO};
use crate::error::{Error, Result};

pub const BLANK: usize = 0;

/// Ordered token symbols; the blank is implicit at class 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s) {
                return Err(Error::invalid(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        Ok(Vocab { symbols })
    }

    /// `size` tokens named by their index.
    pub fn numbered(size: usize) -> Self {
        Vocab {
            symbols: (0..size).map(|i| i.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbol(&self, token: usize) -> Option<&str> {
        self.symbols.get(token).map(String::as_str)
    }

    pub fn check(&self, transcript: &[usize]) -> Result<()> {
        match transcript.iter().find(|&&t| t >= self.len()) {
            Some(t) => Err(Error::invalid(format!("token {t} outside vocabulary of {}", self.len()))),
            None => Ok(()),
        }
    }
}

/// Count of adjacent equal tokens; each needs a separating blank frame.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_log_probs<R: Real>(lp: &Tensor<R>) -> Result<()> {
    for r in 0..lp.outer() {
        let total: f64 = lp.row(r).iter().map(|v| v.as_f64().exp()).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!(
                "ctc frame {r}: probabilities sum to {total}, not 1"
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `target` (token ids) under per-frame
/// `log_probs[T, V + 1]`, summed over every blank-augmented alignment.
pub fn ctc_loss<R: Real>(g: &mut Graph<R>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let s = g.shape(log_probs).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape("ctc_loss", &s, &[]));
    }
    let (frames, classes) = (s[0], s[1]);
    check_log_probs(g.value(log_probs))?;
    if let Some(t) = target.iter().find(|&&t| t + 1 >= classes) {
        return Err(Error::invalid(format!("token {t} has no class in {classes} outputs")));
    }
    let repeats = adjacent_repeats(target);
    if frames < target.len() + repeats {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            repeats,
            frames,
        });
    }

    // Extended label sequence: blank, y1, blank, y2, ..., blank.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&t| [t + 1, BLANK]))
        .collect();
    let width = ext.len();
    let emit = |g: &mut Graph<R>, t: usize| -> Result<Var> {
        let idx: Vec<usize> = ext.iter().map(|&c| t * classes + c).collect();
        g.gather(log_probs, &idx, &[width])
    };
    let mask = |allowed: &dyn Fn(usize) -> bool| -> Tensor<R> {
        let data = (0..width).map(|s| R::of(if allowed(s) { 0.0 } else { LOG_ZERO })).collect();
        Tensor::new(vec![width], data).expect("width > 0")
    };
    let init = g.constant(mask(&|s| s < 2));
    let skip = g.constant(mask(&|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]));

    let e0 = emit(g, 0)?;
    let mut alpha = g.add(e0, init)?;
    for t in 1..frames {
        let stay = alpha;
        let step = g.shift_right(alpha, 1, LOG_ZERO)?;
        let jump = g.shift_right(alpha, 2, LOG_ZERO)?;
        let jump = g.add(jump, skip)?;
        let a = g.log_add_exp(stay, step)?;
        let a = g.log_add_exp(a, jump)?;
        let e = emit(g, t)?;
        alpha = g.add(a, e)?;
    }
    let ll = if width == 1 {
        g.gather(alpha, &[0], &[1])?
    } else {
        let last = g.gather(alpha, &[width - 1], &[1])?;
        let prev = g.gather(alpha, &[width - 2], &[1])?;
        g.log_add_exp(last, prev)?
    };
    g.scale(ll, -1.0)
}

/// Per-frame argmax, collapse repeats, drop blanks. Returns token ids.
pub fn greedy_decode<R: Real>(log_probs: &Tensor<R>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.outer() {
        let row = log_probs.row(r);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        if Some(best) != prev && best != BLANK {
            out.push(best - 1);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("CER needs a non-empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_log(frames: &[usize], classes: usize) -> Tensor<f64> {
        let data = frames
            .iter()
            .flat_map(|&f| (0..classes).map(move |c| if c == f { 0.0 } else { -30.0 }))
            .collect();
        Tensor::new(vec![frames.len(), classes], data).unwrap()
    }

    #[test]
    fn greedy_examples() {
        // a = class 1, b = class 2.
        assert_eq!(greedy_decode(&one_hot_log(&[1, 1, 0, 1], 3)), vec![0, 0]);
        assert!(greedy_decode(&one_hot_log(&[0, 0, 0], 3)).is_empty());
        assert_eq!(greedy_decode(&one_hot_log(&[1, 0, 2, 2, 0], 3)), vec![0, 1]);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((cer(&[0, 1], &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(cer(&[0], &[]).is_err());
    }

    #[test]
    fn two_frame_uniform_example() {
        let lp = Tensor::new(vec![2, 2], vec![0.5f64.ln(); 4]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(lp);
        let l = ctc_loss(&mut g, v, &[0]).unwrap();
        assert!((g.value(l).item() - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lp = Tensor::new(vec![3, 2], vec![0.3f64.ln(), 0.7f64.ln(), 0.6f64.ln(), 0.4f64.ln(), 0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(lp);
        let l = ctc_loss(&mut g, v, &[]).unwrap();
        let expected = -(0.3f64.ln() + 0.6f64.ln() + 0.9f64.ln());
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_token_needs_a_blank() {
        let lp = Tensor::new(vec![2, 2], vec![0.5f64.ln(); 4]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(lp);
        match ctc_loss(&mut g, v, &[0, 0]) {
            Err(Error::InfeasibleTarget { repeats: 1, frames: 2, .. }) => {}
            other => panic!("expected infeasible target, got {other:?}"),
        }
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let lp = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(lp);
        assert!(ctc_loss(&mut g, v, &[0]).is_err());
    }

    #[test]
    fn vocab_rules() {
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        let v = Vocab::numbered(8);
        assert_eq!(v.classes(), 9);
        assert!(v.check(&[0, 7]).is_ok());
        assert!(v.check(&[8]).is_err());
    }
}
