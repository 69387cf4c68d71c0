//! TDOA estimation by normalised cross-correlation and weighted
//! delay-and-sum beamforming with integer-sample delays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_mask::power;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weights proportional to 1 / channel energy.
    EnergyInverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamformPlan {
    /// Per-channel delay in samples relative to the reference.
    pub delays: Vec<i32>,
    pub weights: Vec<f64>,
}

impl BeamformPlan {
    pub fn new(delays: Vec<i32>, weights: Vec<f64>) -> Result<Self> {
        if delays.len() != weights.len() || delays.is_empty() {
            return Err(Error::invalid(format!(
                "plan has {} delays and {} weights",
                delays.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("beamformer weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("beamformer weights sum to {total}, not 1")));
        }
        Ok(BeamformPlan { delays, weights })
    }

    pub fn uniform(delays: Vec<i32>) -> Self {
        let w = 1.0 / delays.len().max(1) as f64;
        let weights = vec![w; delays.len()];
        BeamformPlan { delays, weights }
    }

    pub fn weighted(channels: &[Vec<f32>], delays: Vec<i32>, weighting: Weighting) -> Result<Self> {
        match weighting {
            Weighting::Uniform => Ok(Self::uniform(delays)),
            Weighting::EnergyInverse => {
                let inv = channels
                    .iter()
                    .map(|c| {
                        let p = power(c);
                        if p > 0.0 {
                            Ok(1.0 / p)
                        } else {
                            Err(Error::invalid("zero-energy channel"))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let total: f64 = inv.iter().sum();
                Self::new(delays, inv.into_iter().map(|w| w / total).collect())
            }
        }
    }

    /// Estimates every channel's delay against channel 0.
    pub fn estimate(channels: &[Vec<f32>], max_lag: usize, weighting: Weighting) -> Result<Self> {
        let reference = channels.first().ok_or_else(|| Error::invalid("no channels"))?;
        let delays = channels
            .iter()
            .map(|c| estimate_tdoa(reference, c, max_lag))
            .collect::<Result<Vec<_>>>()?;
        Self::weighted(channels, delays, weighting)
    }
}

/// Lag `L` in `[-max_lag, max_lag]` maximising the normalised correlation
/// of `channel[n]` with `reference[n - L]`. Ties go to the smaller `|L|`.
pub fn estimate_tdoa(reference: &[f32], channel: &[f32], max_lag: usize) -> Result<i32> {
    let n = reference.len();
    if channel.len() != n {
        return Err(Error::invalid(format!("lengths differ: {n} vs {}", channel.len())));
    }
    if 2 * max_lag >= n {
        return Err(Error::invalid(format!("max lag {max_lag} must be below half of {n} samples")));
    }
    if power(reference) == 0.0 || power(channel) == 0.0 {
        return Err(Error::invalid("zero-energy input to TDOA estimation"));
    }
    let score = |lag: i64| -> f64 {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        let lo = lag.max(0) as usize;
        let hi = (n as i64 + lag.min(0)) as usize;
        for i in lo..hi {
            let x = f64::from(reference[(i as i64 - lag) as usize]);
            let y = f64::from(channel[i]);
            xy += x * y;
            xx += x * x;
            yy += y * y;
        }
        if xx == 0.0 || yy == 0.0 {
            f64::NEG_INFINITY
        } else {
            xy / (xx * yy).sqrt()
        }
    };
    let mut best = (0i64, score(0));
    for m in 1..=max_lag as i64 {
        for lag in [-m, m] {
            let s = score(lag);
            if s > best.1 {
                best = (lag, s);
            }
        }
    }
    Ok(best.0 as i32)
}

/// Advances each channel by its delay (zero-filled), then forms the
/// weighted sum. Output length equals input length.
pub fn delay_and_sum(channels: &[Vec<f32>], plan: &BeamformPlan) -> Result<Vec<f32>> {
    if channels.len() != plan.delays.len() {
        return Err(Error::invalid(format!(
            "plan covers {} channels, got {}",
            plan.delays.len(),
            channels.len()
        )));
    }
    let n = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("channel lengths differ"));
    }
    let mut out = vec![0f64; n];
    for (c, (&d, &w)) in channels.iter().zip(plan.delays.iter().zip(&plan.weights)) {
        for (i, o) in out.iter_mut().enumerate() {
            let j = i as i64 + i64::from(d);
            if (0..n as i64).contains(&j) {
                *o += w * f64::from(c[j as usize]);
            }
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}
