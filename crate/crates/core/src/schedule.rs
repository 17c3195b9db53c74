//! Masking schedules for set-by-set decoding and the diffusion noise schedule.

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err};
use crate::tensor::rng::{self, Rng};
use crate::{Float, NovaError, Result, Tensor};

pub const MIN_MASK_RATIO: f64 = 0.7;
pub const MAX_MASK_RATIO: f64 = 1.0;

/// Training mask: `⌈r·M⌉` uniformly chosen positions, `r ~ U[0.7, 1]`.
/// Returned indices are sorted.
pub fn sample_train_mask(m: usize, rng: &mut Rng) -> Vec<usize> {
    let r = rng.random_range(MIN_MASK_RATIO..=MAX_MASK_RATIO);
    let n = ((r * m as f64).ceil() as usize).clamp(1.min(m), m);
    let mut idx = rng::permutation(m, rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Tokens still masked after each of the `K` steps:
/// `round(M·cos(π/2 · k/K))`, repaired to fall strictly to 0.
pub fn masked_after(m: usize, k: usize) -> Result<Vec<usize>> {
    let reveals = cosine_unmask_plan(m, k)?;
    let mut left = m;
    Ok(reveals
        .iter()
        .map(|r| {
            left -= r;
            left
        })
        .collect())
}

/// Tokens revealed at each of `K` steps; every count is at least 1 and the
/// counts sum to `M`.
pub fn cosine_unmask_plan(m: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > m {
        return Err(contract_err!("unmask plan needs 1 ≤ K ≤ M, got K={k}, M={m}"));
    }
    let mut prev = m as i64;
    let mut reveals: Vec<i64> = (1..=k)
        .map(|step| {
            let left = (m as f64 * (FRAC_PI_2 * step as f64 / k as f64).cos()).round() as i64;
            let left = left.clamp(0, m as i64);
            let r = prev - left;
            prev = left;
            r
        })
        .collect();
    *reveals.last_mut().unwrap() += prev;
    // borrow one from the largest later reveal (or earlier, if none later)
    for i in 0..k {
        while reveals[i] < 1 {
            let pick = |range: std::ops::Range<usize>, r: &[i64]| {
                range.filter(|&j| r[j] > 1).max_by_key(|&j| (r[j], usize::MAX - j))
            };
            let j = pick(i + 1..k, &reveals)
                .or_else(|| pick(0..i, &reveals))
                .expect("K ≤ M leaves a reveal to borrow from");
            reveals[j] -= 1;
            reveals[i] += 1;
        }
    }
    Ok(reveals.into_iter().map(|r| r as usize).collect())
}

/// Random reveal order of one frame and how many tokens each step reveals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub order: Vec<usize>,
    pub reveal_counts: Vec<usize>,
}

impl MaskPlan {
    pub fn new(m: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            reveal_counts: cosine_unmask_plan(m, k)?,
            order: rng::permutation(m, rng),
        })
    }

    /// Token positions revealed at each step, in order.
    pub fn sets(&self) -> Vec<&[usize]> {
        let mut start = 0;
        self.reveal_counts
            .iter()
            .map(|&n| {
                let s = &self.order[start..start + n];
                start += n;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Discrete noise schedule over steps `1..=T`. `alpha[t-1]` and `sigma[t-1]`
/// belong to step `t`; `alpha_bar[t]` is indexed directly, with
/// `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(steps),
            ScheduleKind::Linear => Self::linear(steps),
        }
    }

    /// Cosine schedule with offset 0.008; per-step β is clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(contract_err!("noise schedule needs T ≥ 1"));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let alpha = (1..=steps)
            .map(|t| 1.0 - (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
            .collect();
        Ok(Self::from_alpha(alpha))
    }

    /// Linear β from `1e-4` to `0.02`, rescaled for `T ≠ 1000`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(contract_err!("noise schedule needs T ≥ 1"));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
        let alpha = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (lo + (hi - lo) * frac)
            })
            .collect();
        Ok(Self::from_alpha(alpha))
    }

    fn from_alpha(alpha: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        let sigma = (1..=alpha.len())
            .map(|t| {
                let v = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * (1.0 - alpha[t - 1]);
                v.max(0.0).sqrt()
            })
            .collect();
        Self {
            steps: alpha.len(),
            alpha_bar,
            alpha,
            sigma,
        }
    }

    /// `steps + 1` evenly spaced timesteps from `0` to `T` inclusive.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.steps {
            return Err(contract_err!("{steps} sampling steps for a {}-step schedule", self.steps));
        }
        Ok((0..=steps)
            .map(|i| ((i * self.steps) as f64 / steps as f64).round() as usize)
            .collect())
    }

    /// The schedule restricted to `steps` strided timesteps. Entry `i` of
    /// the result corresponds to original timestep `timesteps[i]`.
    pub fn respace(&self, steps: usize) -> Result<Respaced> {
        let timesteps = self.strided_timesteps(steps)?;
        let alpha = timesteps
            .windows(2)
            .map(|w| self.alpha_bar[w[1]] / self.alpha_bar[w[0]])
            .collect();
        Ok(Respaced {
            schedule: Self::from_alpha(alpha),
            timesteps,
        })
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise<T: Float>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        if t > self.steps {
            return Err(NovaError::Domain(format!("timestep {t} outside 0..={}", self.steps)));
        }
        if x0.shape() != eps.shape() {
            return Err(shape_err!("noise {:?} for signal {:?}", eps.shape(), x0.shape()));
        }
        let a = T::lit(self.alpha_bar[t].sqrt());
        let b = T::lit((1.0 - self.alpha_bar[t]).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
        Tensor::new(x0.shape(), data)
    }
}

/// A strided sub-schedule plus the original timestep of every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Respaced {
    pub schedule: NoiseSchedule,
    pub timesteps: Vec<usize>,
}
