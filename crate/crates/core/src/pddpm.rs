//! Noise schedule and closed-form algebra of the predictive diffusion
//! process, plus the one-shot and ancestral generation loops.
//!
//! Steps are 1-based: `s` ranges over `1..=S` and `alpha_bar(0)` is 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid noise schedule: {0}")]
    Invalid(String),
    #[error("diffusion step {s} outside 1..={steps}")]
    StepOutOfRange { s: usize, steps: usize },
    #[error("degenerate schedule at step {0}: alpha_bar is 1")]
    Degenerate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            shape: ScheduleShape::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `1 - alpha_bar`, accumulated as `(1 - ab_{s-1}) + ab_{s-1} beta_s` so
    /// it stays exact at `s = 1` and accurate when `alpha_bar` is close to 1.
    one_minus_alpha_bars: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(cfg: &ScheduleConfig) -> Result<Self, ScheduleError> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            shape,
        } = *cfg;
        if steps == 0 {
            return Err(ScheduleError::Invalid(
                "at least one step is required".into(),
            ));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = match shape {
            ScheduleShape::Linear if steps == 1 => vec![beta_start],
            ScheduleShape::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, ScheduleError> {
        if betas.is_empty() {
            return Err(ScheduleError::Invalid(
                "at least one step is required".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(ScheduleError::Invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut one_minus_alpha_bars = Vec::with_capacity(alphas.len());
        let (mut acc, mut rest) = (1.0, 0.0);
        for (a, b) in alphas.iter().zip(&betas) {
            rest += acc * b;
            acc *= a;
            alpha_bars.push(acc);
            one_minus_alpha_bars.push(rest);
        }
        let posterior_variance = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 {
                    0.0
                } else {
                    one_minus_alpha_bars[i - 1]
                };
                prev / one_minus_alpha_bars[i] * betas[i]
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            one_minus_alpha_bars,
            posterior_variance,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, s: usize) -> Result<(), ScheduleError> {
        if s == 0 || s > self.steps() {
            return Err(ScheduleError::StepOutOfRange {
                s,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    /// Cumulative product of alphas up to `s`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    /// `1 - alpha_bar(s)`, zero at `s = 0`.
    pub fn one_minus_alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.one_minus_alpha_bars[s - 1]
        }
    }

    pub fn posterior_variance(&self, s: usize) -> f64 {
        self.posterior_variance[s - 1]
    }

    /// Coefficients `(c_s, c_0)` of the posterior mean `c_s * v_s + c_0 * v_0`.
    pub fn posterior_coefficients(&self, s: usize) -> (f64, f64) {
        let denom = self.one_minus_alpha_bar(s);
        let prev = self.alpha_bar(s - 1);
        (
            self.alpha(s).sqrt() * self.one_minus_alpha_bar(s - 1) / denom,
            prev.sqrt() * self.beta(s) / denom,
        )
    }

    fn nondegenerate(&self, s: usize) -> Result<(), ScheduleError> {
        self.check_step(s)?;
        if self.one_minus_alpha_bar(s) <= 0.0 {
            return Err(ScheduleError::Degenerate(s));
        }
        Ok(())
    }
}

/// Closed-form noising `sqrt(ab_s) v0 + sqrt(1 - ab_s) eps`. Step 0 returns
/// `v0` unchanged.
pub fn forward_noise<T: Real>(
    v0: &[T],
    s: usize,
    eps: &[T],
    schedule: &NoiseSchedule,
) -> Result<Vec<T>, ScheduleError> {
    if s > 0 {
        schedule.check_step(s)?;
    }
    let (a, b) = (
        T::of(schedule.alpha_bar(s).sqrt()),
        T::of(schedule.one_minus_alpha_bar(s).sqrt()),
    );
    Ok(v0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Applies the one-step transition `v_s = sqrt(alpha_s) v_{s-1} + sqrt(beta_s) eps`
/// once per supplied noise vector and returns `v_1..v_S`.
pub fn forward_chain<T: Real>(
    v0: &[T],
    noises: &[Vec<T>],
    schedule: &NoiseSchedule,
) -> Vec<Vec<T>> {
    let mut cur = v0.to_vec();
    noises
        .iter()
        .enumerate()
        .map(|(i, eps)| {
            let s = i + 1;
            let (a, b) = (
                T::of(schedule.alpha(s).sqrt()),
                T::of(schedule.beta(s).sqrt()),
            );
            cur = cur.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect();
            cur.clone()
        })
        .collect()
}

/// Posterior mean of `v^{s-1}` given `v^s` and the clean vector.
pub fn posterior_mean_from_x0<T: Real>(
    v_s: &[T],
    v0: &[T],
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<T>, ScheduleError> {
    schedule.nondegenerate(s)?;
    let (cs, c0) = schedule.posterior_coefficients(s);
    let (cs, c0) = (T::of(cs), T::of(c0));
    Ok(v_s.iter().zip(v0).map(|(&x, &z)| cs * x + c0 * z).collect())
}

/// Posterior mean of `v^{s-1}` given `v^s` and the noise that produced it.
pub fn posterior_mean_from_eps<T: Real>(
    v_s: &[T],
    eps: &[T],
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<T>, ScheduleError> {
    schedule.nondegenerate(s)?;
    let inv = T::of(1.0 / schedule.alpha(s).sqrt());
    let c = T::of(schedule.beta(s) / schedule.one_minus_alpha_bar(s).sqrt());
    Ok(v_s
        .iter()
        .zip(eps)
        .map(|(&x, &e)| inv * (x - c * e))
        .collect())
}

/// Noise consistent with `v_s` and a clean estimate, from inverting the
/// closed-form noising.
pub fn eps_from_x0<T: Real>(
    v_s: &[T],
    x0: &[T],
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<T>, ScheduleError> {
    schedule.nondegenerate(s)?;
    let a = T::of(schedule.alpha_bar(s).sqrt());
    let inv = T::of(1.0 / schedule.one_minus_alpha_bar(s).sqrt());
    Ok(v_s
        .iter()
        .zip(x0)
        .map(|(&x, &z)| (x - a * z) * inv)
        .collect())
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        })
        .collect()
}

/// One-shot prediction: noise each current-visit row to its step and return
/// the network's clean estimate of the next visit. `denoise` receives the
/// noised batch and the per-row steps.
pub fn predict_next_visit<T, F>(
    v: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    mut denoise: F,
) -> Result<Tensor<T>, ScheduleError>
where
    T: Real,
    F: FnMut(&Tensor<T>, &[usize]) -> Tensor<T>,
{
    let mut noised = Tensor::zeros(v.rows, v.cols);
    for (r, &s) in steps[..v.rows].iter().enumerate() {
        let row = forward_noise(v.row(r), s, eps.row(r), schedule)?;
        noised.row_mut(r).copy_from_slice(&row);
    }
    Ok(denoise(&noised, steps))
}

/// Ancestral sampling from step `S` down to 1. The chain starts from the
/// current visit noised to step `S`; at each step the clean estimate is
/// turned into a noise estimate and the posterior mean is perturbed by
/// `sqrt(posterior variance) * z`. Passing `rng = None` sets every `z` to 0.
pub fn ancestral_sample<T, F, R>(
    v: &Tensor<T>,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    mut denoise: F,
    mut rng: Option<&mut R>,
) -> Result<Tensor<T>, ScheduleError>
where
    T: Real,
    F: FnMut(&Tensor<T>, &[usize]) -> Tensor<T>,
    R: Rng + ?Sized,
{
    let big_s = schedule.steps();
    let mut cur = Tensor::zeros(v.rows, v.cols);
    for r in 0..v.rows {
        let row = forward_noise(v.row(r), big_s, eps.row(r), schedule)?;
        cur.row_mut(r).copy_from_slice(&row);
    }
    for s in (1..=big_s).rev() {
        let x0 = denoise(&cur, &vec![s; v.rows]);
        let sigma = T::of(schedule.posterior_variance(s).sqrt());
        let mut next = Tensor::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let e = eps_from_x0(cur.row(r), x0.row(r), s, schedule)?;
            let mean = posterior_mean_from_eps(cur.row(r), &e, s, schedule)?;
            let out = next.row_mut(r);
            out.copy_from_slice(&mean);
            if s > 1 {
                if let Some(rng) = rng.as_deref_mut() {
                    let z: Vec<T> = standard_normal(v.cols, rng);
                    out.iter_mut().zip(z).for_each(|(o, z)| *o += sigma * z);
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}
