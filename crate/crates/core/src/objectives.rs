//! Prediction head and training losses.
//!
//! Every transition contributes `w_d L_d + w_e L_e + w_t L_t`, where `L_d` is
//! the mean squared error between the predicted and the embedded next visit,
//! `L_e` the focal loss of the decoded codes averaged over modalities and
//! codes, and `L_t` the squared error of the predicted interval. A patient's
//! transitions are averaged, then patients are averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{focal_term, Graph, ParamStore, Tensor, Var};
use crate::nn::Dense;
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("no transitions to average")]
    NoTransitions,
    #[error("invalid loss parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub diffusion: f64,
    pub codes: f64,
    pub time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diffusion: 0.5,
            codes: 1000.0,
            time: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in [
            ("diffusion", self.diffusion),
            ("codes", self.codes),
            ("time", self.time),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::Invalid(format!(
                    "{name} weight must be a non-negative number"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub kappa: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            kappa: 0.75,
            gamma: 5.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(LossError::Invalid(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::Invalid(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-modality `sigmoid(W2 relu(W1 v + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    layers: Vec<(Dense, Dense)>,
}

impl PredictionHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        vocab_sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = vocab_sizes
            .iter()
            .enumerate()
            .map(|(n, &size)| {
                (
                    Dense::new(store, &format!("head.{n}.hidden"), d, d, true, rng),
                    Dense::new(store, &format!("head.{n}.out"), d, size, true, rng),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn num_modalities(&self) -> usize {
        self.layers.len()
    }

    /// Code probabilities for each modality, one row per input row.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, v: Var) -> Vec<Var> {
        self.layers
            .iter()
            .map(|(hidden, out)| {
                let h = hidden.forward(g, v);
                let h = g.relu(h);
                let logits = out.forward(g, h);
                g.sigmoid(logits)
            })
            .collect()
    }
}

/// `(1/d) ||a - b||^2`.
pub fn diffusion_loss(predicted: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(LossError::WidthMismatch(predicted.len(), target.len()));
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Focal loss averaged over the codes of each modality, then over modalities.
/// `probs[n]` and `labels[n]` hold the predictions and 0/1 targets of modality `n`.
pub fn focal_loss(
    probs: &[Vec<f64>],
    labels: &[Vec<u8>],
    params: FocalParams,
) -> Result<f64, LossError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(LossError::WidthMismatch(probs.len(), labels.len()));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        if p.len() != y.len() || p.is_empty() {
            return Err(LossError::WidthMismatch(p.len(), y.len()));
        }
        let sum: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| focal_term(p, f64::from(y), params.kappa, params.gamma).0)
            .sum();
        total += sum / p.len() as f64;
    }
    Ok(total / probs.len() as f64)
}

pub fn time_loss(gap: f64, predicted: f64) -> f64 {
    (gap - predicted) * (gap - predicted)
}

/// Unweighted loss components of one transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub diffusion: f64,
    pub codes: f64,
    pub time: f64,
}

impl Components {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.diffusion * self.diffusion + w.codes * self.codes + w.time * self.time
    }
}

/// Mean weighted loss over the transitions of one patient.
pub fn total_loss(transitions: &[Components], weights: &LossWeights) -> Result<f64, LossError> {
    if transitions.is_empty() {
        return Err(LossError::NoTransitions);
    }
    Ok(transitions.iter().map(|c| c.weighted(weights)).sum::<f64>() / transitions.len() as f64)
}

/// Row weights `1 / (B n_p)` for rows grouped by patient, given the number
/// of transitions of each patient in row order.
pub fn row_weights(transitions_per_patient: &[usize]) -> Vec<f64> {
    let b = transitions_per_patient.iter().filter(|&&n| n > 0).count();
    transitions_per_patient
        .iter()
        .flat_map(|&n| std::iter::repeat_n(1.0 / (b * n) as f64, n))
        .collect()
}

/// Graph nodes of a batch of transitions.
pub struct TransitionTerms {
    /// Predicted next-visit embeddings.
    pub predicted: Var,
    /// Embedded next visits used as targets.
    pub target: Var,
    /// Per-modality code probabilities.
    pub probs: Vec<Var>,
    /// Per-modality 0/1 code targets.
    pub labels: Vec<Tensor<f64>>,
    /// Predicted intervals, absent when interval estimation is disabled.
    pub interval: Option<Var>,
    pub gaps: Vec<f64>,
}

/// Batch loss and its unweighted components, both averaged with the same
/// row weights.
pub struct BatchLoss {
    pub total: Var,
    pub components: Components,
    /// Per-row unweighted columns by component name, for diagnostics.
    pub columns: Vec<(&'static str, Var)>,
}

/// Builds the weighted batch objective. The target embedding is not detached,
/// so the reconstruction term also trains the visit embedding.
pub fn batch_loss<T: Real>(
    g: &mut Graph<'_, T>,
    terms: &TransitionTerms,
    row_weights: &[f64],
    weights: &LossWeights,
    focal: FocalParams,
) -> BatchLoss {
    let n_mod = terms.probs.len() as f64;
    let ld = g.mse_rows(terms.predicted, terms.target);
    let mut cols = vec![g.affine(ld, T::of(weights.diffusion), T::zero())];
    let mut focal_cols = Vec::with_capacity(terms.probs.len());
    for (&p, y) in terms.probs.iter().zip(&terms.labels) {
        let y = Tensor::from_vec(y.rows, y.cols, y.data.iter().map(|&v| T::of(v)).collect());
        let f = g.focal_rows(p, y, T::of(focal.kappa), T::of(focal.gamma));
        focal_cols.push(f);
        cols.push(g.affine(f, T::of(weights.codes / n_mod), T::zero()));
    }
    let lt = terms.interval.map(|iv| {
        let lt = g.sq_err(iv, terms.gaps.iter().map(|&x| T::of(x)).collect());
        cols.push(g.affine(lt, T::of(weights.time), T::zero()));
        lt
    });
    let all = g.concat_cols(cols);
    let w: Vec<T> = row_weights.iter().map(|&x| T::of(x)).collect();
    let total = g.weighted_sum(all, w);

    let mean = |g: &Graph<'_, T>, v: Var| -> f64 {
        g.value(v)
            .data
            .iter()
            .zip(row_weights)
            .map(|(x, w)| x.as_f64() * w)
            .sum()
    };
    let components = Components {
        diffusion: mean(g, ld),
        codes: focal_cols.iter().map(|&f| mean(g, f)).sum::<f64>() / n_mod,
        time: lt.map_or(0.0, |lt| mean(g, lt)),
    };
    let mut columns = vec![("diffusion", ld)];
    columns.extend(focal_cols.iter().map(|&f| ("codes", f)));
    columns.extend(lt.map(|lt| ("time", lt)));
    BatchLoss {
        total,
        components,
        columns,
    }
}
