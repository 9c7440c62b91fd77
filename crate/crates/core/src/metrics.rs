//! Fidelity, privacy and interval-accuracy metrics.
//!
//! LPL and MPL are the exponentiated mean binary negative log-likelihood of
//! next-visit codes per code slot, under teacher forcing. MPL hides the
//! scored modality from the visit embeddings, so it measures how well the
//! other modalities impute it. Presence disclosure matches each visit of a
//! sample of known real patients to its most similar synthetic visit and
//! counts how often that visit was generated from the same patient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::autodiff::PROB_CLAMP;
use crate::data::{Cohort, PatientRecord};
use crate::model::{Draws, EhrModel, ModelError};
use crate::real::Real;
use crate::time_embed::EmbedOptions;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("synthetic cohort is empty")]
    EmptySynthetic,
    #[error("known fraction must lie in [0, 1], got {0}")]
    Fraction(f64),
    #[error("real and synthetic cohorts use different vocabularies")]
    VocabularyMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fixed seed of the diffusion steps and noise drawn for evaluation.
pub const EVAL_SEED: u64 = 0x5eed;
const EVAL_BATCH: usize = 16;

/// Binary negative log-likelihood summed over code slots, with the slot count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllSum {
    pub nll: f64,
    pub slots: usize,
}

impl NllSum {
    pub fn add(&mut self, p: f64, y: f64) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        self.nll -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        self.slots += 1;
    }

    pub fn perplexity(&self) -> f64 {
        (self.nll / self.slots as f64).exp()
    }
}

/// Per-modality NLL of teacher-forced next-visit predictions. With `mask`,
/// that modality's codes are hidden from the visit embeddings.
pub fn code_nll<T: Real>(
    model: &EhrModel<T>,
    cohort: &Cohort,
    mask: Option<usize>,
    seed: u64,
) -> Vec<NllSum> {
    let mut sums = vec![NllSum::default(); model.num_modalities()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patients: Vec<&PatientRecord> = cohort
        .patients
        .iter()
        .filter(|p| p.visits.len() >= 2)
        .collect();
    let opts = EmbedOptions {
        hard_gate: true,
        mask,
    };
    for chunk in patients.chunks(EVAL_BATCH) {
        let batch = model.batch(chunk);
        let draws =
            Draws::sample(&batch, model.d(), model.schedule.steps(), &mut rng).without_gumbel();
        let mut g = Graph::new(&model.store, false);
        let f = model.forward(&mut g, &batch, &draws, opts);
        for (n, (&p, y)) in f.terms.probs.iter().zip(&batch.labels).enumerate() {
            for (&pv, &yv) in g.value(p).data.iter().zip(&y.data) {
                sums[n].add(pv.as_f64(), yv);
            }
        }
    }
    sums
}

/// Longitudinal imputation perplexity of each modality.
pub fn lpl<T: Real>(model: &EhrModel<T>, cohort: &Cohort, seed: u64) -> Vec<f64> {
    code_nll(model, cohort, None, seed)
        .iter()
        .map(NllSum::perplexity)
        .collect()
}

/// Cross-modality imputation perplexity of each modality; `None` with a
/// single modality.
pub fn mpl<T: Real>(model: &EhrModel<T>, cohort: &Cohort, seed: u64) -> Option<Vec<f64>> {
    if model.num_modalities() < 2 {
        return None;
    }
    Some(
        (0..model.num_modalities())
            .map(|n| code_nll(model, cohort, Some(n), seed)[n].perplexity())
            .collect(),
    )
}

pub fn rmse(actual: &[f64], predicted: &[f64]) -> Option<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return None;
    }
    let mse = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>()
        / actual.len() as f64;
    Some(mse.sqrt())
}

/// Observed and predicted gaps of every transition.
pub fn interval_predictions<T: Real>(model: &EhrModel<T>, cohort: &Cohort) -> (Vec<f64>, Vec<f64>) {
    let patients: Vec<&PatientRecord> = cohort
        .patients
        .iter()
        .filter(|p| p.visits.len() >= 2)
        .collect();
    let (mut actual, mut predicted) = (Vec::new(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    for chunk in patients.chunks(EVAL_BATCH) {
        let batch = model.batch(chunk);
        actual.extend_from_slice(&batch.gaps);
        match model.estimates_interval() {
            true => {
                let draws = Draws::sample(&batch, model.d(), model.schedule.steps(), &mut rng)
                    .without_gumbel();
                let mut g = Graph::new(&model.store, false);
                let f = model.forward(&mut g, &batch, &draws, EmbedOptions::default());
                let dl = f.catalyst.delta.expect("interval estimation is enabled");
                predicted.extend(g.value(dl).data.iter().map(|x| x.as_f64()));
            }
            false => predicted.extend(std::iter::repeat_n(model.mean_gap, batch.gaps.len())),
        }
    }
    (actual, predicted)
}

/// RMSE of the predicted inter-visit gaps; `None` without transitions.
pub fn time_rmse<T: Real>(model: &EhrModel<T>, cohort: &Cohort) -> Option<f64> {
    let (a, p) = interval_predictions(model, cohort);
    rmse(&a, &p)
}

/// RMSE of always predicting `gap`.
pub fn constant_gap_rmse(cohort: &Cohort, gap: f64) -> Option<f64> {
    let actual: Vec<f64> = cohort.patients.iter().flat_map(|p| p.gaps()).collect();
    rmse(&actual, &vec![gap; actual.len()])
}

fn flat_codes(cohort: &Cohort, codes: &[Vec<usize>]) -> Vec<usize> {
    let mut offset = 0;
    let mut out = Vec::new();
    for (c, v) in codes.iter().zip(&cohort.vocabularies) {
        out.extend(c.iter().map(|&k| k + offset));
        offset += v.size();
    }
    out
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Positions on which two multi-hot vectors of length `len` agree, given
/// their sorted sets of active positions.
pub fn hamming_similarity(len: usize, a: &[usize], b: &[usize]) -> usize {
    len + 2 * intersection(a, b) - a.len() - b.len()
}

/// Percentage of known real visits whose most similar synthetic visit was
/// generated from the same patient. `None` when no visit is known.
pub fn presence_disclosure(
    real: &Cohort,
    synthetic: &Cohort,
    known_fraction: f64,
    seed: u64,
) -> Result<Option<f64>, MetricsError> {
    if !(0.0..=1.0).contains(&known_fraction) {
        return Err(MetricsError::Fraction(known_fraction));
    }
    if real.vocab_sizes() != synthetic.vocab_sizes() {
        return Err(MetricsError::VocabularyMismatch);
    }
    let sources: Vec<&str> = synthetic
        .patients
        .iter()
        .flat_map(|p| {
            std::iter::repeat_n(
                p.source_patient_id.as_deref().unwrap_or(&p.patient_id),
                p.visits.len(),
            )
        })
        .collect();
    if sources.is_empty() {
        return Err(MetricsError::EmptySynthetic);
    }
    let pool_codes: Vec<Vec<usize>> = synthetic
        .patients
        .iter()
        .flat_map(|p| p.visits.iter().map(|v| flat_codes(synthetic, &v.codes)))
        .collect();
    let known_count = (known_fraction * real.patients.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..real.patients.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let known: Vec<(Vec<usize>, &str)> = order[..known_count]
        .iter()
        .flat_map(|&i| {
            let p = &real.patients[i];
            p.visits
                .iter()
                .map(move |v| (flat_codes(real, &v.codes), p.patient_id.as_str()))
        })
        .collect();
    if known.is_empty() {
        return Ok(None);
    }
    let len: usize = real.vocab_sizes().iter().sum();
    let hits: usize = known
        .par_iter()
        .map(|(codes, id)| {
            let mut best = (0, 0);
            for (j, cand) in pool_codes.iter().enumerate() {
                let s = hamming_similarity(len, codes, cand);
                if j == 0 || s > best.1 {
                    best = (j, s);
                }
            }
            usize::from(sources[best.0] == *id)
        })
        .sum();
    Ok(Some(100.0 * hits as f64 / known.len() as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub patients: usize,
    pub transitions: usize,
    pub synthetic_patients: usize,
}

/// Evaluation report. Absent metrics serialise as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lpl: BTreeMap<String, f64>,
    pub mpl: Option<BTreeMap<String, f64>>,
    pub pd: BTreeMap<String, Option<f64>>,
    pub time_rmse: Option<f64>,
    pub counts: MetricCounts,
}

/// Which metrics to compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub lpl: bool,
    pub mpl: bool,
    pub time_rmse: bool,
    /// Known fractions for presence disclosure; empty skips it.
    pub pd_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lpl: true,
            mpl: true,
            time_rmse: true,
            pd_fractions: vec![0.1],
            seed: EVAL_SEED,
        }
    }
}

pub fn evaluate<T: Real>(
    model: &EhrModel<T>,
    real: &Cohort,
    synthetic: Option<&Cohort>,
    opts: &EvalOptions,
) -> Result<MetricReport, MetricsError> {
    model.shape.check(real)?;
    let names: Vec<String> = real
        .vocabularies
        .iter()
        .map(|v| v.modality.clone())
        .collect();
    let named = |values: Vec<f64>| {
        names
            .iter()
            .cloned()
            .zip(values)
            .collect::<BTreeMap<_, _>>()
    };
    let mut report = MetricReport {
        counts: MetricCounts {
            patients: real.patients.len(),
            transitions: real.num_transitions(),
            synthetic_patients: synthetic.map_or(0, |s| s.patients.len()),
        },
        ..Default::default()
    };
    if opts.lpl {
        report.lpl = named(lpl(model, real, opts.seed));
    }
    if opts.mpl {
        report.mpl = mpl(model, real, opts.seed).map(named);
    }
    if opts.time_rmse {
        report.time_rmse = time_rmse(model, real);
    }
    if let Some(syn) = synthetic {
        for &f in &opts.pd_fractions {
            report
                .pd
                .insert(f.to_string(), presence_disclosure(real, syn, f, opts.seed)?);
        }
    }
    Ok(report)
}
