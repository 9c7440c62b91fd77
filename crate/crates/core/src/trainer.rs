//! Training loop, cohort generation and the finite-difference gradient check.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, ParamStore, Tensor};
use crate::data::{
    generate_synthetic_cohort, Cohort, DataError, PatientRecord, SyntheticCohortConfig, Visit,
};
use crate::model::{decode_codes, Batch, Draws, EhrModel, ModelConfig, ModelError, ModelShape};
use crate::objectives::{batch_loss, row_weights, Components};
use crate::optim::{Adam, AdamConfig};
use crate::pddpm::{ancestral_sample, predict_next_visit, standard_normal, ScheduleConfig};
use crate::punet::PUNetConfig;
use crate::real::Real;
use crate::time_embed::EmbedOptions;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no patient has two or more visits")]
    NoTransitions,
    #[error("non-finite {component} loss at epoch {epoch}, patient {patient}")]
    NonFinite {
        epoch: usize,
        patient: String,
        component: String,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Floating-point width used for parameters and arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, String> {
        match bits {
            32 => Ok(Self::F32),
            64 => Ok(Self::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Patients per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Reduce in a fixed order so that equal seeds give equal runs. Every
    /// code path currently honours this, so the flag is informational.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 16,
            seed: 42,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                o.lr
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(TrainError::Config(
                "weight decay must be non-negative".into(),
            ));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::Config(
                "Adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: EhrModel<T>,
    pub optimizer: Adam<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Real> TrainState<T> {
    /// Fresh model sized for `cohort`, with the mean gap of its transitions.
    pub fn init(cohort: &Cohort, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = EhrModel::new(&config.model, &ModelShape::of(cohort), config.seed)?;
        model.mean_gap = mean_gap(cohort);
        let optimizer = Adam::new(config.optimizer, &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            rng,
            epoch: 0,
        })
    }
}

pub fn mean_gap(cohort: &Cohort) -> f64 {
    let gaps: Vec<f64> = cohort.patients.iter().flat_map(|p| p.gaps()).collect();
    if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}

/// Mean losses of one epoch, averaged over patients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub diffusion: f64,
    pub codes: f64,
    pub time: f64,
    pub total: f64,
}

pub const CSV_HEADER: &str = "epoch,L_d,L_e,L_t,total";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.diffusion, self.codes, self.time, self.total
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in log {
        let _ = writeln!(out, "{}", e.csv_row());
    }
    out
}

/// Trains a fresh model on `cohort` for the configured number of epochs.
pub fn train<T: Real>(
    cohort: &Cohort,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainState<T>, Vec<EpochLog>), TrainError> {
    let mut state = TrainState::init(cohort, config)?;
    let log = train_epochs(&mut state, cohort, config.epochs, on_epoch)?;
    Ok((state, log))
}

/// Continues training `state` for `epochs` more epochs.
pub fn train_epochs<T: Real>(
    state: &mut TrainState<T>,
    cohort: &Cohort,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    state.model.shape.check(cohort)?;
    let mut patients: Vec<&PatientRecord> = Vec::with_capacity(cohort.patients.len());
    for p in &cohort.patients {
        if p.visits.len() >= 2 {
            patients.push(p);
        } else {
            log::warn!("skipping patient {} with a single visit", p.patient_id);
        }
    }
    if patients.is_empty() {
        return Err(TrainError::NoTransitions);
    }
    let cfg = state.config.clone();
    let d = state.model.d();
    let steps = state.model.schedule.steps();
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = state.epoch + 1;
        patients.shuffle(&mut state.rng);
        let mut sums = Components::default();
        let mut total = 0.0;
        for chunk in patients.chunks(cfg.batch_size) {
            let batch = state.model.batch(chunk);
            let draws = Draws::sample(&batch, d, steps, &mut state.rng);
            let weights = row_weights(&batch.transitions);
            let (grads, bn, loss, comps) = {
                let mut g = Graph::new(&state.model.store, true);
                let f = state
                    .model
                    .forward(&mut g, &batch, &draws, EmbedOptions::default());
                let l = batch_loss(
                    &mut g,
                    &f.terms,
                    &weights,
                    &cfg.model.loss_weights,
                    cfg.model.focal,
                );
                let value = g.value(l.total).item().as_f64();
                if !value.is_finite() {
                    return Err(non_finite(&g, &l.columns, &batch, chunk, epoch));
                }
                let grads = g.backward(l.total);
                (grads, g.take_bn_updates(), value, l.components)
            };
            apply_bn_updates(&mut state.model.store, bn);
            state.optimizer.update(&mut state.model.store, &grads);
            let b = chunk.len() as f64;
            total += loss * b;
            sums.diffusion += comps.diffusion * b;
            sums.codes += comps.codes * b;
            sums.time += comps.time * b;
        }
        let n = patients.len() as f64;
        let entry = EpochLog {
            epoch,
            diffusion: sums.diffusion / n,
            codes: sums.codes / n,
            time: sums.time / n,
            total: total / n,
        };
        state.epoch = epoch;
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

fn non_finite<T: Real>(
    g: &Graph<'_, T>,
    columns: &[(&'static str, crate::autodiff::Var)],
    batch: &Batch<T>,
    patients: &[&PatientRecord],
    epoch: usize,
) -> TrainError {
    let owner = |row: usize| {
        let mut acc = 0;
        for (k, &n) in batch.transitions.iter().enumerate() {
            acc += n;
            if row < acc {
                return patients[k].patient_id.clone();
            }
        }
        String::from("?")
    };
    for &(name, col) in columns {
        if let Some(r) = g
            .value(col)
            .data
            .iter()
            .position(|x| !x.as_f64().is_finite())
        {
            return TrainError::NonFinite {
                epoch,
                patient: owner(r),
                component: name.into(),
            };
        }
    }
    TrainError::NonFinite {
        epoch,
        patient: owner(0),
        component: "total".into(),
    }
}

const BN_MOMENTUM: f64 = 0.1;

fn apply_bn_updates<T: Real>(
    store: &mut ParamStore<T>,
    updates: Vec<crate::autodiff::BnUpdate<T>>,
) {
    let m = T::of(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, x) in store.get_mut(u.running_mean).data.iter_mut().zip(&u.mean) {
            *r = keep * *r + m * *x;
        }
        for (r, x) in store.get_mut(u.running_var).data.iter_mut().zip(&u.var) {
            *r = keep * *r + m * *x;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// Clean estimate at one random diffusion step, as in training.
    #[default]
    OneShot,
    /// Full reverse chain from the last step down to the first.
    Ancestral,
}

/// Rolls every seed patient forward `horizon` visits from its first real
/// visit. `horizon == 0` returns the seed cohort unchanged.
pub fn generate_cohort<T: Real>(
    model: &EhrModel<T>,
    seeds: &Cohort,
    horizon: usize,
    mode: GenerationMode,
    seed: u64,
) -> Result<Cohort, ModelError> {
    model.shape.check(seeds)?;
    if horizon == 0 {
        return Ok(seeds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histories: Vec<Vec<Visit>> = seeds
        .patients
        .iter()
        .map(|p| p.visits[..1].to_vec())
        .collect();
    let d = model.d();
    let steps = model.schedule.steps();
    for _ in 0..horizon {
        let inputs: Vec<(&[Visit], &[u8])> = histories
            .iter()
            .zip(&seeds.patients)
            .map(|(h, p)| (h.as_slice(), p.demographics.as_slice()))
            .collect();
        if inputs.is_empty() {
            break;
        }
        let h = model.encode_histories(&inputs);
        let n = inputs.len();
        let eps = Tensor::from_vec(n, d, standard_normal(n * d, &mut rng));
        let denoise = |x: &Tensor<T>, s: &[usize]| model.denoise(x, &h.phi, s);
        let predicted = match mode {
            GenerationMode::OneShot => {
                let s: Vec<usize> = (0..n).map(|_| rng.random_range(1..=steps)).collect();
                predict_next_visit(&h.current, &s, &eps, &model.schedule, denoise)?
            }
            GenerationMode::Ancestral => {
                ancestral_sample(&h.current, &eps, &model.schedule, denoise, Some(&mut rng))?
            }
        };
        let probs = model.code_probabilities(&predicted);
        for (k, hist) in histories.iter_mut().enumerate() {
            let codes = probs.iter().map(|p| decode_codes(p.row(k))).collect();
            let last = hist.last().expect("history starts with a real visit").time;
            hist.push(Visit::new(last + h.interval[k].max(0.0), codes));
        }
    }
    let patients = seeds
        .patients
        .iter()
        .zip(histories)
        .map(|(p, visits)| PatientRecord {
            patient_id: format!("syn-{}", p.patient_id),
            demographics: p.demographics.clone(),
            visits,
            source_patient_id: Some(p.patient_id.clone()),
        })
        .collect();
    Ok(Cohort {
        name: format!("{}-synthetic", seeds.name),
        seed: Some(seed),
        vocabularies: seeds.vocabularies.clone(),
        demographics_dim: seeds.demographics_dim,
        patients,
    })
}

/// Settings of the finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub modalities: usize,
    pub patients: usize,
    pub max_visits: usize,
    pub demographics_dim: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 16,
                punet: PUNetConfig {
                    widths: vec![32, 16],
                    channels: 4,
                    step_embed_dim: 8,
                },
                schedule: ScheduleConfig {
                    steps: 5,
                    ..Default::default()
                },
                ..Default::default()
            },
            vocab_size: 8,
            modalities: 2,
            patients: 3,
            max_visits: 4,
            demographics_dim: 3,
            step: 1e-5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter holding the largest error.
    pub worst: Option<String>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares `grads` with central differences of `loss` for every trainable
/// element whose parameter name passes `filter`.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    h: f64,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let entry = store.entry(id);
        if !entry.trainable || !filter(&entry.name) {
            continue;
        }
        let name = entry.name.clone();
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + h;
            let up = loss(store);
            store.get_mut(id).data[i] = orig - h;
            let down = loss(store);
            store.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(name.clone());
            }
        }
    }
    report
}

/// Gradient check of the full training objective on a tiny cohort in double
/// precision. The gate uses its relaxed score, Gumbel noise is zero and the
/// diffusion steps and noise are fixed.
pub fn grad_check(
    cfg: &GradCheckConfig,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, TrainError> {
    let cohort = generate_synthetic_cohort(&SyntheticCohortConfig {
        name: "grad-check".into(),
        num_patients: cfg.patients,
        vocab_sizes: vec![cfg.vocab_size; cfg.modalities],
        max_visits: cfg.max_visits,
        demographics_dim: cfg.demographics_dim,
        seed: cfg.seed,
        ..Default::default()
    })?;
    let mut model = EhrModel::<f64>::new(&cfg.model, &ModelShape::of(&cohort), cfg.seed)?;
    let refs: Vec<&PatientRecord> = cohort.patients.iter().collect();
    let batch = model.batch(&refs);
    if batch.num_transitions() == 0 {
        return Err(TrainError::NoTransitions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws =
        Draws::sample(&batch, cfg.model.d, model.schedule.steps(), &mut rng).without_gumbel();
    let weights = row_weights(&batch.transitions);
    let opts = EmbedOptions {
        hard_gate: false,
        mask: None,
    };
    let objective = |m: &EhrModel<f64>, store: &ParamStore<f64>| -> (f64, Gradients<f64>) {
        let mut g = Graph::new(store, true);
        let f = m.forward(&mut g, &batch, &draws, opts);
        let l = batch_loss(
            &mut g,
            &f.terms,
            &weights,
            &cfg.model.loss_weights,
            cfg.model.focal,
        );
        (g.value(l.total).item(), g.backward(l.total))
    };
    let (_, grads) = objective(&model, &model.store);
    let mut store = std::mem::take(&mut model.store);
    let report = finite_difference_check(&mut store, &grads, cfg.step, filter, |s| {
        let mut g = Graph::new(s, true);
        let f = model.forward(&mut g, &batch, &draws, opts);
        let l = batch_loss(
            &mut g,
            &f.terms,
            &weights,
            &cfg.model.loss_weights,
            cfg.model.focal,
        );
        g.value(l.total).item()
    });
    model.store = store;
    Ok(report)
}
