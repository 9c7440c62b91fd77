//! The assembled next-visit model: visit embedding, catalyst, PU-Net and
//! prediction head, plus batching of teacher-forced transitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::catalyst::{Catalyst, CatalystOutput, Sequence};
use crate::data::{Cohort, PatientRecord, Visit};
use crate::objectives::{FocalParams, LossError, LossWeights, PredictionHead, TransitionTerms};
use crate::pddpm::{standard_normal, NoiseSchedule, ScheduleConfig, ScheduleError};
use crate::punet::{PUNet, PUNetConfig};
use crate::real::Real;
use crate::time_embed::{gumbel_noise, CodeRows, EmbedOptions, TimeAwareEmbedding};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embedding width must be even and positive, got {0}")]
    OddWidth(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("cohort does not match the model: {0}")]
    ShapeMismatch(String),
}

/// Switches that remove one component each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Plain code embeddings without the time-gap gate.
    pub disable_time_aware_embedding: bool,
    /// No interval estimation; generation uses the mean training gap.
    pub disable_time_estimation: bool,
    pub disable_demographics: bool,
    /// Skip connections bypass catalyst attention.
    pub disable_catalyst_attention: bool,
}

impl Ablations {
    /// Parses `as1` to `as4`, or `none`.
    pub fn named(name: &str) -> Option<Self> {
        let mut a = Self::default();
        match name.to_ascii_lowercase().as_str() {
            "none" => {}
            "as1" => a.disable_time_aware_embedding = true,
            "as2" => a.disable_time_estimation = true,
            "as3" => a.disable_demographics = true,
            "as4" => a.disable_catalyst_attention = true,
            _ => return None,
        }
        Some(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Visit embedding width.
    pub d: usize,
    /// Gumbel gate temperature.
    pub eta: f64,
    pub punet: PUNetConfig,
    pub schedule: ScheduleConfig,
    pub ablations: Ablations,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            eta: 1.0,
            punet: PUNetConfig::default(),
            schedule: ScheduleConfig::default(),
            ablations: Ablations::default(),
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(ModelError::OddWidth(self.d));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        self.punet.lengths()?;
        NoiseSchedule::build(&self.schedule)?;
        self.loss_weights.validate()?;
        self.focal.validate()?;
        Ok(())
    }
}

/// Data-dependent sizes fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub vocab_sizes: Vec<usize>,
    pub demographics_dim: usize,
}

impl ModelShape {
    pub fn of(cohort: &Cohort) -> Self {
        Self {
            vocab_sizes: cohort.vocab_sizes(),
            demographics_dim: cohort.demographics_dim,
        }
    }

    pub fn check(&self, cohort: &Cohort) -> Result<(), ModelError> {
        let other = Self::of(cohort);
        if *self != other {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects vocabularies {:?} and {} demographic bits, cohort has {:?} and {}",
                self.vocab_sizes, self.demographics_dim, other.vocab_sizes, other.demographics_dim
            )));
        }
        Ok(())
    }
}

/// Teacher-forced transitions of a set of patients, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub rows: CodeRows<T>,
    pub seqs: Vec<Sequence>,
    pub demographics: Tensor<T>,
    /// Visit-row index of each transition's current visit.
    pub current: Vec<usize>,
    pub next: Vec<usize>,
    /// Per-modality 0/1 codes of each transition's next visit.
    pub labels: Vec<Tensor<f64>>,
    pub gaps: Vec<f64>,
    /// Transitions of each patient, in patient order.
    pub transitions: Vec<usize>,
}

impl<T: Real> Batch<T> {
    /// Patients with fewer than two visits contribute nothing and are left out.
    pub fn new(patients: &[&PatientRecord], vocab_sizes: &[usize]) -> Self {
        let patients: Vec<&PatientRecord> = patients
            .iter()
            .copied()
            .filter(|p| p.visits.len() >= 2)
            .collect();
        let mut rows = CodeRows::new(vocab_sizes.len());
        let mut seqs = Vec::with_capacity(patients.len());
        let (mut current, mut next, mut gaps, mut transitions) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut labels: Vec<Vec<f64>> = vec![Vec::new(); vocab_sizes.len()];
        let demo_dim = patients.first().map_or(0, |p| p.demographics.len());
        let mut demo = Vec::with_capacity(patients.len() * demo_dim);
        for p in &patients {
            let offset = rows.push_patient(&p.visits);
            let steps = p.visits.len() - 1;
            seqs.push(Sequence { offset, steps });
            transitions.push(steps);
            demo.extend(p.demographics.iter().map(|&b| T::of(f64::from(b))));
            for i in 0..steps {
                current.push(offset + i);
                next.push(offset + i + 1);
                gaps.push(p.visits[i + 1].time - p.visits[i].time);
                push_multi_hot(&mut labels, &p.visits[i + 1], vocab_sizes);
            }
        }
        let n = current.len();
        Self {
            rows,
            seqs,
            demographics: Tensor::from_vec(patients.len(), demo_dim, demo),
            current,
            next,
            labels: labels
                .into_iter()
                .zip(vocab_sizes)
                .map(|(l, &s)| Tensor::from_vec(n, s, l))
                .collect(),
            gaps,
            transitions,
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.current.len()
    }

    pub fn num_patients(&self) -> usize {
        self.seqs.len()
    }
}

fn push_multi_hot(labels: &mut [Vec<f64>], visit: &Visit, vocab_sizes: &[usize]) {
    for ((l, codes), &size) in labels.iter_mut().zip(&visit.codes).zip(vocab_sizes) {
        let start = l.len();
        l.resize(start + size, 0.0);
        for &c in codes {
            l[start + c] = 1.0;
        }
    }
}

/// Random quantities of one forward pass.
#[derive(Debug, Clone)]
pub struct Draws<T> {
    pub gumbel: Vec<[T; 2]>,
    pub steps: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Real> Draws<T> {
    pub fn sample<R: Rng>(batch: &Batch<T>, d: usize, num_steps: usize, rng: &mut R) -> Self {
        let gumbel = gumbel_noise(batch.rows.num_codes(), rng);
        let n = batch.num_transitions();
        let steps = (0..n).map(|_| rng.random_range(1..=num_steps)).collect();
        let eps = Tensor::from_vec(n, d, standard_normal(n * d, rng));
        Self { gumbel, steps, eps }
    }

    /// Zero Gumbel noise, so the gate follows its logits.
    pub fn without_gumbel(mut self) -> Self {
        self.gumbel.iter_mut().for_each(|g| *g = [T::zero(); 2]);
        self
    }
}

/// Graph nodes of a teacher-forced pass.
pub struct Forward {
    pub terms: TransitionTerms,
    pub catalyst: CatalystOutput,
    pub visits: Var,
}

#[derive(Debug, Clone)]
pub struct EhrModel<T> {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore<T>,
    pub schedule: NoiseSchedule,
    /// Mean inter-visit gap of the training data, used as the interval
    /// prediction when interval estimation is disabled.
    pub mean_gap: f64,
    embed: TimeAwareEmbedding,
    catalyst: Catalyst,
    punet: PUNet,
    head: PredictionHead,
}

impl<T: Real> EhrModel<T> {
    /// Freshly initialised model; initialisation is a function of `seed` only.
    pub fn new(config: &ModelConfig, shape: &ModelShape, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if shape.vocab_sizes.is_empty() || shape.vocab_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "every modality needs a non-empty vocabulary".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let ab = config.ablations;
        let embed = TimeAwareEmbedding::new(
            &mut store,
            &shape.vocab_sizes,
            d,
            config.eta,
            !ab.disable_time_aware_embedding,
            &mut rng,
        );
        let catalyst = Catalyst::new(
            &mut store,
            d,
            shape.demographics_dim,
            !ab.disable_time_estimation,
            !ab.disable_demographics && shape.demographics_dim > 0,
            &mut rng,
        );
        let punet = PUNet::new(
            &mut store,
            &config.punet,
            d,
            !ab.disable_catalyst_attention,
            &mut rng,
        )?;
        let head = PredictionHead::new(&mut store, d, &shape.vocab_sizes, &mut rng);
        Ok(Self {
            config: config.clone(),
            shape: shape.clone(),
            store,
            schedule: NoiseSchedule::build(&config.schedule)?,
            mean_gap: 0.0,
            embed,
            catalyst,
            punet,
            head,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn num_modalities(&self) -> usize {
        self.shape.vocab_sizes.len()
    }

    pub fn estimates_interval(&self) -> bool {
        self.catalyst.estimates_interval()
    }

    pub fn batch(&self, patients: &[&PatientRecord]) -> Batch<T> {
        Batch::new(patients, &self.shape.vocab_sizes)
    }

    /// Visit embeddings of every visit row.
    pub fn embed(
        &self,
        g: &mut Graph<'_, T>,
        rows: &CodeRows<T>,
        gumbel: &[[T; 2]],
        opts: EmbedOptions,
    ) -> Var {
        self.embed.forward(g, rows, gumbel, opts).v
    }

    /// Noises each transition's current visit to its step and predicts the
    /// next clean visit with the catalyst as context.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch<T>,
        draws: &Draws<T>,
        opts: EmbedOptions,
    ) -> Forward {
        let v = self.embed(g, &batch.rows, &draws.gumbel, opts);
        let demo = g.input(batch.demographics.clone());
        let cat = self.catalyst.forward(g, v, &batch.seqs, demo);
        let cur = g.select_rows(v, batch.current.clone());
        let target = g.select_rows(v, batch.next.clone());
        let noised = self.noise(g, cur, &draws.steps, &draws.eps);
        let predicted = self.punet.forward(g, noised, cat.phi, &draws.steps);
        let probs = self.head.forward(g, predicted);
        Forward {
            terms: TransitionTerms {
                predicted,
                target,
                probs,
                labels: batch.labels.clone(),
                interval: cat.delta,
                gaps: batch.gaps.clone(),
            },
            catalyst: cat,
            visits: v,
        }
    }

    /// `sqrt(abar_s) v + sqrt(1 - abar_s) eps` row by row.
    pub fn noise(&self, g: &mut Graph<'_, T>, v: Var, steps: &[usize], eps: &Tensor<T>) -> Var {
        let scale = steps
            .iter()
            .map(|&s| T::of(self.schedule.alpha_bar(s).sqrt()))
            .collect();
        let mut shift = eps.clone();
        for (r, &s) in steps.iter().enumerate() {
            let c = T::of(self.schedule.one_minus_alpha_bar(s).sqrt());
            shift.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        g.row_affine(v, scale, &shift)
    }

    /// Clean next-visit estimate from already noised rows.
    pub fn denoise(&self, noised: &Tensor<T>, phi: &Tensor<T>, steps: &[usize]) -> Tensor<T> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(noised.clone());
        let p = g.input(phi.clone());
        let y = self.punet.forward(&mut g, x, p, steps);
        g.value(y).clone()
    }

    /// Catalyst rows and predicted intervals for the last visit of each
    /// history, without gradient tracking.
    pub fn encode_histories(&self, histories: &[(&[Visit], &[u8])]) -> History<T> {
        let mut g = Graph::new(&self.store, false);
        let mut rows = CodeRows::new(self.num_modalities());
        let mut seqs = Vec::with_capacity(histories.len());
        let mut demo = Vec::new();
        for (visits, d) in histories {
            let offset = rows.push_patient(visits);
            seqs.push(Sequence {
                offset,
                steps: visits.len(),
            });
            demo.extend(d.iter().map(|&b| T::of(f64::from(b))));
        }
        let gumbel = vec![[T::zero(); 2]; rows.num_codes()];
        let v = self.embed(&mut g, &rows, &gumbel, EmbedOptions::default());
        let dm = g.input(Tensor::from_vec(
            histories.len(),
            self.shape.demographics_dim,
            demo,
        ));
        let cat = self.catalyst.forward(&mut g, v, &seqs, dm);
        let mut last = Vec::with_capacity(seqs.len());
        let mut acc = 0;
        for s in &seqs {
            acc += s.steps;
            last.push(acc - 1);
        }
        let phi = g.select_rows(cat.phi, last.clone());
        let current = g.select_rows(v, seqs.iter().map(|s| s.offset + s.steps - 1).collect());
        let interval = match cat.delta {
            Some(dl) => {
                let dl = g.select_rows(dl, last);
                g.value(dl).data.iter().map(|x| x.as_f64()).collect()
            }
            None => vec![self.mean_gap; seqs.len()],
        };
        History {
            phi: g.value(phi).clone(),
            current: g.value(current).clone(),
            interval,
        }
    }

    /// Code probabilities of predicted visit embeddings.
    pub fn code_probabilities(&self, v: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(v.clone());
        self.head
            .forward(&mut g, x)
            .into_iter()
            .map(|p| g.value(p).clone())
            .collect()
    }
}

/// Summary of patient histories used for one generation step.
#[derive(Debug, Clone)]
pub struct History<T> {
    pub phi: Tensor<T>,
    /// Embedding of the most recent visit.
    pub current: Tensor<T>,
    /// Predicted gap to the next visit.
    pub interval: Vec<f64>,
}

/// Codes with probability above 0.5; a modality with none keeps its most
/// likely code.
pub fn decode_codes<T: Real>(probs: &[T]) -> Vec<usize> {
    let half = T::of(0.5);
    let codes: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] > half).collect();
    if !codes.is_empty() || probs.is_empty() {
        return codes;
    }
    let best = (0..probs.len())
        .max_by(|&a, &b| {
            probs[a]
                .partial_cmp(&probs[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
        .unwrap();
    vec![best]
}
