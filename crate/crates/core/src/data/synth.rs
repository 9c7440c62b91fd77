use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{CodeVocabulary, Cohort, DataError, PatientRecord, Visit};

/// Parameters of the oracle cohort.
///
/// Codes evolve as a sparse Markov process over the union of all
/// vocabularies: code `k` is present at the next visit with probability
/// `sigmoid((b_k + sum_{j present} M[j][k] + demographic effect) / temperature)`.
/// The gap to the next visit is exponential with rate
/// `base_hazard * exp(urgency_coupling * codes in the current visit)`, so
/// busier visits are followed sooner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCohortConfig {
    pub name: String,
    pub num_patients: usize,
    pub vocab_sizes: Vec<usize>,
    pub max_visits: usize,
    pub temperature: f64,
    pub base_hazard: f64,
    pub urgency_coupling: f64,
    pub demographics_dim: usize,
    /// Outgoing transitions per code.
    pub fan_out: usize,
    pub seed: u64,
}

impl Default for SyntheticCohortConfig {
    fn default() -> Self {
        Self {
            name: "oracle".into(),
            num_patients: 200,
            vocab_sizes: vec![20, 20],
            max_visits: 10,
            temperature: 1.0,
            base_hazard: 0.1,
            urgency_coupling: 0.3,
            demographics_dim: 4,
            fan_out: 2,
            seed: 1,
        }
    }
}

impl SyntheticCohortConfig {
    pub fn num_modalities(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.into()));
        if self.vocab_sizes.is_empty() || self.vocab_sizes.contains(&0) {
            return bad("every modality needs a non-empty vocabulary");
        }
        if self.max_visits < 2 {
            return bad("max_visits must be at least 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.base_hazard > 0.0 && self.base_hazard.is_finite()) {
            return bad("base_hazard must be positive");
        }
        if !self.urgency_coupling.is_finite() {
            return bad("urgency_coupling must be finite");
        }
        Ok(())
    }
}

/// Fixed ground-truth dynamics shared by all patients of one cohort.
struct Dynamics {
    offsets: Vec<usize>,
    bias: Vec<f64>,
    /// `successors[j]` lists `(k, weight)` pairs of the transition matrix.
    successors: Vec<Vec<(usize, f64)>>,
    demographic: Vec<Vec<f64>>,
}

impl Dynamics {
    fn new(cfg: &SyntheticCohortConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut offsets = vec![0];
        for &s in &cfg.vocab_sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let total = *offsets.last().unwrap();
        let jitter = Normal::new(0.0, 0.5).unwrap();
        let bias = (0..total).map(|_| -3.0 + jitter.sample(rng)).collect();
        let successors = (0..total)
            .map(|_| {
                (0..cfg.fan_out)
                    .map(|_| (rng.random_range(0..total), rng.random_range(2.5..4.5)))
                    .collect()
            })
            .collect();
        let demographic = (0..cfg.demographics_dim)
            .map(|_| (0..total).map(|_| jitter.sample(rng)).collect())
            .collect();
        Self {
            offsets,
            bias,
            successors,
            demographic,
        }
    }

    fn sample_visit(
        &self,
        prev: Option<&[usize]>,
        demo: &[u8],
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<usize>> {
        let mut logit = self.bias.clone();
        for (q, &on) in demo.iter().enumerate() {
            if on == 1 {
                logit
                    .iter_mut()
                    .zip(&self.demographic[q])
                    .for_each(|(l, w)| *l += w);
            }
        }
        if let Some(prev) = prev {
            for &j in prev {
                for &(k, w) in &self.successors[j] {
                    logit[k] += w;
                }
            }
        }
        let prob: Vec<f64> = logit
            .iter()
            .map(|&l| 1.0 / (1.0 + (-l / temperature).exp()))
            .collect();
        let draws: Vec<f64> = (0..prob.len()).map(|_| rng.random::<f64>()).collect();
        self.offsets
            .windows(2)
            .map(|w| {
                let mut codes: Vec<usize> = (w[0]..w[1])
                    .filter(|&k| draws[k] < prob[k])
                    .map(|k| k - w[0])
                    .collect();
                if codes.is_empty() {
                    // Keep every modality observed: fall back to the most likely code.
                    let best = (w[0]..w[1])
                        .max_by(|&a, &b| prob[a].total_cmp(&prob[b]).then(b.cmp(&a)))
                        .unwrap();
                    codes.push(best - w[0]);
                }
                codes
            })
            .collect()
    }

    fn flatten(&self, codes: &[Vec<usize>]) -> Vec<usize> {
        codes
            .iter()
            .zip(&self.offsets)
            .flat_map(|(c, &o)| c.iter().map(move |&k| k + o))
            .collect()
    }
}

/// Seeded oracle cohort. Each patient draws from its own ChaCha stream, so a
/// patient's record does not depend on how many others are generated.
pub fn generate_synthetic_cohort(cfg: &SyntheticCohortConfig) -> Result<Cohort, DataError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dynamics = Dynamics::new(cfg, &mut master);
    let patients = (0..cfg.num_patients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let demographics: Vec<u8> = (0..cfg.demographics_dim)
                .map(|_| u8::from(rng.random_bool(0.3)))
                .collect();
            let n_visits = rng.random_range(2..=cfg.max_visits);
            let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
            let mut time = 0.0;
            for v in 0..n_visits {
                let prev = visits.last().map(|p: &Visit| dynamics.flatten(&p.codes));
                if v > 0 {
                    let count = prev.as_ref().map_or(0, Vec::len) as f64;
                    let rate = cfg.base_hazard * (cfg.urgency_coupling * count).exp();
                    time += Exp::new(rate).expect("positive rate").sample(&mut rng);
                }
                let codes = dynamics.sample_visit(
                    prev.as_deref(),
                    &demographics,
                    cfg.temperature,
                    &mut rng,
                );
                visits.push(Visit::new(time, codes));
            }
            PatientRecord {
                patient_id: format!("P{i:05}"),
                demographics,
                visits,
                source_patient_id: None,
            }
        })
        .collect();
    Ok(Cohort {
        name: cfg.name.clone(),
        seed: Some(cfg.seed),
        vocabularies: cfg
            .vocab_sizes
            .iter()
            .enumerate()
            .map(|(n, &s)| CodeVocabulary::indexed(format!("m{n}"), s))
            .collect(),
        demographics_dim: cfg.demographics_dim,
        patients,
    })
}
