#![allow(dead_code)]

use std::collections::HashSet;

use ehrpd::data::{CodeVocabulary, Cohort, PatientRecord, Visit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cohort whose codes are independent coin flips with probability `p`.
/// Visits are one day apart and never empty.
pub fn random_cohort(patients: usize, visits: usize, vocab: &[usize], p: f64, seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocabularies: Vec<CodeVocabulary> = vocab
        .iter()
        .enumerate()
        .map(|(m, &n)| CodeVocabulary::indexed(format!("m{m}"), n))
        .collect();
    let patients = (0..patients)
        .map(|i| PatientRecord {
            patient_id: format!("p{i}"),
            demographics: vec![(i % 2) as u8, 1],
            visits: (0..visits)
                .map(|t| loop {
                    let codes: Vec<Vec<usize>> = vocab
                        .iter()
                        .map(|&n| (0..n).filter(|_| rng.random_bool(p)).collect())
                        .collect();
                    let v = Visit::new(t as f64, codes);
                    if !v.is_empty() {
                        break v;
                    }
                })
                .collect(),
            source_patient_id: None,
        })
        .collect();
    Cohort {
        name: format!("random-{seed}"),
        seed: Some(seed),
        vocabularies,
        demographics_dim: 2,
        patients,
    }
}

/// True when no two visits anywhere in the cohort carry the same codes.
pub fn visits_are_distinct(c: &Cohort) -> bool {
    let mut seen = HashSet::new();
    c.patients
        .iter()
        .flat_map(|p| &p.visits)
        .all(|v| seen.insert(v.codes.clone()))
}
