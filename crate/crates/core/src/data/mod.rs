//! Multimodal longitudinal EHR records: the in-memory model, JSON-lines
//! ingestion, per-code time gaps, patient-level splitting and a seeded
//! synthetic cohort generator with known dynamics.

mod gaps;
mod io;
mod split;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaps::{compute_code_time_gaps, visit_code_time_gaps, CodeTimeGapTable};
pub use io::{
    cohort_to_jsonl, header_path, load_cohort, parse_cohort, parse_header, write_cohort,
    CohortHeader, ModalityHeader,
};
pub use split::{split_cohort, SplitRatios};
pub use synth::{generate_synthetic_cohort, SyntheticCohortConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, patient {patient_id}: {message}")]
    Schema {
        line: usize,
        patient_id: String,
        message: String,
    },
    #[error("code index {index} out of range for modality {modality} of size {size}")]
    CodeOutOfRange {
        modality: String,
        index: usize,
        size: usize,
    },
    #[error("split ratios must be positive and sum to 100, got {0:?}")]
    Ratio((u32, u32, u32)),
    #[error("invalid synthetic cohort config: {0}")]
    Config(String),
}

/// Ordered code identifiers of one modality. Code indices used throughout
/// the crate are positions in `codes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeVocabulary {
    pub modality: String,
    pub codes: Vec<String>,
}

impl CodeVocabulary {
    /// Vocabulary whose identifiers are the decimal indices `0..size`.
    pub fn indexed(modality: impl Into<String>, size: usize) -> Self {
        Self {
            modality: modality.into(),
            codes: (0..size).map(|i| i.to_string()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.codes.len()
    }
}

/// One encounter. `codes[n]` holds the sorted, de-duplicated code indices
/// of modality `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub time: f64,
    pub codes: Vec<Vec<usize>>,
}

impl Visit {
    pub fn new(time: f64, mut codes: Vec<Vec<usize>>) -> Self {
        for c in &mut codes {
            c.sort_unstable();
            c.dedup();
        }
        Self { time, codes }
    }

    pub fn num_codes(&self) -> usize {
        self.codes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_codes() == 0
    }

    /// Multi-hot vectors, one per modality.
    pub fn multi_hot(&self, vocabularies: &[CodeVocabulary]) -> Result<Vec<Vec<u8>>, DataError> {
        self.codes
            .iter()
            .zip(vocabularies)
            .map(|(c, v)| binarize_visit(c, v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Multi-hot demographic indicators, same length for every patient.
    pub demographics: Vec<u8>,
    pub visits: Vec<Visit>,
    /// Real patient a synthetic record was generated from.
    pub source_patient_id: Option<String>,
}

impl PatientRecord {
    /// Inter-visit gaps `T[i+1] - T[i]`.
    pub fn gaps(&self) -> Vec<f64> {
        self.visits
            .windows(2)
            .map(|w| w[1].time - w[0].time)
            .collect()
    }

    pub fn num_transitions(&self) -> usize {
        self.visits.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub seed: Option<u64>,
    pub vocabularies: Vec<CodeVocabulary>,
    pub demographics_dim: usize,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn empty_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            seed: self.seed,
            vocabularies: self.vocabularies.clone(),
            demographics_dim: self.demographics_dim,
            patients: Vec::new(),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.vocabularies.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.vocabularies.iter().map(CodeVocabulary::size).collect()
    }

    pub fn num_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.patients
            .iter()
            .map(PatientRecord::num_transitions)
            .sum()
    }

    /// Checks every invariant enforced at load time.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for (k, p) in self.patients.iter().enumerate() {
            io::validate_patient(p, &self.vocabularies, self.demographics_dim, k + 1)?;
            if !seen.insert(p.patient_id.as_str()) {
                return Err(DataError::Schema {
                    line: k + 1,
                    patient_id: p.patient_id.clone(),
                    message: "duplicate patient_id".into(),
                });
            }
        }
        Ok(())
    }
}

/// 0/1 indicator vector of `codes` over `vocab`.
pub fn binarize_visit(codes: &[usize], vocab: &CodeVocabulary) -> Result<Vec<u8>, DataError> {
    let mut y = vec![0u8; vocab.size()];
    for &c in codes {
        if c >= y.len() {
            return Err(DataError::CodeOutOfRange {
                modality: vocab.modality.clone(),
                index: c,
                size: y.len(),
            });
        }
        y[c] = 1;
    }
    Ok(y)
}
