use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CodeVocabulary, Cohort, DataError, PatientRecord, Visit};

/// Sidecar header declaring modalities, vocabulary sizes and the
/// demographic width of a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortHeader {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub modalities: Vec<ModalityHeader>,
    pub demographics_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityHeader {
    pub name: String,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    patient_id: String,
    demographics: Vec<u8>,
    visits: Vec<VisitLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_patient_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitLine {
    time: f64,
    codes: BTreeMap<String, Vec<usize>>,
}

/// `cohort.jsonl` -> `cohort.header.json`.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("header.json")
}

impl CohortHeader {
    pub fn of(cohort: &Cohort) -> Self {
        Self {
            name: cohort.name.clone(),
            seed: cohort.seed,
            modalities: cohort
                .vocabularies
                .iter()
                .map(|v| ModalityHeader {
                    name: v.modality.clone(),
                    size: v.size(),
                    codes: (*v != CodeVocabulary::indexed(v.modality.clone(), v.size()))
                        .then(|| v.codes.clone()),
                })
                .collect(),
            demographics_dim: cohort.demographics_dim,
        }
    }

    pub fn vocabularies(&self) -> Result<Vec<CodeVocabulary>, DataError> {
        let mut names = HashSet::new();
        self.modalities
            .iter()
            .map(|m| {
                if m.name.is_empty() || !names.insert(m.name.as_str()) {
                    return Err(DataError::Header(format!(
                        "duplicate or empty modality name {:?}",
                        m.name
                    )));
                }
                if m.size == 0 {
                    return Err(DataError::Header(format!(
                        "modality {} has an empty vocabulary",
                        m.name
                    )));
                }
                match &m.codes {
                    None => Ok(CodeVocabulary::indexed(m.name.clone(), m.size)),
                    Some(codes) => {
                        if codes.len() != m.size {
                            return Err(DataError::Header(format!(
                                "modality {} declares size {} but lists {} codes",
                                m.name,
                                m.size,
                                codes.len()
                            )));
                        }
                        let unique: HashSet<&String> = codes.iter().collect();
                        if unique.len() != codes.len() {
                            return Err(DataError::Header(format!(
                                "modality {} repeats a code identifier",
                                m.name
                            )));
                        }
                        Ok(CodeVocabulary {
                            modality: m.name.clone(),
                            codes: codes.clone(),
                        })
                    }
                }
            })
            .collect()
    }
}

pub fn parse_header(text: &str) -> Result<CohortHeader, DataError> {
    let header: CohortHeader =
        serde_json::from_str(text).map_err(|e| DataError::Header(e.to_string()))?;
    if header.modalities.is_empty() {
        return Err(DataError::Header(
            "at least one modality is required".into(),
        ));
    }
    header.vocabularies()?;
    Ok(header)
}

/// Parses the JSON-lines body of a cohort file against its header. Blank
/// lines are ignored.
pub fn parse_cohort(header: &CohortHeader, text: &str) -> Result<Cohort, DataError> {
    let vocabularies = header.vocabularies()?;
    let index: BTreeMap<&str, usize> = vocabularies
        .iter()
        .enumerate()
        .map(|(n, v)| (v.modality.as_str(), n))
        .collect();
    let mut patients = Vec::new();
    let mut seen = HashSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: PatientLine = serde_json::from_str(raw).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        let schema = |message: String| DataError::Schema {
            line,
            patient_id: rec.patient_id.clone(),
            message,
        };
        let mut visits = Vec::with_capacity(rec.visits.len());
        for v in &rec.visits {
            let mut codes = vec![Vec::new(); vocabularies.len()];
            for (name, list) in &v.codes {
                let n = *index
                    .get(name.as_str())
                    .ok_or_else(|| schema(format!("unknown modality {name:?}")))?;
                codes[n] = list.clone();
            }
            visits.push(Visit::new(v.time, codes));
        }
        let patient = PatientRecord {
            patient_id: rec.patient_id.clone(),
            demographics: rec.demographics.clone(),
            visits,
            source_patient_id: rec.source_patient_id.clone(),
        };
        validate_patient(&patient, &vocabularies, header.demographics_dim, line)?;
        if !seen.insert(patient.patient_id.clone()) {
            return Err(schema("duplicate patient_id".into()));
        }
        patients.push(patient);
    }
    Ok(Cohort {
        name: header.name.clone(),
        seed: header.seed,
        vocabularies,
        demographics_dim: header.demographics_dim,
        patients,
    })
}

pub(super) fn validate_patient(
    p: &PatientRecord,
    vocabularies: &[CodeVocabulary],
    demographics_dim: usize,
    line: usize,
) -> Result<(), DataError> {
    let schema = |message: String| DataError::Schema {
        line,
        patient_id: p.patient_id.clone(),
        message,
    };
    if p.demographics.len() != demographics_dim {
        return Err(schema(format!(
            "demographics has length {}, expected {demographics_dim}",
            p.demographics.len()
        )));
    }
    if p.demographics.iter().any(|&b| b > 1) {
        return Err(schema("demographics must be 0/1".into()));
    }
    if p.visits.is_empty() {
        return Err(schema("patient has no visits".into()));
    }
    let mut prev = f64::NEG_INFINITY;
    for (i, v) in p.visits.iter().enumerate() {
        if !v.time.is_finite() || v.time < 0.0 {
            return Err(schema(format!(
                "visit {i}: time {} is not a non-negative number",
                v.time
            )));
        }
        if v.time < prev {
            return Err(schema(format!(
                "non-monotone times at visit {i} ({} after {prev})",
                v.time
            )));
        }
        prev = v.time;
        if v.codes.len() != vocabularies.len() {
            return Err(schema(format!(
                "visit {i}: expected {} modalities",
                vocabularies.len()
            )));
        }
        for (codes, vocab) in v.codes.iter().zip(vocabularies) {
            if codes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(schema(format!(
                    "visit {i}: codes of {} not sorted and unique",
                    vocab.modality
                )));
            }
            if let Some(&c) = codes.iter().find(|&&c| c >= vocab.size()) {
                return Err(schema(format!(
                    "visit {i}: unknown code {c} for modality {} of size {}",
                    vocab.modality,
                    vocab.size()
                )));
            }
        }
        if v.is_empty() {
            return Err(schema(format!("visit {i} has no codes in any modality")));
        }
    }
    Ok(())
}

/// Reads `path` and its sidecar header.
pub fn load_cohort(path: &Path) -> Result<Cohort, DataError> {
    let hp = header_path(path);
    let header_text =
        fs::read_to_string(&hp).map_err(|source| DataError::Io { path: hp, source })?;
    let header = parse_header(&header_text)?;
    let body = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cohort(&header, &body)
}

/// Serialises the body of a cohort file.
pub fn cohort_to_jsonl(cohort: &Cohort) -> String {
    let mut out = String::new();
    for p in &cohort.patients {
        let line = PatientLine {
            patient_id: p.patient_id.clone(),
            demographics: p.demographics.clone(),
            visits: p
                .visits
                .iter()
                .map(|v| VisitLine {
                    time: v.time,
                    codes: cohort
                        .vocabularies
                        .iter()
                        .zip(&v.codes)
                        .map(|(voc, c)| (voc.modality.clone(), c.clone()))
                        .collect(),
                })
                .collect(),
            source_patient_id: p.source_patient_id.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("patient line serialises"));
        out.push('\n');
    }
    out
}

/// Writes `path` plus the sidecar header next to it.
pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let hp = header_path(path);
    let header =
        serde_json::to_string_pretty(&CohortHeader::of(cohort)).expect("header serialises");
    fs::write(&hp, header + "\n").map_err(io_err(&hp))?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(cohort_to_jsonl(cohort).as_bytes())
        .map_err(io_err(path))?;
    Ok(())
}
