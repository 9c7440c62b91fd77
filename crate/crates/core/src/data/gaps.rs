use std::collections::HashMap;

use super::{PatientRecord, Visit};

/// Days since each present code last appeared for the same patient, laid
/// out like the visit codes: `gaps[i][n][k]` belongs to `visits[i].codes[n][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTimeGapTable {
    pub gaps: Vec<Vec<Vec<f64>>>,
}

impl CodeTimeGapTable {
    pub fn visit(&self, i: usize) -> &[Vec<f64>] {
        &self.gaps[i]
    }
}

/// A code's first appearance gets 0; later appearances get the time since
/// its most recent earlier appearance in the same modality.
pub fn compute_code_time_gaps(patient: &PatientRecord) -> CodeTimeGapTable {
    visit_code_time_gaps(&patient.visits)
}

/// [`compute_code_time_gaps`] over a bare visit sequence.
pub fn visit_code_time_gaps(visits: &[Visit]) -> CodeTimeGapTable {
    let mut last: HashMap<(usize, usize), f64> = HashMap::new();
    let gaps = visits
        .iter()
        .map(|v| {
            v.codes
                .iter()
                .enumerate()
                .map(|(n, codes)| {
                    codes
                        .iter()
                        .map(|&c| match last.insert((n, c), v.time) {
                            Some(prev) => v.time - prev,
                            None => 0.0,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    CodeTimeGapTable { gaps }
}
