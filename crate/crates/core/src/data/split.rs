use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cohort, DataError};

/// Percentages of patients assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 75,
            val: 10,
            test: 15,
        }
    }
}

impl SplitRatios {
    /// Split sizes by largest remainder. Leftover patients go to the largest
    /// fractional parts, ties resolved train, then test, then val.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize), DataError> {
        let r = [self.train, self.val, self.test];
        if r.contains(&0) || r.iter().map(|&x| x as u64).sum::<u64>() != 100 {
            return Err(DataError::Ratio((self.train, self.val, self.test)));
        }
        let exact: Vec<u128> = r.iter().map(|&x| n as u128 * x as u128).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|&e| (e / 100) as usize).collect();
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 2, 1];
        order.sort_by(|&a, &b| (exact[b] % 100).cmp(&(exact[a] % 100)));
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[k] += 1;
            left -= 1;
        }
        Ok((sizes[0], sizes[1], sizes[2]))
    }
}

/// Patient-level partition into (train, val, test). Patients keep their
/// original relative order inside each part.
pub fn split_cohort(
    cohort: &Cohort,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Cohort, Cohort, Cohort), DataError> {
    let n = cohort.patients.len();
    let (a, b, _) = ratios.sizes(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: &[usize]| {
        let mut keep = range.to_vec();
        keep.sort_unstable();
        let mut c = cohort.empty_like();
        c.patients = keep
            .into_iter()
            .map(|i| cohort.patients[i].clone())
            .collect();
        c
    };
    Ok((part(&idx[..a]), part(&idx[a..a + b]), part(&idx[a + b..])))
}
