//! Time-aware visit embedding.
//!
//! Every present code starts from its base embedding `e`. Its time gap is
//! encoded as `tau`, and a binary Gumbel gate decides whether the code uses
//! the time-modified embedding `MLP_c([e; tau])` or `e` unchanged. Codes are
//! summed per modality into `z_n = ReLU(MLP_z^n(sum c))`. An attention over
//! modalities then mixes these into the visit vector `v`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{sinusoid_row, Graph, ParamStore, Pid, Tensor, Var};
use crate::data::{visit_code_time_gaps, Visit};
use crate::model::ModelError;
use crate::nn::Dense;
use crate::real::Real;

/// Raw sinusoidal encoding of a time value:
/// `PE[2k] = sin(t / 10000^(2k/d))`, `PE[2k+1] = cos(t / 10000^(2k/d))`.
pub fn positional_time_embedding(t: f64, d: usize) -> Result<Vec<f64>, ModelError> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(ModelError::OddWidth(d));
    }
    Ok(sinusoid_row(t, d))
}

/// Sinusoidal encoding refined by `dense -> sigmoid -> dense`, all width `d`.
#[derive(Debug, Clone)]
pub struct TimeEncoder {
    l1: Dense,
    l2: Dense,
    width: usize,
}

impl TimeEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Dense::new(store, &format!("{name}.l1"), d, d, true, rng),
            l2: Dense::new(store, &format!("{name}.l2"), d, d, true, rng),
            width: d,
        }
    }

    /// Encodes a column of time values into rows of width `d`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, t: Var) -> Var {
        let pe = g.sinusoid(t, self.width);
        let h = self.l1.forward(g, pe);
        let h = g.sigmoid(h);
        self.l2.forward(g, h)
    }
}

/// Present codes of a batch of visits, flattened per modality.
#[derive(Debug, Clone, Default)]
pub struct CodeRows<T> {
    pub num_visits: usize,
    /// Per modality: code index, owning visit row and time gap of each code.
    pub modalities: Vec<ModalityRows<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ModalityRows<T> {
    pub code: Vec<usize>,
    pub visit: Vec<usize>,
    pub tau: Vec<T>,
}

impl<T: Real> CodeRows<T> {
    pub fn new(num_modalities: usize) -> Self {
        Self {
            num_visits: 0,
            modalities: (0..num_modalities)
                .map(|_| ModalityRows::default())
                .collect(),
        }
    }

    /// Appends one patient's visits as consecutive visit rows and returns the
    /// row of its first visit.
    pub fn push_patient(&mut self, visits: &[Visit]) -> usize {
        let first = self.num_visits;
        let gaps = visit_code_time_gaps(visits);
        for (i, v) in visits.iter().enumerate() {
            for (n, codes) in v.codes.iter().enumerate() {
                let m = &mut self.modalities[n];
                for (k, &c) in codes.iter().enumerate() {
                    m.code.push(c);
                    m.visit.push(first + i);
                    m.tau.push(T::of(gaps.gaps[i][n][k]));
                }
            }
        }
        self.num_visits += visits.len();
        first
    }

    pub fn num_codes(&self) -> usize {
        self.modalities.iter().map(|m| m.code.len()).sum()
    }
}

/// Gumbel(0, 1) noise pairs, one per code row.
pub fn gumbel_noise<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[T; 2]> {
    let mut draw = || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        T::of(-(-u.ln()).ln())
    };
    (0..n).map(|_| [draw(), draw()]).collect()
}

#[derive(Debug, Clone)]
struct TimeAware {
    tau: TimeEncoder,
    gate: Dense,
    mlp_c: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    /// Threshold the gate in the forward pass (straight-through) instead of
    /// using the relaxed score.
    pub hard_gate: bool,
    /// Replace this modality's summary by the empty-modality summary.
    pub mask: Option<usize>,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            hard_gate: true,
            mask: None,
        }
    }
}

pub struct VisitEmbedding {
    /// One row per visit.
    pub v: Var,
    /// Modality attention weights, one row per visit.
    pub psi: Var,
    pub z: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TimeAwareEmbedding {
    tables: Vec<Pid>,
    time: Option<TimeAware>,
    mlp_z: Vec<Dense>,
    mlp_psi: Dense,
    d: usize,
    eta: f64,
}

impl TimeAwareEmbedding {
    /// With `time_aware == false` each code contributes its base embedding
    /// directly and no gate or time encoder is created.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        vocab_sizes: &[usize],
        d: usize,
        eta: f64,
        time_aware: bool,
        rng: &mut R,
    ) -> Self {
        let tables = vocab_sizes
            .iter()
            .enumerate()
            .map(|(n, &size)| {
                let data = (0..size * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::of(z)
                    })
                    .collect();
                store.insert(
                    format!("embed.codes.{n}"),
                    Tensor::from_vec(size, d, data),
                    true,
                )
            })
            .collect();
        let time = time_aware.then(|| TimeAware {
            tau: TimeEncoder::new(store, "embed.tau", d, rng),
            gate: Dense::new(store, "embed.gate", 2 * d, 2, true, rng),
            mlp_c: Dense::new(store, "embed.mlp_c", 2 * d, d, true, rng),
        });
        let mlp_z = (0..vocab_sizes.len())
            .map(|n| Dense::new(store, &format!("embed.mlp_z.{n}"), d, d, true, rng))
            .collect();
        let n = vocab_sizes.len();
        let mlp_psi = Dense::new(store, "embed.mlp_psi", n * d, n, true, rng);
        Self {
            tables,
            time,
            mlp_z,
            mlp_psi,
            d,
            eta,
        }
    }

    pub fn is_time_aware(&self) -> bool {
        self.time.is_some()
    }

    /// Embeds every visit of `rows`. `noise` holds one Gumbel pair per code
    /// row in modality-major order and is ignored without the time-aware
    /// branch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        rows: &CodeRows<T>,
        noise: &[[T; 2]],
        opts: EmbedOptions,
    ) -> VisitEmbedding {
        let n_mod = self.tables.len();
        let nv = rows.num_visits;
        let parts: Vec<Var> = self
            .tables
            .iter()
            .zip(&rows.modalities)
            .map(|(&t, m)| g.gather(t, m.code.clone()))
            .collect();
        let e = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(parts)
        };
        let c = match &self.time {
            None => e,
            Some(ta) => {
                let taus: Vec<T> = rows
                    .modalities
                    .iter()
                    .flat_map(|m| m.tau.iter().copied())
                    .collect();
                let tau_in = g.input(Tensor::column(taus));
                let tau = ta.tau.forward(g, tau_in);
                let cat = g.concat_cols(vec![e, tau]);
                let logits = ta.gate.forward(g, cat);
                let pi = g.gumbel_gate(logits, noise, T::of(self.eta), opts.hard_gate);
                let modified = ta.mlp_c.forward(g, cat);
                g.blend(pi, modified, e)
            }
        };
        let seg: Vec<usize> = rows
            .modalities
            .iter()
            .enumerate()
            .flat_map(|(n, m)| m.visit.iter().map(move |&r| n * nv + r))
            .collect();
        let sums = g.segment_sum(c, seg, n_mod * nv);
        let z: Vec<Var> = (0..n_mod)
            .map(|n| {
                let input = if opts.mask == Some(n) {
                    g.input(Tensor::zeros(nv, self.d))
                } else {
                    g.select_rows(sums, (n * nv..(n + 1) * nv).collect())
                };
                let h = self.mlp_z[n].forward(g, input);
                g.relu(h)
            })
            .collect();
        let zc = if n_mod == 1 {
            z[0]
        } else {
            g.concat_cols(z.clone())
        };
        let logits = self.mlp_psi.forward(g, zc);
        let psi = g.softmax(logits);
        let mut v = None;
        for (n, &zn) in z.iter().enumerate() {
            let w = g.slice_cols(psi, n, 1);
            let term = g.scale_rows(zn, w);
            v = Some(match v {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        VisitEmbedding {
            v: v.expect("at least one modality"),
            psi,
            z,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn raw_encoding_values() {
        let pe = positional_time_embedding(0.0, 6).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = positional_time_embedding(1.0, 4).unwrap();
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        for t in [0.3, 17.0, 1234.5] {
            assert!(positional_time_embedding(t, 32)
                .unwrap()
                .iter()
                .all(|x| x.abs() <= 1.0));
        }
        assert!(matches!(
            positional_time_embedding(1.0, 5),
            Err(ModelError::OddWidth(5))
        ));
    }

    fn gate_probs(logits: [f64; 2]) -> [f64; 2] {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_vec(1, 2, logits.to_vec()));
        let p = g.softmax(x);
        let v = g.value(p);
        [v.data[0], v.data[1]]
    }

    #[test]
    fn gate_probability_examples() {
        assert_eq!(gate_probs([0.0, 0.0]), [0.5, 0.5]);
        let p = gate_probs([3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = gate_probs([40.0, -40.0]);
        assert!(p[1] > 0.0);
    }

    fn gate(p: [f64; 2], eta: f64, noise: Vec<[f64; 2]>) -> Vec<f64> {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let rows: Vec<Vec<f64>> = noise.iter().map(|_| vec![p[0].ln(), p[1].ln()]).collect();
        let x = g.input(Tensor::from_rows(&rows));
        let pi = g.gumbel_gate(x, &noise, eta, true);
        g.value(pi).data.clone()
    }

    #[test]
    fn cold_gate_follows_the_larger_probability() {
        assert_eq!(gate([0.9, 0.1], 1e-6, vec![[0.0, 0.0]]), vec![1.0]);
        assert_eq!(gate([0.1, 0.9], 1e-6, vec![[0.0, 0.0]]), vec![0.0]);
    }

    #[test]
    fn gumbel_gate_frequency_matches_probability() {
        let mut r = rng();
        let noise = gumbel_noise(10_000, &mut r);
        let pi = gate([0.7, 0.3], 1.0, noise);
        assert!(pi.iter().all(|&x| x == 0.0 || x == 1.0));
        let mean = pi.iter().sum::<f64>() / pi.len() as f64;
        assert!((mean - 0.7).abs() < 0.03, "mean {mean}");
    }

    fn visits() -> Vec<Visit> {
        vec![
            Visit::new(0.0, vec![vec![0, 2], vec![1]]),
            Visit::new(4.0, vec![vec![2], vec![]]),
            Visit::new(9.5, vec![vec![1, 2, 3], vec![0, 1]]),
        ]
    }

    fn embedding(time_aware: bool) -> (ParamStore<f64>, TimeAwareEmbedding) {
        let mut store = ParamStore::new();
        let e = TimeAwareEmbedding::new(&mut store, &[4, 2], 8, 1.0, time_aware, &mut rng());
        (store, e)
    }

    #[test]
    fn code_rows_carry_gaps() {
        let mut rows = CodeRows::<f64>::new(2);
        assert_eq!(rows.push_patient(&visits()), 0);
        assert_eq!(rows.push_patient(&visits()[..1]), 3);
        assert_eq!(rows.num_visits, 4);
        assert_eq!(rows.modalities[0].code, vec![0, 2, 2, 1, 2, 3, 0, 2]);
        assert_eq!(rows.modalities[0].visit, vec![0, 0, 1, 2, 2, 2, 3, 3]);
        assert_eq!(
            rows.modalities[0].tau,
            vec![0.0, 0.0, 4.0, 0.0, 5.5, 0.0, 0.0, 0.0]
        );
        assert_eq!(rows.modalities[1].tau, vec![0.0, 0.0, 9.5, 0.0]);
    }

    /// `ReLU(MLP_z^n(x))` evaluated by hand.
    fn manual_z(store: &ParamStore<f64>, n: usize, summed: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        let zw = store.get(store.id(&format!("embed.mlp_z.{n}.weight")).unwrap());
        let zb = &store
            .get(store.id(&format!("embed.mlp_z.{n}.bias")).unwrap())
            .data;
        let x = summed(n);
        (0..zw.rows)
            .map(|k| ((0..zw.cols).map(|j| zw.at(k, j) * x[j]).sum::<f64>() + zb[k]).max(0.0))
            .collect()
    }

    #[test]
    fn closed_gate_keeps_base_embedding() {
        let (mut store, e) = embedding(true);
        let gb = store.id("embed.gate.bias").unwrap();
        store.get_mut(gb).data.copy_from_slice(&[-1e3, 1e3]);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits()[..1]);
        let noise = vec![[0.0; 2]; rows.num_codes()];
        let mut g = Graph::new(&store, false);
        let out = e.forward(&mut g, &rows, &noise, EmbedOptions::default());
        let table = store.get(store.id("embed.codes.0").unwrap());
        let expect = manual_z(&store, 0, |_| {
            (0..8).map(|k| table.at(0, k) + table.at(2, k)).collect()
        });
        for (a, b) in g.value(out.z[0]).data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn open_gate_uses_time_branch() {
        let (mut store, e) = embedding(true);
        let gb = store.id("embed.gate.bias").unwrap();
        store.get_mut(gb).data.copy_from_slice(&[1e3, -1e3]);
        let c = store.id("embed.mlp_c.weight").unwrap();
        store.get_mut(c).data.iter_mut().for_each(|w| *w = 0.0);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits()[..1]);
        let noise = vec![[0.0; 2]; rows.num_codes()];
        let mut g = Graph::new(&store, false);
        let out = e.forward(&mut g, &rows, &noise, EmbedOptions::default());
        // Every code equals the MLP_c bias, so modality 0 sums two copies of it.
        let bias = store
            .get(store.id("embed.mlp_c.bias").unwrap())
            .data
            .clone();
        let expect = manual_z(&store, 0, |_| bias.iter().map(|b| 2.0 * b).collect());
        for (a, b) in g.value(out.z[0]).data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn summaries_and_attention_are_well_formed() {
        let (store, e) = embedding(true);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits());
        let noise = gumbel_noise(rows.num_codes(), &mut rng());
        let mut g = Graph::new(&store, true);
        let out = e.forward(&mut g, &rows, &noise, EmbedOptions::default());
        let psi = g.value(out.psi);
        for r in 0..psi.rows {
            assert!((psi.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(psi.row(r).iter().all(|&p| p >= 0.0));
        }
        let z: Vec<&Tensor<f64>> = out.z.iter().map(|&z| g.value(z)).collect();
        assert!(z.iter().all(|t| t.data.iter().all(|&x| x >= 0.0)));
        let v = g.value(out.v);
        for r in 0..v.rows {
            for k in 0..8 {
                let (lo, hi) = (
                    z[0].at(r, k).min(z[1].at(r, k)),
                    z[0].at(r, k).max(z[1].at(r, k)),
                );
                assert!(v.at(r, k) >= lo - 1e-12 && v.at(r, k) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn empty_modality_uses_bias_path() {
        let (store, e) = embedding(false);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits()[1..2]);
        let mut g = Graph::new(&store, false);
        let out = e.forward(&mut g, &rows, &[], EmbedOptions::default());
        let b = &store.get(store.id("embed.mlp_z.1.bias").unwrap()).data;
        let expect: Vec<f64> = b.iter().map(|x| x.max(0.0)).collect();
        assert_eq!(g.value(out.z[1]).data, expect);
    }

    #[test]
    fn masking_matches_an_empty_modality() {
        let (store, e) = embedding(true);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits());
        let noise = vec![[0.0; 2]; rows.num_codes()];
        let mut g = Graph::new(&store, false);
        let out = e.forward(
            &mut g,
            &rows,
            &noise,
            EmbedOptions {
                hard_gate: true,
                mask: Some(0),
            },
        );
        let b = &store.get(store.id("embed.mlp_z.0.bias").unwrap()).data;
        for r in 0..3 {
            let expect: Vec<f64> = b.iter().map(|x| x.max(0.0)).collect();
            assert_eq!(g.value(out.z[0]).row(r), expect.as_slice());
        }
    }

    #[test]
    fn single_modality_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let e = TimeAwareEmbedding::new(&mut store, &[3], 4, 1.0, true, &mut rng());
        let mut rows = CodeRows::new(1);
        rows.push_patient(&[Visit::new(0.0, vec![vec![1]])]);
        let mut g = Graph::new(&store, false);
        let out = e.forward(&mut g, &rows, &[[0.0; 2]], EmbedOptions::default());
        assert_eq!(g.value(out.psi).data, vec![1.0]);
        assert_eq!(g.value(out.v), g.value(out.z[0]));
    }

    #[test]
    fn fixed_noise_is_deterministic() {
        let (store, e) = embedding(true);
        let mut rows = CodeRows::new(2);
        rows.push_patient(&visits());
        let noise = vec![[0.0; 2]; rows.num_codes()];
        let run = || {
            let mut g = Graph::new(&store, false);
            let out = e.forward(&mut g, &rows, &noise, EmbedOptions::default());
            g.value(out.v).clone()
        };
        assert_eq!(run(), run());
    }
}
