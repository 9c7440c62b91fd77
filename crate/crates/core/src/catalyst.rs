//! Conditioning vector `Phi = [h; TimeEncoder(delta_hat); MLP_d(D)]`.
//!
//! `h` is the hidden state of a single-layer LSTM over the visit embeddings
//! seen so far. The intensity `lambda = 1 - tanh(MLP_lambda(h))` is read out
//! into a strictly positive interval estimate `delta_hat = softplus(MLP_delta(lambda))`.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::nn::Dense;
use crate::real::Real;
use crate::time_embed::TimeEncoder;

/// Single-layer LSTM with PyTorch gate order `(i, f, g, o)` and zero
/// initial state.
#[derive(Debug, Clone)]
pub struct Lstm {
    ih: Dense,
    hh: Dense,
    d: usize,
}

/// A sequence to encode: visit rows `offset..offset + steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sequence {
    pub offset: usize,
    pub steps: usize,
}

impl Lstm {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, d: usize, rng: &mut R) -> Self {
        Self {
            ih: Dense::new(store, "catalyst.lstm.ih", d, 4 * d, true, rng),
            hh: Dense::new(store, "catalyst.lstm.hh", d, 4 * d, false, rng),
            d,
        }
    }

    /// One recurrence step for a batch of rows. `state` is `(h, c)` of the
    /// same rows, or `None` for the zero state.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> (Var, Var) {
        let d = self.d;
        let mut gates = self.ih.forward(g, x);
        if let Some((h, _)) = state {
            let rec = self.hh.forward(g, h);
            gates = g.add(gates, rec);
        }
        let i = g.slice_cols(gates, 0, d);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, d, d);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * d, d);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * d, d);
        let o = g.sigmoid(o);
        let mut c = g.mul(i, cand);
        if let Some((_, c_prev)) = state {
            let keep = g.mul(f, c_prev);
            c = g.add(c, keep);
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        (h, c)
    }

    /// Hidden states after each of the first `steps` visits of every
    /// sequence, stacked sequence by sequence. Sequences are advanced
    /// together one time step at a time.
    pub fn run<T: Real>(&self, g: &mut Graph<'_, T>, v: Var, seqs: &[Sequence]) -> Var {
        let max_steps = seqs.iter().map(|s| s.steps).max().unwrap_or(0);
        let mut outputs: Vec<Var> = Vec::with_capacity(max_steps);
        let mut active_at: Vec<Vec<usize>> = Vec::with_capacity(max_steps);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..max_steps {
            let active: Vec<usize> = (0..seqs.len()).filter(|&k| seqs[k].steps > t).collect();
            let x = g.select_rows(v, active.iter().map(|&k| seqs[k].offset + t).collect());
            let prev = state.map(|(h, c)| {
                let before = &active_at[t - 1];
                if before.len() == active.len() {
                    (h, c)
                } else {
                    let keep: Vec<usize> = active
                        .iter()
                        .map(|k| before.binary_search(k).expect("active sets shrink"))
                        .collect();
                    (g.select_rows(h, keep.clone()), g.select_rows(c, keep))
                }
            });
            let (h, c) = self.step(g, x, prev);
            outputs.push(h);
            active_at.push(active);
            state = Some((h, c));
        }
        if outputs.is_empty() {
            return g.input(Tensor::zeros(0, self.d));
        }
        let base: Vec<usize> = active_at
            .iter()
            .scan(0, |acc, a| {
                let b = *acc;
                *acc += a.len();
                Some(b)
            })
            .collect();
        let mut order = Vec::with_capacity(seqs.iter().map(|s| s.steps).sum());
        for (k, s) in seqs.iter().enumerate() {
            for t in 0..s.steps {
                order.push(base[t] + active_at[t].binary_search(&k).expect("sequence active"));
            }
        }
        let stacked = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_rows(outputs)
        };
        g.select_rows(stacked, order)
    }
}

#[derive(Debug, Clone)]
struct Intensity {
    mlp_lambda: Dense,
    mlp_delta: Dense,
    encoder: TimeEncoder,
}

#[derive(Debug, Clone)]
pub struct Catalyst {
    lstm: Lstm,
    intensity: Option<Intensity>,
    demographics: Option<Dense>,
    d: usize,
}

pub struct CatalystOutput {
    pub h: Var,
    /// Urgency `lambda`, when interval estimation is enabled.
    pub lambda: Option<Var>,
    /// Column of interval estimates.
    pub delta: Option<Var>,
    /// `[h; interval embedding; demographic embedding]`, width `3d`.
    pub phi: Var,
}

impl Catalyst {
    /// Disabled parts keep their segment of `Phi` at zero.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        demographics_dim: usize,
        estimate_interval: bool,
        use_demographics: bool,
        rng: &mut R,
    ) -> Self {
        let lstm = Lstm::new(store, d, rng);
        let intensity = estimate_interval.then(|| Intensity {
            mlp_lambda: Dense::new(store, "catalyst.mlp_lambda", d, d, true, rng),
            mlp_delta: Dense::new(store, "catalyst.mlp_delta", d, 1, true, rng),
            encoder: TimeEncoder::new(store, "catalyst.delta_embed", d, rng),
        });
        let demographics = use_demographics
            .then(|| Dense::new(store, "catalyst.mlp_d", demographics_dim, d, true, rng));
        Self {
            lstm,
            intensity,
            demographics,
            d,
        }
    }

    pub fn estimates_interval(&self) -> bool {
        self.intensity.is_some()
    }

    /// `(lambda, delta_hat)` for rows of hidden states.
    pub fn estimate_interval<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Option<(Var, Var)> {
        let it = self.intensity.as_ref()?;
        let pre = it.mlp_lambda.forward(g, h);
        let t = g.tanh(pre);
        let lambda = g.affine(t, -T::one(), T::one());
        let out = it.mlp_delta.forward(g, lambda);
        Some((lambda, g.softplus(out)))
    }

    pub fn embed_demographics<T: Real>(&self, g: &mut Graph<'_, T>, demo: Var) -> Option<Var> {
        self.demographics.map(|m| m.forward(g, demo))
    }

    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        delta: Option<Var>,
        demo_emb: Option<Var>,
    ) -> Var {
        let rows = g.value(h).rows;
        let mid = match (delta, &self.intensity) {
            (Some(dl), Some(it)) => it.encoder.forward(g, dl),
            _ => g.input(Tensor::zeros(rows, self.d)),
        };
        let dem = demo_emb.unwrap_or_else(|| g.input(Tensor::zeros(rows, self.d)));
        g.concat_cols(vec![h, mid, dem])
    }

    /// Catalyst rows for every step of every sequence. `demographics` has
    /// one row per sequence.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        v: Var,
        seqs: &[Sequence],
        demographics: Var,
    ) -> CatalystOutput {
        let h = self.lstm.run(g, v, seqs);
        let (lambda, delta) = match self.estimate_interval(g, h) {
            Some((l, dl)) => (Some(l), Some(dl)),
            None => (None, None),
        };
        let demo_emb = self.embed_demographics(g, demographics).map(|e| {
            let rows: Vec<usize> = seqs
                .iter()
                .enumerate()
                .flat_map(|(k, s)| std::iter::repeat_n(k, s.steps))
                .collect();
            g.select_rows(e, rows)
        });
        let phi = self.assemble(g, h, delta, demo_emb);
        CatalystOutput {
            h,
            lambda,
            delta,
            phi,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pddpm::standard_normal;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, standard_normal(rows * cols, &mut r))
    }

    #[test]
    fn zero_weights_keep_state_zero() {
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, 4, &mut rng());
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|w| *w = 0.0);
        }
        let mut g = Graph::new(&store, false);
        let v = g.input(Tensor::zeros(3, 4));
        let h = lstm.run(
            &mut g,
            v,
            &[Sequence {
                offset: 0,
                steps: 3,
            }],
        );
        assert!(g.value(h).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hidden_states_are_bounded_and_causal() {
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, 6, &mut rng());
        let mut a = random_rows(5, 6, 1);
        let mut g = Graph::new(&store, false);
        let va = g.input(a.clone());
        let ha = lstm.run(
            &mut g,
            va,
            &[Sequence {
                offset: 0,
                steps: 5,
            }],
        );
        let ha = g.value(ha).clone();
        assert!(ha.data.iter().all(|x| x.abs() < 1.0));
        a.row_mut(3).iter_mut().for_each(|x| *x += 1.0);
        let vb = g.input(a);
        let hb = lstm.run(
            &mut g,
            vb,
            &[Sequence {
                offset: 0,
                steps: 5,
            }],
        );
        let hb = g.value(hb);
        assert_eq!(&ha.data[..18], &hb.data[..18]);
        assert_ne!(ha.row(3), hb.row(3));
    }

    #[test]
    fn batched_run_matches_separate_runs() {
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, 4, &mut rng());
        let v = random_rows(9, 4, 2);
        let seqs = [
            Sequence {
                offset: 0,
                steps: 2,
            },
            Sequence {
                offset: 3,
                steps: 4,
            },
            Sequence {
                offset: 7,
                steps: 1,
            },
        ];
        let mut g = Graph::new(&store, false);
        let vv = g.input(v.clone());
        let all = lstm.run(&mut g, vv, &seqs);
        let all = g.value(all).clone();
        let mut row = 0;
        for s in seqs {
            let part = Tensor::from_vec(
                s.steps,
                4,
                v.data[s.offset * 4..(s.offset + s.steps) * 4].to_vec(),
            );
            let vp = g.input(part);
            let h = lstm.run(
                &mut g,
                vp,
                &[Sequence {
                    offset: 0,
                    steps: s.steps,
                }],
            );
            for t in 0..s.steps {
                assert_eq!(g.value(h).row(t), all.row(row));
                row += 1;
            }
        }
    }

    fn catalyst(d: usize, estimate: bool, demo: bool) -> (ParamStore<f64>, Catalyst) {
        let mut store = ParamStore::new();
        let c = Catalyst::new(&mut store, d, 3, estimate, demo, &mut rng());
        (store, c)
    }

    #[test]
    fn interval_readout() {
        let (mut store, c) = catalyst(4, true, true);
        let w = store.id("catalyst.mlp_delta.weight").unwrap();
        let b = store.id("catalyst.mlp_delta.bias").unwrap();
        store.get_mut(w).data.iter_mut().for_each(|x| *x = 0.0);
        store.get_mut(b).data[0] = 0.0;
        let mut g = Graph::new(&store, false);
        let h = g.input(random_rows(2, 4, 3));
        let (lambda, delta) = c.estimate_interval(&mut g, h).unwrap();
        assert!(g
            .value(delta)
            .data
            .iter()
            .all(|&x| (x - 2f64.ln()).abs() < 1e-15));
        assert!(g.value(lambda).data.iter().all(|&x| x > 0.0 && x < 2.0));
    }

    #[test]
    fn saturated_intensity_goes_to_zero() {
        let (mut store, c) = catalyst(2, true, false);
        let b = store.id("catalyst.mlp_lambda.bias").unwrap();
        store.get_mut(b).data.iter_mut().for_each(|x| *x = 50.0);
        let mut g = Graph::new(&store, false);
        let h = g.input(Tensor::zeros(1, 2));
        let (lambda, _) = c.estimate_interval(&mut g, h).unwrap();
        assert!(g.value(lambda).data.iter().all(|&x| x < 1e-12));
    }

    #[test]
    fn interval_is_positive_for_random_parameters() {
        for seed in 0..200 {
            let mut store = ParamStore::<f64>::new();
            let c = Catalyst::new(
                &mut store,
                8,
                1,
                true,
                false,
                &mut ChaCha8Rng::seed_from_u64(seed),
            );
            let mut g = Graph::new(&store, false);
            let h = g.input(random_rows(50, 8, seed));
            let (_, delta) = c.estimate_interval(&mut g, h).unwrap();
            assert!(g.value(delta).data.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn demographic_embedding_is_affine() {
        let (store, c) = catalyst(4, false, true);
        let mut g = Graph::new(&store, false);
        let d = g.input(Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0; 3],
        ]));
        let e = c.embed_demographics(&mut g, d).unwrap();
        let e = g.value(e);
        let bias = &store.get(store.id("catalyst.mlp_d.bias").unwrap()).data;
        assert_eq!(e.row(3), bias.as_slice());
        for (k, &b) in bias.iter().enumerate() {
            assert!((e.at(0, k) + e.at(1, k) - b - e.at(2, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_segments() {
        let (store, c) = catalyst(4, true, true);
        let mut g = Graph::new(&store, false);
        let v = g.input(random_rows(5, 4, 4));
        let demo = g.input(Tensor::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]));
        let seqs = [
            Sequence {
                offset: 0,
                steps: 2,
            },
            Sequence {
                offset: 2,
                steps: 3,
            },
        ];
        let out = c.forward(&mut g, v, &seqs, demo);
        let phi = g.value(out.phi).clone();
        assert_eq!((phi.rows, phi.cols), (5, 12));
        let h = g.value(out.h).clone();
        let dem = c.embed_demographics(&mut g, demo).unwrap();
        let dem = g.value(dem).clone();
        for r in 0..5 {
            assert_eq!(&phi.row(r)[..4], h.row(r));
            assert_eq!(&phi.row(r)[8..], dem.row(if r < 2 { 0 } else { 1 }));
        }
    }

    #[test]
    fn interval_only_moves_the_middle_segment() {
        let (store, c) = catalyst(4, true, true);
        let mut g = Graph::new(&store, false);
        let h = g.input(random_rows(1, 4, 5));
        let dm = g.input(random_rows(1, 4, 6));
        let d1 = g.input(Tensor::column(vec![0.5]));
        let d2 = g.input(Tensor::column(vec![3.0]));
        let a = c.assemble(&mut g, h, Some(d1), Some(dm));
        let b = c.assemble(&mut g, h, Some(d2), Some(dm));
        let (a, b) = (g.value(a), g.value(b));
        assert_eq!(&a.data[..4], &b.data[..4]);
        assert_eq!(&a.data[8..], &b.data[8..]);
        assert_ne!(&a.data[4..8], &b.data[4..8]);
    }

    #[test]
    fn disabled_segments_are_zero() {
        let (store, c) = catalyst(4, false, false);
        let mut g = Graph::new(&store, false);
        let v = g.input(random_rows(2, 4, 7));
        let demo = g.input(Tensor::zeros(1, 3));
        let out = c.forward(
            &mut g,
            v,
            &[Sequence {
                offset: 0,
                steps: 2,
            }],
            demo,
        );
        assert!(out.delta.is_none());
        let phi = g.value(out.phi);
        for r in 0..2 {
            assert!(phi.row(r)[4..].iter().all(|&x| x == 0.0));
        }
    }
}
