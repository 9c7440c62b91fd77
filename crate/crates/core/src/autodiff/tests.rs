use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central-difference check of every parameter gradient of `build`.
fn check<F>(store: &mut ParamStore<f64>, build: F)
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let (loss, grads) = {
        let mut g = Graph::new(store, true);
        let l = build(&mut g);
        (g.value(l).item(), g.backward(l))
    };
    assert!(loss.is_finite());
    let h = 1e-6;
    let ids: Vec<Pid> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + h;
            let up = {
                let mut g = Graph::new(store, true);
                let l = build(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data[k] = orig - h;
            let dn = {
                let mut g = Graph::new(store, true);
                let l = build(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data[k] = orig;
            let num = (up - dn) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g[k]);
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(
                err < 1e-5 || (num - ana).abs() < 1e-8,
                "{}[{k}]: analytic {ana} vs numeric {num}",
                store.entry(id).name
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

/// Reduces any node to a scalar through a random fixed projection so every
/// output coordinate contributes a distinct weight.
fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Var {
    let t = g.value(x).clone();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w: Tensor<f64> = Tensor::from_vec(
        t.rows,
        t.cols,
        (0..t.len()).map(|_| r.random_range(-1.0..1.0)).collect(),
    );
    let wv = g.input(w);
    let m = g.mul(x, wv);
    let ones = vec![1.0; t.rows];
    g.weighted_sum(m, ones)
}

#[test]
fn linear_and_unaries() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 3, 5, &mut r);
    let w = s.uniform("w", 4, 5, 0.5, &mut r);
    let b = s.uniform("b", 1, 4, 0.5, &mut r);
    check(&mut s, |g| {
        let xv = g.gather(x, vec![0, 1, 2]);
        let y = g.linear(xv, w, Some(b));
        let a = g.sigmoid(y);
        let t = g.tanh(y);
        let sp = g.softplus(y);
        let sq = g.map(a, Unary::Square);
        let z = g.add(a, t);
        let z = g.sub(z, sp);
        let z = g.mul(z, sq);
        let z = g.affine(z, 1.7, 0.3);
        project(g, z, 1)
    });
}

#[test]
fn relu_softmax_select_concat() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 4, 3, &mut r);
    check(&mut s, |g| {
        let xv = g.gather(x, vec![0, 1, 2, 3]);
        let rl = g.relu(xv);
        let sm = g.softmax(xv);
        let c = g.concat_cols(vec![rl, sm]);
        let sel = g.select_rows(c, vec![3, 0, 0, 2]);
        let cr = g.concat_rows(vec![sel, c]);
        let sl = g.slice_cols(cr, 1, 4);
        let seg = g.segment_sum(sl, vec![0, 1, 1, 3, 3, 3, 0, 2], 5);
        project(g, seg, 2)
    });
}

#[test]
fn gate_blend_scale_sinusoid() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let l = s.normal("l", 5, 2, &mut r);
    let a = s.normal("a", 5, 4, &mut r);
    let b = s.normal("b", 5, 4, &mut r);
    let t = s.uniform("t", 5, 1, 3.0, &mut r);
    let noise: Vec<[f64; 2]> = (0..5).map(|i| [0.1 * i as f64, -0.2]).collect();
    check(&mut s, |g| {
        let lv = g.gather(l, (0..5).collect());
        let pi = g.gumbel_gate(lv, &noise, 0.7, false);
        let av = g.gather(a, (0..5).collect());
        let bv = g.gather(b, (0..5).collect());
        let bl = g.blend(pi, av, bv);
        let tv = g.gather(t, (0..5).collect());
        let sn = g.sinusoid(tv, 4);
        let sc = g.scale_rows(sn, pi);
        let z = g.add(bl, sc);
        let shift = Tensor::from_vec(5, 4, vec![0.25; 20]);
        let z = g.row_affine(z, vec![0.5, 1.0, 1.5, 2.0, 2.5], &shift);
        project(g, z, 3)
    });
}

#[test]
fn straight_through_gate_is_hard_forward_soft_backward() {
    let mut s = ParamStore::<f64>::new();
    let l = s.insert("l", Tensor::from_vec(2, 2, vec![2.0, 0.0, -1.0, 0.5]), true);
    let noise = vec![[0.0, 0.0]; 2];
    let mut g = Graph::new(&s, true);
    let lv = g.gather(l, vec![0, 1]);
    let hard = g.gumbel_gate(lv, &noise, 1.0, true);
    assert_eq!(g.value(hard).data, vec![1.0, 0.0]);
    let loss = g.weighted_sum(hard, vec![1.0, 1.0]);
    let grads = g.backward(loss);
    let d = grads.get(l).unwrap();
    let s0 = sigmoid(2.0f64);
    assert!((d[0] - s0 * (1.0 - s0)).abs() < 1e-12);
    assert!((d[1] + s0 * (1.0 - s0)).abs() < 1e-12);
}

#[test]
fn convolutions_and_norms() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let (c, len) = (2usize, 6usize);
    let x = s.normal("x", 3, c * len, &mut r);
    let w = s.uniform("w", c, c * 3, 0.5, &mut r);
    let b = s.uniform("b", 1, c, 0.5, &mut r);
    let wd = s.uniform("wd", c, c * 3, 0.5, &mut r);
    let bd = s.uniform("bd", 1, c, 0.5, &mut r);
    let wt = s.uniform("wt", c, c * 4, 0.5, &mut r);
    let bt = s.uniform("bt", 1, c, 0.5, &mut r);
    let gam = s.uniform("gam", 1, c, 1.0, &mut r);
    let bet = s.uniform("bet", 1, c, 1.0, &mut r);
    let rm = s.constant("rm", 1, c, 0.0, false);
    let rv = s.constant("rv", 1, c, 1.0, false);
    let lg = s.uniform("lg", 1, c * len, 1.0, &mut r);
    let lb = s.uniform("lb", 1, c * len, 1.0, &mut r);
    check(&mut s, |g| {
        let xv = g.gather(x, vec![0, 1, 2]);
        let same = ConvGeom {
            cin: c,
            cout: c,
            lin: len,
            lout: len,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let y = g.conv1d(xv, w, b, same);
        let y = g.batch_norm(y, gam, bet, rm, rv, c, 1e-5);
        let half = ConvGeom::conv_len(len, 3, 2, 1);
        let down = ConvGeom {
            lout: half,
            stride: 2,
            ..same
        };
        let d = g.conv1d(y, wd, bd, down);
        let up = ConvGeom {
            lin: half,
            lout: len,
            kernel: 4,
            stride: 2,
            ..same
        };
        let u = g.conv_transpose1d(d, wt, bt, up);
        let z = g.add(u, y);
        let z = g.layer_norm(z, Some((lg, lb)), 1e-5);
        let z = g.max_pool3(z, c);
        project(g, z, 4)
    });
}

#[test]
fn odd_length_deconv_crops() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 2, 3, &mut r);
    let wt = s.uniform("wt", 1, 4, 0.5, &mut r);
    let bt = s.uniform("bt", 1, 1, 0.5, &mut r);
    check(&mut s, |g| {
        let xv = g.gather(x, vec![0, 1]);
        let geom = ConvGeom {
            cin: 1,
            cout: 1,
            lin: 3,
            lout: 5,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let u = g.conv_transpose1d(xv, wt, bt, geom);
        project(g, u, 5)
    });
}

#[test]
fn eval_mode_batch_norm_uses_running_stats() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 2, 4, &mut r);
    let gam = s.uniform("gam", 1, 2, 1.0, &mut r);
    let bet = s.uniform("bet", 1, 2, 1.0, &mut r);
    let rm = s.insert("rm", Tensor::from_vec(1, 2, vec![0.3, -0.1]), false);
    let rv = s.insert("rv", Tensor::from_vec(1, 2, vec![1.7, 0.4]), false);
    let build = |g: &mut Graph<'_, f64>| {
        let xv = g.gather(x, vec![0, 1]);
        let y = g.batch_norm(xv, gam, bet, rm, rv, 2, 1e-5);
        project(g, y, 6)
    };
    // Eval-mode gradient check.
    let grads = {
        let mut g = Graph::new(&s, false);
        let l = build(&mut g);
        g.backward(l)
    };
    let h = 1e-6;
    for k in 0..s.get(x).len() {
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s, false);
            let l = build(&mut g);
            g.value(l).item()
        };
        let o = s.get(x).data[k];
        s.get_mut(x).data[k] = o + h;
        let up = eval(&s);
        s.get_mut(x).data[k] = o - h;
        let dn = eval(&s);
        s.get_mut(x).data[k] = o;
        let num = (up - dn) / (2.0 * h);
        assert!((num - grads.get(x).unwrap()[k]).abs() < 1e-7);
    }
}

#[test]
fn batch_norm_modes_agree_when_statistics_match() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 3, 8, &mut r);
    let gam = s.uniform("gam", 1, 2, 1.0, &mut r);
    let bet = s.uniform("bet", 1, 2, 1.0, &mut r);
    let rm = s.constant("rm", 1, 2, 0.0, false);
    let rv = s.constant("rv", 1, 2, 1.0, false);
    let (train_out, upd) = {
        let mut g = Graph::new(&s, true);
        let xv = g.gather(x, vec![0, 1, 2]);
        let y = g.batch_norm(xv, gam, bet, rm, rv, 2, 1e-5);
        (g.value(y).clone(), g.take_bn_updates())
    };
    // Force the running statistics to the (biased) batch statistics.
    let n = 12.0;
    s.get_mut(rm).data = upd[0].mean.clone();
    s.get_mut(rv).data = upd[0].var.iter().map(|v| v * (n - 1.0) / n).collect();
    let mut g = Graph::new(&s, false);
    let xv = g.gather(x, vec![0, 1, 2]);
    let y = g.batch_norm(xv, gam, bet, rm, rv, 2, 1e-5);
    for (a, b) in g.value(y).data.iter().zip(&train_out.data) {
        let (a, b): (f64, f64) = (*a, *b);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_mse_focal_sqerr() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let q = s.normal("q", 2, 7, &mut r);
    let k = s.normal("k", 2, 7, &mut r);
    let v = s.normal("v", 2, 7, &mut r);
    let t = s.normal("t", 2, 7, &mut r);
    let lg = s.normal("lg", 2, 3, &mut r);
    let y = Tensor::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    check(&mut s, |g| {
        let (qv, kv, vv, tv) = (
            g.gather(q, vec![0, 1]),
            g.gather(k, vec![0, 1]),
            g.gather(v, vec![0, 1]),
            g.gather(t, vec![0, 1]),
        );
        let att = g.outer_attention(qv, kv, vv, 0.8);
        let mse = g.mse_rows(att, tv);
        let lv = g.gather(lg, vec![0, 1]);
        let p = g.sigmoid(lv);
        let fl = g.focal_rows(p, y.clone(), 0.75, 2.0);
        let sl = g.slice_cols(att, 0, 1);
        let se = g.sq_err(sl, vec![0.3, -0.4]);
        let z = g.add(mse, fl);
        let z = g.add(z, se);
        g.weighted_sum(z, vec![0.6, 1.3])
    });
}

#[test]
fn attention_rows_are_stochastic() {
    let mut r = rng();
    let q: Vec<f64> = (0..50).map(|_| r.random_range(-5.0..5.0)).collect();
    let k: Vec<f64> = (0..50).map(|_| r.random_range(-5.0..5.0)).collect();
    for row in attention_rows(&q, &k, 0.5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&a| a >= 0.0));
    }
}

#[test]
fn sinusoid_values() {
    let pe = sinusoid_row(1.0f64, 4);
    assert_eq!(
        pe,
        vec![1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()]
    );
}
