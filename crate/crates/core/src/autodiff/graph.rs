use super::kernels;
use super::params::{Gradients, ParamStore, Pid};
use super::tensor::{add_into, axpy, dot, Tensor};
use crate::real::Real;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Square,
}

/// Geometry of a 1-D (transposed) convolution over `(channels, length)`
/// features flattened channel-major into one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub lin: usize,
    pub lout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output length of a strided convolution.
    pub fn conv_len(lin: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (lin + 2 * pad - kernel) / stride + 1
    }
}

/// A batch-norm running-statistics update produced by a training-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: Pid,
    pub running_var: Pid,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Linear {
        x: Var,
        w: Pid,
        b: Option<Pid>,
    },
    Gather {
        table: Pid,
        idx: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        seg: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Map {
        x: Var,
        f: Unary,
    },
    Affine {
        x: Var,
        a: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    RowAffine {
        x: Var,
        scale: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    GumbelGate {
        logits: Var,
        soft: Vec<T>,
        eta: T,
    },
    Blend {
        pi: Var,
        a: Var,
        b: Var,
    },
    Sinusoid {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Pid,
        b: Pid,
        geom: ConvGeom,
    },
    ConvT1d {
        x: Var,
        w: Pid,
        b: Pid,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Pid,
        beta: Pid,
        channels: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Pid, Pid)>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    OuterAttention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    MseRows {
        a: Var,
        b: Var,
    },
    Focal {
        p: Var,
        y: Tensor<T>,
        kappa: T,
        gamma: T,
    },
    SqErr {
        x: Var,
        target: Vec<T>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Probability clamp applied inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Reverse-mode tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] walks the tape in reverse and accumulates parameter
/// gradients.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    train: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `train` selects batch statistics in batch-norm layers.
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Copies a value onto the tape as a constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    pub fn linear(&mut self, x: Var, w: Pid, b: Option<Pid>) -> Var {
        let wt = self.params.get(w);
        let (rows, inp) = self.shape(x);
        assert_eq!(
            wt.cols,
            inp,
            "linear {}: weight expects {} inputs, got {inp}",
            self.params.entry(w).name,
            wt.cols
        );
        let out = wt.rows;
        let bias = b.map(|b| self.params.get(b).data.as_slice());
        let y = kernels::linear_forward(&self.value(x).data, rows, inp, &wt.data, bias, out);
        self.push(Tensor::from_vec(rows, out, y), Op::Linear { x, w, b })
    }

    pub fn gather(&mut self, table: Pid, idx: Vec<usize>) -> Var {
        let t = self.params.get(table);
        let mut y = Tensor::zeros(idx.len(), t.cols);
        for (k, &i) in idx.iter().enumerate() {
            y.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(y, Op::Gather { table, idx })
    }

    /// Sums rows of `x` into `n_seg` groups; empty groups are zero rows.
    pub fn segment_sum(&mut self, x: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.rows, seg.len());
        let mut y = Tensor::zeros(n_seg, xt.cols);
        for (k, &s) in seg.iter().enumerate() {
            add_into(y.row_mut(s), xt.row(k));
        }
        self.push(y, Op::SegmentSum { x, seg })
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xt = self.value(x);
        let mut y = Tensor::zeros(idx.len(), xt.cols);
        for (k, &i) in idx.iter().enumerate() {
            y.row_mut(k).copy_from_slice(xt.row(i));
        }
        self.push(y, Op::SelectRows { x, idx })
    }

    pub fn concat_rows(&mut self, xs: Vec<Var>) -> Var {
        let cols = self.shape(xs[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in &xs {
            let t = self.value(x);
            assert_eq!(t.cols, cols);
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(xs))
    }

    pub fn concat_cols(&mut self, xs: Vec<Var>) -> Var {
        let rows = self.shape(xs[0]).0;
        let cols: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut y = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &x in &xs {
            let t = self.value(x);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                y.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(y, Op::ConcatCols(xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xt = self.value(x);
        let mut y = Tensor::zeros(xt.rows, len);
        for r in 0..xt.rows {
            y.row_mut(r).copy_from_slice(&xt.row(r)[start..start + len]);
        }
        self.push(y, Op::SliceCols { x, start })
    }

    pub fn map(&mut self, x: Var, f: Unary) -> Var {
        let xt = self.value(x);
        let data = xt
            .data
            .iter()
            .map(|&v| match f {
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(T::zero()),
                Unary::Softplus => softplus(v),
                Unary::Square => v * v,
            })
            .collect();
        let y = Tensor::from_vec(xt.rows, xt.cols, data);
        self.push(y, Op::Map { x, f })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Unary::Relu)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Unary::Softplus)
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let xt = self.value(x);
        let data = xt.data.iter().map(|&v| a * v + b).collect();
        let y = Tensor::from_vec(xt.rows, xt.cols, data);
        self.push(y, Op::Affine { x, a })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(
            (at.rows, at.cols),
            (bt.rows, bt.cols),
            "elementwise shape mismatch"
        );
        let data = at
            .data
            .iter()
            .zip(&bt.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(at.rows, at.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]` (`s` is a column).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (xt, st) = (self.value(x), self.value(s));
        assert_eq!(st.cols, 1);
        assert_eq!(st.rows, xt.rows);
        let mut y = xt.clone();
        for r in 0..y.rows {
            let c = st.data[r];
            y.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        self.push(y, Op::ScaleRows { x, s })
    }

    /// `scale[r] * x[r] + shift[r]` with constant `scale` and `shift`.
    pub fn row_affine(&mut self, x: Var, scale: Vec<T>, shift: &Tensor<T>) -> Var {
        let xt = self.value(x);
        assert_eq!(scale.len(), xt.rows);
        assert_eq!((shift.rows, shift.cols), (xt.rows, xt.cols));
        let mut y = xt.clone();
        for (r, &c) in scale.iter().enumerate() {
            for (v, s) in y.row_mut(r).iter_mut().zip(shift.row(r)) {
                *v = c * *v + *s;
            }
        }
        self.push(y, Op::RowAffine { x, scale })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut y = xt.clone();
        for r in 0..y.rows {
            softmax_in_place(y.row_mut(r));
        }
        self.push(y, Op::Softmax { x })
    }

    /// Binary Gumbel-Softmax gate on two logits per row. The returned column
    /// holds the relaxed score of index 0, or its 0/1 threshold at 0.5 when
    /// `hard`; gradients always follow the relaxed score.
    pub fn gumbel_gate(&mut self, logits: Var, noise: &[[T; 2]], eta: T, hard: bool) -> Var {
        let lt = self.value(logits);
        assert_eq!(lt.cols, 2);
        assert_eq!(noise.len(), lt.rows);
        let soft: Vec<T> = (0..lt.rows)
            .map(|r| {
                let z = (lt.at(r, 0) - lt.at(r, 1) + noise[r][0] - noise[r][1]) / eta;
                sigmoid(z)
            })
            .collect();
        let out = soft
            .iter()
            .map(|&s| {
                if !hard {
                    s
                } else if s >= T::of(0.5) {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        let y = Tensor::column(out);
        self.push(y, Op::GumbelGate { logits, soft, eta })
    }

    /// `pi * a + (1 - pi) * b` with `pi` a column.
    pub fn blend(&mut self, pi: Var, a: Var, b: Var) -> Var {
        let (pt, at, bt) = (self.value(pi), self.value(a), self.value(b));
        assert_eq!(pt.cols, 1);
        let mut y = Tensor::zeros(at.rows, at.cols);
        for r in 0..at.rows {
            let p = pt.data[r];
            let q = T::one() - p;
            for ((v, &x), &z) in y.row_mut(r).iter_mut().zip(at.row(r)).zip(bt.row(r)) {
                *v = p * x + q * z;
            }
        }
        self.push(y, Op::Blend { pi, a, b })
    }

    /// Transformer sinusoidal encoding of a column of scalars into `width`
    /// features.
    pub fn sinusoid(&mut self, x: Var, width: usize) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.cols, 1);
        let mut y = Tensor::zeros(xt.rows, width);
        for r in 0..xt.rows {
            y.row_mut(r)
                .copy_from_slice(&sinusoid_row(xt.data[r], width));
        }
        self.push(y, Op::Sinusoid { x })
    }

    pub fn conv1d(&mut self, x: Var, w: Pid, b: Pid, geom: ConvGeom) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.cols, geom.cin * geom.lin, "conv1d input width");
        let wt = &self.params.get(w).data;
        let bt = &self.params.get(b).data;
        let mut y = Tensor::zeros(xt.rows, geom.cout * geom.lout);
        for r in 0..xt.rows {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for co in 0..geom.cout {
                let yc = &mut yr[co * geom.lout..(co + 1) * geom.lout];
                yc.fill(bt[co]);
                for ci in 0..geom.cin {
                    let xc = &xr[ci * geom.lin..(ci + 1) * geom.lin];
                    for kk in 0..geom.kernel {
                        let wv = wt[(co * geom.cin + ci) * geom.kernel + kk];
                        let (lo, hi, off) = tap_range(kk, geom.lout, geom.lin, geom);
                        for to in lo..hi {
                            yc[to] += wv * xc[to * geom.stride + kk - off];
                        }
                    }
                }
            }
        }
        self.push(y, Op::Conv1d { x, w, b, geom })
    }

    /// Transposed convolution; outputs beyond `geom.lout` are cropped.
    pub fn conv_transpose1d(&mut self, x: Var, w: Pid, b: Pid, geom: ConvGeom) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.cols, geom.cin * geom.lin, "deconv input width");
        let wt = &self.params.get(w).data;
        let bt = &self.params.get(b).data;
        let mut y = Tensor::zeros(xt.rows, geom.cout * geom.lout);
        for r in 0..xt.rows {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for co in 0..geom.cout {
                yr[co * geom.lout..(co + 1) * geom.lout]
                    .iter_mut()
                    .for_each(|v| *v = bt[co]);
            }
            for ci in 0..geom.cin {
                let xc = &xr[ci * geom.lin..(ci + 1) * geom.lin];
                for co in 0..geom.cout {
                    let yc = &mut yr[co * geom.lout..(co + 1) * geom.lout];
                    for kk in 0..geom.kernel {
                        let wv = wt[(ci * geom.cout + co) * geom.kernel + kk];
                        let (lo, hi, off) = tap_range(kk, geom.lin, geom.lout, geom);
                        for j in lo..hi {
                            yc[j * geom.stride + kk - off] += xc[j] * wv;
                        }
                    }
                }
            }
        }
        self.push(y, Op::ConvT1d { x, w, b, geom })
    }

    /// Per-channel normalisation of `(channels, length)` features. Training
    /// graphs normalise with statistics over all rows and positions and
    /// record a running-statistics update; inference graphs use the stored
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Pid,
        beta: Pid,
        running_mean: Pid,
        running_var: Pid,
        channels: usize,
        eps: f64,
    ) -> Var {
        let xt = self.value(x).clone();
        let len = xt.cols / channels;
        let eps = T::of(eps);
        let (mean, inv_std) = if self.train {
            let n = T::of((xt.rows * len) as f64);
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for r in 0..xt.rows {
                let xr = xt.row(r);
                for c in 0..channels {
                    mean[c] += xr[c * len..(c + 1) * len].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for r in 0..xt.rows {
                let xr = xt.row(r);
                for c in 0..channels {
                    var[c] += xr[c * len..(c + 1) * len]
                        .iter()
                        .map(|&v| (v - mean[c]) * (v - mean[c]))
                        .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            let total = xt.rows * len;
            let unbiased = if total > 1 {
                T::of(total as f64 / (total - 1) as f64)
            } else {
                T::one()
            };
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbiased).collect(),
            });
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            let mean = self.params.get(running_mean).data.clone();
            let inv = self
                .params
                .get(running_var)
                .data
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (mean, inv)
        };
        let g = &self.params.get(gamma).data;
        let b = &self.params.get(beta).data;
        let mut y = xt.clone();
        for r in 0..y.rows {
            let yr = y.row_mut(r);
            for c in 0..channels {
                for v in &mut yr[c * len..(c + 1) * len] {
                    *v = g[c] * (*v - mean[c]) * inv_std[c] + b[c];
                }
            }
        }
        let train = self.train;
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                mean,
                inv_std,
                train,
            },
        )
    }

    /// Row-wise layer normalisation with optional elementwise affine.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Pid, Pid)>, eps: f64) -> Var {
        let xt = self.value(x);
        let n = T::of(xt.cols as f64);
        let eps = T::of(eps);
        let mut y = xt.clone();
        let mut means = Vec::with_capacity(xt.rows);
        let mut invs = Vec::with_capacity(xt.rows);
        for r in 0..y.rows {
            let yr = y.row_mut(r);
            let mean = yr.iter().copied().sum::<T>() / n;
            let var = yr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in yr.iter_mut() {
                *v = (*v - mean) * inv;
            }
            if let Some((g, b)) = affine {
                let (g, b) = (&self.params.get(g).data, &self.params.get(b).data);
                for ((v, &gi), &bi) in yr.iter_mut().zip(g).zip(b) {
                    *v = *v * gi + bi;
                }
            }
            means.push(mean);
            invs.push(inv);
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                affine,
                mean: means,
                inv_std: invs,
            },
        )
    }

    /// Per row: `out[i] = sum_j softmax_j(scale * q[i] * k[j]) * v[j]`.
    pub fn outer_attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        assert_eq!((qt.rows, qt.cols), (kt.rows, kt.cols));
        assert_eq!((qt.rows, qt.cols), (vt.rows, vt.cols));
        let mut y = Tensor::zeros(qt.rows, qt.cols);
        for r in 0..qt.rows {
            kernels::outer_attention_forward(qt.row(r), kt.row(r), vt.row(r), scale, y.row_mut(r));
        }
        self.push(y, Op::OuterAttention { q, k, v, scale })
    }

    /// Same-size max pooling (window 3, stride 1) along the length axis of
    /// `(channels, length)` features.
    pub fn max_pool3(&mut self, x: Var, channels: usize) -> Var {
        let xt = self.value(x);
        let len = xt.cols / channels;
        let mut y = Tensor::zeros(xt.rows, xt.cols);
        let mut argmax = vec![0u32; xt.rows * xt.cols];
        for r in 0..xt.rows {
            let xr = xt.row(r);
            for c in 0..channels {
                for t in 0..len {
                    let lo = t.saturating_sub(1);
                    let hi = (t + 1).min(len - 1);
                    let mut best = c * len + lo;
                    for s in lo..=hi {
                        if xr[c * len + s] > xr[best] {
                            best = c * len + s;
                        }
                    }
                    y.data[r * xt.cols + c * len + t] = xr[best];
                    argmax[r * xt.cols + c * len + t] = best as u32;
                }
            }
        }
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// Column of per-row mean squared differences.
    pub fn mse_rows(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!((at.rows, at.cols), (bt.rows, bt.cols), "mse shape mismatch");
        let n = T::of(at.cols as f64);
        let out = (0..at.rows)
            .map(|r| {
                at.row(r)
                    .iter()
                    .zip(bt.row(r))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    / n
            })
            .collect();
        self.push(Tensor::column(out), Op::MseRows { a, b })
    }

    /// Column of per-row focal losses averaged over codes.
    pub fn focal_rows(&mut self, p: Var, y: Tensor<T>, kappa: T, gamma: T) -> Var {
        let pt = self.value(p);
        assert_eq!((pt.rows, pt.cols), (y.rows, y.cols));
        let n = T::of(pt.cols as f64);
        let out = (0..pt.rows)
            .map(|r| {
                pt.row(r)
                    .iter()
                    .zip(y.row(r))
                    .map(|(&p, &t)| focal_term(p, t, kappa, gamma).0)
                    .sum::<T>()
                    / n
            })
            .collect();
        self.push(Tensor::column(out), Op::Focal { p, y, kappa, gamma })
    }

    /// Column of `(x[r] - target[r])^2`.
    pub fn sq_err(&mut self, x: Var, target: Vec<T>) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.cols, 1);
        assert_eq!(xt.rows, target.len());
        let out = xt
            .data
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .collect();
        self.push(Tensor::column(out), Op::SqErr { x, target })
    }

    /// Scalar `sum_r w[r] * sum_c x[r][c]`.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Var {
        let xt = self.value(x);
        assert_eq!(w.len(), xt.rows);
        let s = (0..xt.rows)
            .map(|r| w[r] * xt.row(r).iter().copied().sum::<T>())
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut pg = Gradients::new(self.params.len());
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let xt = self.value(*x);
                    let wt = self.params.get(*w);
                    let needs_dx = !matches!(self.nodes[x.0].op, Op::Input);
                    let mut dx = needs_dx.then(|| take_or_zero(&mut grads, *x, xt.len()));
                    let mut db = b.map(|b| std::mem::take(pg.slot(b, self.params.get(b).len())));
                    {
                        let dw = pg.slot(*w, wt.len());
                        kernels::linear_backward(
                            &g,
                            &xt.data,
                            xt.rows,
                            xt.cols,
                            &wt.data,
                            wt.rows,
                            dx.as_deref_mut(),
                            dw,
                            db.as_deref_mut(),
                        );
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        *pg.slot(*b, 0) = db;
                    }
                    if let Some(dx) = dx {
                        grads[x.0] = Some(dx);
                    }
                }
                Op::Gather { table, idx } => {
                    let cols = y.cols;
                    let dt = pg.slot(*table, self.params.get(*table).len());
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(
                            &mut dt[row * cols..(row + 1) * cols],
                            &g[k * cols..(k + 1) * cols],
                        );
                    }
                }
                Op::SegmentSum { x, seg } => {
                    let cols = y.cols;
                    let dx = acc(&mut grads, *x, self.value(*x).len());
                    for (k, &s) in seg.iter().enumerate() {
                        add_into(
                            &mut dx[k * cols..(k + 1) * cols],
                            &g[s * cols..(s + 1) * cols],
                        );
                    }
                }
                Op::SelectRows { x, idx } => {
                    let cols = y.cols;
                    let dx = acc(&mut grads, *x, self.value(*x).len());
                    for (k, &s) in idx.iter().enumerate() {
                        add_into(
                            &mut dx[s * cols..(s + 1) * cols],
                            &g[k * cols..(k + 1) * cols],
                        );
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        add_into(acc(&mut grads, x, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let xc = self.value(x).cols;
                        let n = self.value(x).len();
                        let dx = acc(&mut grads, x, n);
                        for r in 0..y.rows {
                            add_into(
                                &mut dx[r * xc..(r + 1) * xc],
                                &g[r * y.cols + off..r * y.cols + off + xc],
                            );
                        }
                        off += xc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xc = self.value(*x).cols;
                    let n = self.value(*x).len();
                    let dx = acc(&mut grads, *x, n);
                    for r in 0..y.rows {
                        add_into(
                            &mut dx[r * xc + start..r * xc + start + y.cols],
                            &g[r * y.cols..(r + 1) * y.cols],
                        );
                    }
                }
                Op::Map { x, f } => {
                    let xt = self.value(*x);
                    let dx = acc(&mut grads, *x, xt.len());
                    for k in 0..g.len() {
                        let d = match f {
                            Unary::Sigmoid => y.data[k] * (T::one() - y.data[k]),
                            Unary::Tanh => T::one() - y.data[k] * y.data[k],
                            Unary::Relu => {
                                if xt.data[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Softplus => sigmoid(xt.data[k]),
                            Unary::Square => T::of(2.0) * xt.data[k],
                        };
                        dx[k] += g[k] * d;
                    }
                }
                Op::Affine { x, a } => {
                    let dx = acc(&mut grads, *x, g.len());
                    axpy(dx, *a, &g);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    axpy(acc(&mut grads, *b, g.len()), -T::one(), &g);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let da = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] * bt.data[k];
                    }
                    let db = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * at.data[k];
                    }
                }
                Op::ScaleRows { x, s } => {
                    let (xt, st) = (self.value(*x), self.value(*s));
                    let cols = xt.cols;
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..xt.rows {
                        axpy(
                            &mut dx[r * cols..(r + 1) * cols],
                            st.data[r],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                    let ds = acc(&mut grads, *s, st.len());
                    for r in 0..xt.rows {
                        ds[r] += dot(&g[r * cols..(r + 1) * cols], xt.row(r));
                    }
                }
                Op::RowAffine { x, scale } => {
                    let cols = y.cols;
                    let dx = acc(&mut grads, *x, g.len());
                    for r in 0..y.rows {
                        axpy(
                            &mut dx[r * cols..(r + 1) * cols],
                            scale[r],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::Softmax { x } => {
                    let cols = y.cols;
                    let dx = acc(&mut grads, *x, g.len());
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(gr, yr);
                        for c in 0..cols {
                            dx[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
                Op::GumbelGate { logits, soft, eta } => {
                    let dl = acc(&mut grads, *logits, soft.len() * 2);
                    for (r, &s) in soft.iter().enumerate() {
                        let d = g[r] * s * (T::one() - s) / *eta;
                        dl[2 * r] += d;
                        dl[2 * r + 1] -= d;
                    }
                }
                Op::Blend { pi, a, b } => {
                    let (pt, at, bt) = (self.value(*pi), self.value(*a), self.value(*b));
                    let cols = at.cols;
                    {
                        let dp = acc(&mut grads, *pi, pt.len());
                        for r in 0..at.rows {
                            let mut s = T::zero();
                            for c in 0..cols {
                                s += g[r * cols + c]
                                    * (at.data[r * cols + c] - bt.data[r * cols + c]);
                            }
                            dp[r] += s;
                        }
                    }
                    {
                        let da = acc(&mut grads, *a, at.len());
                        for r in 0..at.rows {
                            axpy(
                                &mut da[r * cols..(r + 1) * cols],
                                pt.data[r],
                                &g[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                    let db = acc(&mut grads, *b, bt.len());
                    for r in 0..at.rows {
                        axpy(
                            &mut db[r * cols..(r + 1) * cols],
                            T::one() - pt.data[r],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::Sinusoid { x } => {
                    let xt = self.value(*x);
                    let width = y.cols;
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..xt.rows {
                        let t = xt.data[r];
                        let mut s = T::zero();
                        for k in 0..width / 2 {
                            let w = sinusoid_freq::<T>(k, width);
                            let (sn, cs) = (t * w).sin_cos();
                            s += w * (g[r * width + 2 * k] * cs - g[r * width + 2 * k + 1] * sn);
                        }
                        dx[r] += s;
                    }
                }
                Op::Conv1d { x, w, b, geom } => {
                    let xt = self.value(*x);
                    let wt = &self.params.get(*w).data;
                    let geom = *geom;
                    {
                        let db = pg.slot(*b, geom.cout);
                        for r in 0..y.rows {
                            for co in 0..geom.cout {
                                db[co] += g[r * y.cols + co * geom.lout
                                    ..r * y.cols + (co + 1) * geom.lout]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                    }
                    {
                        let dw = pg.slot(*w, wt.len());
                        for r in 0..y.rows {
                            let xr = xt.row(r);
                            for co in 0..geom.cout {
                                let gc = &g[r * y.cols + co * geom.lout
                                    ..r * y.cols + (co + 1) * geom.lout];
                                for ci in 0..geom.cin {
                                    let xc = &xr[ci * geom.lin..(ci + 1) * geom.lin];
                                    for kk in 0..geom.kernel {
                                        let (lo, hi, off) =
                                            tap_range(kk, geom.lout, geom.lin, geom);
                                        let mut s = dw[(co * geom.cin + ci) * geom.kernel + kk];
                                        for to in lo..hi {
                                            s += gc[to] * xc[to * geom.stride + kk - off];
                                        }
                                        dw[(co * geom.cin + ci) * geom.kernel + kk] = s;
                                    }
                                }
                            }
                        }
                    }
                    if !matches!(self.nodes[x.0].op, Op::Input) {
                        let dx = acc(&mut grads, *x, xt.len());
                        for r in 0..y.rows {
                            for co in 0..geom.cout {
                                let gc = &g[r * y.cols + co * geom.lout
                                    ..r * y.cols + (co + 1) * geom.lout];
                                for ci in 0..geom.cin {
                                    let dc = &mut dx[r * xt.cols + ci * geom.lin
                                        ..r * xt.cols + (ci + 1) * geom.lin];
                                    for kk in 0..geom.kernel {
                                        let wv = wt[(co * geom.cin + ci) * geom.kernel + kk];
                                        let (lo, hi, off) =
                                            tap_range(kk, geom.lout, geom.lin, geom);
                                        for to in lo..hi {
                                            dc[to * geom.stride + kk - off] += gc[to] * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::ConvT1d { x, w, b, geom } => {
                    let xt = self.value(*x);
                    let wt = &self.params.get(*w).data;
                    let geom = *geom;
                    {
                        let db = pg.slot(*b, geom.cout);
                        for r in 0..y.rows {
                            for co in 0..geom.cout {
                                db[co] += g[r * y.cols + co * geom.lout
                                    ..r * y.cols + (co + 1) * geom.lout]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                    }
                    {
                        let dw = pg.slot(*w, wt.len());
                        for r in 0..y.rows {
                            let xr = xt.row(r);
                            for ci in 0..geom.cin {
                                let xc = &xr[ci * geom.lin..(ci + 1) * geom.lin];
                                for co in 0..geom.cout {
                                    let gc = &g[r * y.cols + co * geom.lout
                                        ..r * y.cols + (co + 1) * geom.lout];
                                    for kk in 0..geom.kernel {
                                        let (lo, hi, off) =
                                            tap_range(kk, geom.lin, geom.lout, geom);
                                        let mut s = dw[(ci * geom.cout + co) * geom.kernel + kk];
                                        for j in lo..hi {
                                            s += xc[j] * gc[j * geom.stride + kk - off];
                                        }
                                        dw[(ci * geom.cout + co) * geom.kernel + kk] = s;
                                    }
                                }
                            }
                        }
                    }
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..y.rows {
                        for ci in 0..geom.cin {
                            let dc = &mut dx
                                [r * xt.cols + ci * geom.lin..r * xt.cols + (ci + 1) * geom.lin];
                            for co in 0..geom.cout {
                                let gc = &g[r * y.cols + co * geom.lout
                                    ..r * y.cols + (co + 1) * geom.lout];
                                for kk in 0..geom.kernel {
                                    let wv = wt[(ci * geom.cout + co) * geom.kernel + kk];
                                    let (lo, hi, off) = tap_range(kk, geom.lin, geom.lout, geom);
                                    for j in lo..hi {
                                        dc[j] += gc[j * geom.stride + kk - off] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    channels,
                    mean,
                    inv_std,
                    train,
                } => {
                    let xt = self.value(*x);
                    let len = xt.cols / channels;
                    let gm = &self.params.get(*gamma).data;
                    let n = T::of((xt.rows * len) as f64);
                    let mut sum_g = vec![T::zero(); *channels];
                    let mut sum_gx = vec![T::zero(); *channels];
                    for r in 0..xt.rows {
                        for c in 0..*channels {
                            for t in 0..len {
                                let k = r * xt.cols + c * len + t;
                                let xh = (xt.data[k] - mean[c]) * inv_std[c];
                                sum_g[c] += g[k];
                                sum_gx[c] += g[k] * xh;
                            }
                        }
                    }
                    add_into(pg.slot(*gamma, *channels), &sum_gx);
                    add_into(pg.slot(*beta, *channels), &sum_g);
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..xt.rows {
                        for c in 0..*channels {
                            let s = gm[c] * inv_std[c];
                            for t in 0..len {
                                let k = r * xt.cols + c * len + t;
                                if *train {
                                    let xh = (xt.data[k] - mean[c]) * inv_std[c];
                                    dx[k] += s * (g[k] - sum_g[c] / n - xh * sum_gx[c] / n);
                                } else {
                                    dx[k] += s * g[k];
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    affine,
                    mean,
                    inv_std,
                } => {
                    let xt = self.value(*x);
                    let cols = xt.cols;
                    let n = T::of(cols as f64);
                    let mut dxh = vec![T::zero(); cols];
                    let mut dgam = affine.map(|_| vec![T::zero(); cols]);
                    let mut dbet = affine.map(|_| vec![T::zero(); cols]);
                    let mut dx_all = vec![T::zero(); xt.len()];
                    for r in 0..xt.rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = xt.row(r);
                        for c in 0..cols {
                            let xh = (xr[c] - mean[r]) * inv_std[r];
                            dxh[c] = match affine {
                                Some((gp, _)) => {
                                    let gam = self.params.get(*gp).data[c];
                                    if let (Some(dg), Some(db)) = (dgam.as_mut(), dbet.as_mut()) {
                                        dg[c] += gr[c] * xh;
                                        db[c] += gr[c];
                                    }
                                    gr[c] * gam
                                }
                                None => gr[c],
                            };
                        }
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = (0..cols)
                            .map(|c| dxh[c] * (xr[c] - mean[r]) * inv_std[r])
                            .sum();
                        for c in 0..cols {
                            let xh = (xr[c] - mean[r]) * inv_std[r];
                            dx_all[r * cols + c] = inv_std[r] * (dxh[c] - s1 / n - xh * s2 / n);
                        }
                    }
                    if let Some((gp, bp)) = affine {
                        add_into(pg.slot(*gp, cols), dgam.as_deref().unwrap_or(&[]));
                        add_into(pg.slot(*bp, cols), dbet.as_deref().unwrap_or(&[]));
                    }
                    add_into(acc(&mut grads, *x, xt.len()), &dx_all);
                }
                Op::OuterAttention { q, k, v, scale } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let cols = qt.cols;
                    let mut dq = take_or_zero(&mut grads, *q, qt.len());
                    let mut dk = take_or_zero(&mut grads, *k, kt.len());
                    let mut dv = take_or_zero(&mut grads, *v, vt.len());
                    for r in 0..qt.rows {
                        let s = r * cols..(r + 1) * cols;
                        kernels::outer_attention_backward(
                            qt.row(r),
                            kt.row(r),
                            vt.row(r),
                            y.row(r),
                            &g[s.clone()],
                            *scale,
                            &mut dq[s.clone()],
                            &mut dk[s.clone()],
                            &mut dv[s],
                        );
                    }
                    grads[q.0] = Some(dq);
                    grads[k.0] = Some(dk);
                    grads[v.0] = Some(dv);
                }
                Op::MaxPool { x, argmax } => {
                    let cols = y.cols;
                    let dx = acc(&mut grads, *x, g.len());
                    for (k, &src) in argmax.iter().enumerate() {
                        let r = k / cols;
                        dx[r * cols + src as usize] += g[k];
                    }
                }
                Op::MseRows { a, b } => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let cols = at.cols;
                    let two_over_n = T::of(2.0 / cols as f64);
                    let mut d = vec![T::zero(); at.len()];
                    for (r, &gr) in g[..at.rows].iter().enumerate() {
                        for c in 0..cols {
                            let k = r * cols + c;
                            d[k] = gr * two_over_n * (at.data[k] - bt.data[k]);
                        }
                    }
                    if !matches!(self.nodes[a.0].op, Op::Input) {
                        add_into(acc(&mut grads, *a, d.len()), &d);
                    }
                    if !matches!(self.nodes[b.0].op, Op::Input) {
                        axpy(acc(&mut grads, *b, d.len()), -T::one(), &d);
                    }
                }
                Op::Focal {
                    p,
                    y: target,
                    kappa,
                    gamma,
                } => {
                    let pt = self.value(*p);
                    let cols = pt.cols;
                    let inv_n = T::one() / T::of(cols as f64);
                    let dp = acc(&mut grads, *p, pt.len());
                    for (r, &gr) in g[..pt.rows].iter().enumerate() {
                        for c in 0..cols {
                            let k = r * cols + c;
                            let (_, d) = focal_term(pt.data[k], target.data[k], *kappa, *gamma);
                            dp[k] += gr * inv_n * d;
                        }
                    }
                }
                Op::SqErr { x, target } => {
                    let xt = self.value(*x);
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..xt.rows {
                        dx[r] += g[r] * T::of(2.0) * (xt.data[r] - target[r]);
                    }
                }
                Op::WeightedSum { x, w } => {
                    let xt = self.value(*x);
                    let cols = xt.cols;
                    let dx = acc(&mut grads, *x, xt.len());
                    for r in 0..xt.rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[0] * w[r];
                        }
                    }
                }
            }
        }
        pg
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], x: Var, len: usize) -> &mut Vec<T> {
    grads[x.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_or_zero<T: Real>(grads: &mut [Option<Vec<T>>], x: Var, len: usize) -> Vec<T> {
    grads[x.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

/// Positions `p` in `lo..hi` for which tap `kk` maps `p * stride + kk - pad`
/// inside `0..limit`. Indices are formed as `p * stride + kk - off` with
/// `off = pad`, which never underflows for `p >= lo`.
#[inline]
fn tap_range(kk: usize, count: usize, limit: usize, g: ConvGeom) -> (usize, usize, usize) {
    let lo = g.pad.saturating_sub(kk).div_ceil(g.stride);
    let hi = if limit + g.pad > kk {
        ((limit + g.pad - kk - 1) / g.stride + 1).min(count)
    } else {
        0
    };
    (lo, hi.max(lo), g.pad)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[inline]
fn sinusoid_freq<T: Real>(k: usize, width: usize) -> T {
    T::of(10000f64.powf(-(2.0 * k as f64) / width as f64))
}

/// `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with `w_k = 10000^(-2k/width)`.
pub fn sinusoid_row<T: Real>(t: T, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for k in 0..width / 2 {
        let (s, c) = (t * sinusoid_freq::<T>(k, width)).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

/// Focal term for one code and its derivative with respect to the
/// probability. Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`;
/// the derivative is zero where the clamp is active.
pub fn focal_term<T: Real>(p: T, y: T, kappa: T, gamma: T) -> (T, T) {
    if p.is_nan() {
        return (p, p);
    }
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let clamped = p < lo || p > hi;
    let p = p.max(lo).min(hi);
    let q = T::one() - p;
    let pow = |b: T, e: T| if e == T::zero() { T::one() } else { b.powf(e) };
    let dpow = |b: T, e: T| {
        if e == T::zero() {
            T::zero()
        } else {
            e * b.powf(e - T::one())
        }
    };
    let pos = kappa * pow(q, gamma);
    let neg = (T::one() - kappa) * pow(p, gamma);
    let f = -(y * pos * p.ln() + (T::one() - y) * neg * q.ln());
    if clamped {
        return (f, T::zero());
    }
    let dpos = -kappa * (-dpow(q, gamma) * p.ln() + pow(q, gamma) / p);
    let dneg = -(T::one() - kappa) * (dpow(p, gamma) * q.ln() - pow(p, gamma) / q);
    (f, y * dpos + (T::one() - y) * dneg)
}
