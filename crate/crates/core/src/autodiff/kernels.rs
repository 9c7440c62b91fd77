//! Dense inner loops shared by the tape. Parallel variants only split work
//! along independent outputs, so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::dot;
use crate::real::Real;

const PAR_MIN_WORK: usize = 1 << 16;

fn parallel(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

/// `y = x W^T + b` with `x: rows x inp`, `W: out x inp`.
pub(crate) fn linear_forward<T: Real>(
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    b: Option<&[T]>,
    out: usize,
) -> Vec<T> {
    if rows < TILE_COLS {
        let mut y = vec![T::zero(); rows * out];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            let bias = b.map_or(T::zero(), |b| b[o]);
            for r in 0..rows {
                y[r * out + o] = dot(&x[r * inp..(r + 1) * inp], wo) + bias;
            }
        }
        return y;
    }
    if rows >= out {
        let wt = transpose(w, out, inp);
        let mut y = match b {
            Some(b) => b.repeat(rows),
            None => vec![T::zero(); rows * out],
        };
        matmul_acc(
            &mut y,
            out,
            Strided {
                data: x,
                row: inp,
                col: 1,
            },
            inp,
            &wt,
        );
        return y;
    }
    // Few rows: compute `y^T = W x^T` so the weight is read in place.
    let xt = transpose(x, rows, inp);
    let mut yt = vec![T::zero(); out * rows];
    if let Some(b) = b {
        for (o, chunk) in yt.chunks_mut(rows.max(1)).enumerate() {
            chunk.fill(b[o]);
        }
    }
    matmul_acc(
        &mut yt,
        rows,
        Strided {
            data: w,
            row: inp,
            col: 1,
        },
        inp,
        &xt,
    );
    transpose(&yt, out, rows)
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (c, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// Accumulates `dx += g W`, `dW += g^T x`, `db += sum_r g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    g: &[T],
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    out: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        matmul_acc(
            dx,
            inp,
            Strided {
                data: g,
                row: out,
                col: 1,
            },
            out,
            w,
        );
    }
    matmul_acc(
        dw,
        inp,
        Strided {
            data: g,
            row: 1,
            col: out,
        },
        rows,
        x,
    );
    if let Some(db) = db {
        for r in 0..rows {
            for o in 0..out {
                db[o] += g[r * out + o];
            }
        }
    }
}

/// Read-only matrix addressed as `data[i * row + p * col]`.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a, T> {
    pub data: &'a [T],
    pub row: usize,
    pub col: usize,
}

const TILE_ROWS: usize = 6;
const TILE_COLS: usize = 16;

/// `c += a b` with `c: m x n` (m implied by `c.len()`), `a: m x k` and
/// `b: k x n` row-major. Every entry of `c` accumulates over `p` in order,
/// and threads only split rows of `c`.
pub(crate) fn matmul_acc<T: Real>(c: &mut [T], n: usize, a: Strided<'_, T>, k: usize, b: &[T]) {
    if n == 0 || c.is_empty() {
        return;
    }
    debug_assert_eq!(b.len(), k * n);
    let m = c.len() / n;
    let threads = if parallel(m * n * k) {
        rayon::current_num_threads()
    } else {
        1
    };
    let chunk_rows = m.div_ceil(threads).div_ceil(TILE_ROWS) * TILE_ROWS;
    let body = |(blk, cb): (usize, &mut [T])| matmul_block(cb, n, a, blk * chunk_rows, k, b);
    if threads > 1 {
        c.par_chunks_mut(chunk_rows * n).enumerate().for_each(body);
    } else {
        body((0, c));
    }
}

fn matmul_block<T: Real>(c: &mut [T], n: usize, a: Strided<'_, T>, i0: usize, k: usize, b: &[T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { matmul_block_avx2(c, n, a, i0, k, b) };
    }
    matmul_block_lanes(c, n, a, i0, k, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_block_avx2<T: Real>(
    c: &mut [T],
    n: usize,
    a: Strided<'_, T>,
    i0: usize,
    k: usize,
    b: &[T],
) {
    matmul_block_lanes(c, n, a, i0, k, b)
}

#[inline(always)]
fn matmul_block_lanes<T: Real>(
    c: &mut [T],
    n: usize,
    a: Strided<'_, T>,
    i0: usize,
    k: usize,
    b: &[T],
) {
    let rows = c.len() / n;
    let at = |i: usize, p: usize| a.data[(i0 + i) * a.row + p * a.col];
    let full = n - n % TILE_COLS;
    let tiled = rows - rows % TILE_ROWS;
    let packed: Vec<[T; TILE_ROWS]> = (0..tiled)
        .step_by(TILE_ROWS)
        .flat_map(|t0| (0..k).map(move |p| std::array::from_fn(|i| at(t0 + i, p))))
        .collect();
    for j0 in (0..full).step_by(TILE_COLS) {
        for (t, pack) in packed
            .chunks_exact(k.max(1))
            .enumerate()
            .take(tiled / TILE_ROWS)
        {
            let t0 = t * TILE_ROWS;
            let acc0: [[T; TILE_COLS]; TILE_ROWS] =
                std::array::from_fn(|i| std::array::from_fn(|l| c[(t0 + i) * n + j0 + l]));
            let mut acc = acc0;
            for (ap, brow) in pack.iter().zip(b.chunks_exact(n)) {
                let bp: &[T; TILE_COLS] = brow[j0..j0 + TILE_COLS].try_into().unwrap();
                for (ai, &av) in acc.iter_mut().zip(ap) {
                    for l in 0..TILE_COLS {
                        ai[l] += av * bp[l];
                    }
                }
            }
            for i in 0..TILE_ROWS {
                for l in 0..TILE_COLS {
                    c[(t0 + i) * n + j0 + l] = acc[i][l];
                }
            }
        }
        for i in tiled..rows {
            let o = i * n + j0;
            let mut acc: [T; TILE_COLS] = c[o..o + TILE_COLS].try_into().unwrap();
            for p in 0..k {
                let bp: &[T; TILE_COLS] = b[p * n + j0..p * n + j0 + TILE_COLS].try_into().unwrap();
                let av = at(i, p);
                for l in 0..TILE_COLS {
                    acc[l] += av * bp[l];
                }
            }
            c[o..o + TILE_COLS].copy_from_slice(&acc);
        }
    }
    for i in 0..rows {
        for j in full..n {
            let mut s = c[i * n + j];
            for p in 0..k {
                s += at(i, p) * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

/// Row-stochastic attention between the scalar entries of `q` and `k`:
/// `A[i][j] = softmax_j(scale * q[i] * k[j])`, `out[i] = sum_j A[i][j] v[j]`.
pub(crate) fn outer_attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], scale: T, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { attention_forward_avx2(q, k, v, scale, out) };
    }
    attention_forward_lanes(q, k, v, scale, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attention_forward_avx2<T: Real>(q: &[T], k: &[T], v: &[T], scale: T, out: &mut [T]) {
    attention_forward_lanes(q, k, v, scale, out)
}

#[inline(always)]
fn attention_forward_lanes<T: Real>(q: &[T], k: &[T], v: &[T], scale: T, out: &mut [T]) {
    let n = k.len();
    let (kmin, kmax) = min_max(k);
    let mut e = vec![T::zero(); n];
    for (i, oi) in out.iter_mut().enumerate() {
        let a = q[i] * scale;
        let m = if a >= T::zero() { a * kmax } else { a * kmin };
        for (ej, &kj) in e.iter_mut().zip(k) {
            *ej = (a * kj - m).exp_fast();
        }
        let z: T = sum(&e);
        *oi = dot(&e, v) / z;
    }
}

/// Attention rows of [`outer_attention_forward`], materialised. Only used for
/// inspection; the tape never stores the full matrix.
pub fn attention_rows<T: Real>(q: &[T], k: &[T], scale: T) -> Vec<Vec<T>> {
    let (kmin, kmax) = min_max(k);
    q.iter()
        .map(|&qi| {
            let a = qi * scale;
            let m = if a >= T::zero() { a * kmax } else { a * kmin };
            let e: Vec<T> = k.iter().map(|&kj| (a * kj - m).exp_fast()).collect();
            let z = sum(&e);
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn outer_attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    y: &[T],
    g: &[T],
    scale: T,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { attention_backward_avx2(q, k, v, y, g, scale, dq, dk, dv) };
    }
    attention_backward_lanes(q, k, v, y, g, scale, dq, dk, dv)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn attention_backward_avx2<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    y: &[T],
    g: &[T],
    scale: T,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    attention_backward_lanes(q, k, v, y, g, scale, dq, dk, dv)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn attention_backward_lanes<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    y: &[T],
    g: &[T],
    scale: T,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let n = k.len();
    let (kmin, kmax) = min_max(k);
    let mut e = vec![T::zero(); n];
    for i in 0..q.len() {
        let gi = g[i];
        if gi == T::zero() {
            continue;
        }
        let a = q[i] * scale;
        let m = if a >= T::zero() { a * kmax } else { a * kmin };
        for (ej, &kj) in e.iter_mut().zip(k) {
            *ej = (a * kj - m).exp_fast();
        }
        let inv_z = T::one() / sum(&e);
        let yi = y[i];
        let gdk = scale * gi * q[i];
        let gz = gi * inv_z;
        let dkz = gdk * inv_z;
        // Eight partial sums keep the reduction vectorisable.
        let mut acc = [T::zero(); 8];
        let split = n - n % 8;
        for (((ec, vc), kc), (dvc, dkc)) in e[..split]
            .chunks_exact(8)
            .zip(v[..split].chunks_exact(8))
            .zip(k[..split].chunks_exact(8))
            .zip(
                dv[..split]
                    .chunks_exact_mut(8)
                    .zip(dk[..split].chunks_exact_mut(8)),
            )
        {
            for l in 0..8 {
                let t = ec[l] * (vc[l] - yi);
                dvc[l] += gz * ec[l];
                dkc[l] += dkz * t;
                acc[l] += t * kc[l];
            }
        }
        let mut tail = T::zero();
        for j in split..n {
            let t = e[j] * (v[j] - yi);
            dv[j] += gz * e[j];
            dk[j] += dkz * t;
            tail += t * k[j];
        }
        let total = acc.iter().fold(T::zero(), |a, &b| a + b) + tail;
        dq[i] += scale * gi * inv_z * total;
    }
}

fn min_max<T: Real>(k: &[T]) -> (T, T) {
    k.iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

#[inline(always)]
fn sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = x.chunks_exact(8);
    let rem = c.remainder();
    for ch in c {
        for l in 0..8 {
            acc[l] += ch[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &r in rem {
        s += r;
    }
    s
}
