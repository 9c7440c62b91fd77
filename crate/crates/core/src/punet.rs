//! Predictive U-Net mapping a noised current visit to the next clean visit.
//!
//! Each level works on `(channels, length)` features whose product is the
//! level width. The down path refines features with residual blocks and
//! halves the length with strided convolutions. Skip connections pass
//! through catalyst attention before being fused with the upsampled deeper
//! features. The diffusion step enters every residual block through a
//! sinusoidal embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, ParamStore, Pid, Tensor, Var};
use crate::model::ModelError;
use crate::nn::Dense;
use crate::real::Real;

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PUNetConfig {
    /// Feature width (channels x length) of every level, outermost first.
    pub widths: Vec<usize>,
    pub channels: usize,
    pub step_embed_dim: usize,
}

impl Default for PUNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![1024, 512, 256],
            channels: 4,
            step_embed_dim: 64,
        }
    }
}

impl PUNetConfig {
    /// Feature length of each level.
    pub fn lengths(&self) -> Result<Vec<usize>, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(format!("PU-Net: {m}")));
        if self.widths.is_empty() {
            return bad("at least one level is required".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return bad("step embedding width must be even and positive".into());
        }
        let mut lengths = Vec::with_capacity(self.widths.len());
        for (l, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % self.channels != 0 {
                return bad(format!(
                    "width {w} is not a positive multiple of {} channels",
                    self.channels
                ));
            }
            let len = w / self.channels;
            if let Some(&prev) = lengths.last() {
                let expect = ConvGeom::conv_len(prev, 3, 2, 1);
                if len != expect {
                    return bad(format!(
                        "level {l} has length {len}, but a stride-2 convolution of length {prev} gives {expect}"
                    ));
                }
            }
            lengths.push(len);
        }
        Ok(lengths)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Pid,
    b: Pid,
    geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        lin: usize,
        kernel: usize,
        stride: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let lout = if transposed {
            (lin - 1) * stride + kernel - 2
        } else {
            ConvGeom::conv_len(lin, kernel, stride, 1)
        };
        let fan_in = if transposed {
            cout * kernel
        } else {
            cin * kernel
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (r, c) = if transposed {
            (cin * cout, kernel)
        } else {
            (cout, cin * kernel)
        };
        let w = store.uniform(format!("{name}.weight"), r, c, bound, rng);
        let b = store.uniform(format!("{name}.bias"), 1, cout, bound, rng);
        Self {
            w,
            b,
            geom: ConvGeom {
                cin,
                cout,
                lin,
                lout,
                kernel,
                stride,
                pad: 1,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Pid,
    beta: Pid,
    mean: Pid,
    var: Pid,
    channels: usize,
}

impl BatchNorm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.weight"), 1, channels, 1.0, true),
            beta: store.constant(format!("{name}.bias"), 1, channels, 0.0, true),
            mean: store.constant(format!("{name}.running_mean"), 1, channels, 0.0, false),
            var: store.constant(format!("{name}.running_var"), 1, channels, 1.0, false),
            channels,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.mean,
            self.var,
            self.channels,
            BN_EPS,
        )
    }
}

/// `ReLU(BN(Conv(x)) + StepProj(step)) + x`.
#[derive(Debug, Clone)]
struct ResBlock {
    conv: Conv,
    bn: BatchNorm,
    step: Dense,
}

impl ResBlock {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        len: usize,
        e: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), c, c, len, 3, 1, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c),
            step: Dense::new(store, &format!("{name}.step"), e, c * len, true, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, step_emb: Var) -> Var {
        let y = g.conv1d(x, self.conv.w, self.conv.b, self.conv.geom);
        let y = self.bn.forward(g, y);
        let s = self.step.forward(g, step_emb);
        let y = g.add(y, s);
        let y = g.relu(y);
        g.add(y, x)
    }
}

/// `MaxPool(LayerNorm(r) + Softmax(q k^T / sqrt(w)) v)` with `q` from the
/// features and `k`, `v` from the projected catalyst.
#[derive(Debug, Clone)]
struct CatalystAttention {
    phi: Dense,
    q: Dense,
    k: Dense,
    v: Dense,
    ln: (Pid, Pid),
    width: usize,
    channels: usize,
}

impl CatalystAttention {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        channels: usize,
        phi_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            phi: Dense::new(store, &format!("{name}.phi"), phi_width, width, true, rng),
            q: Dense::new(store, &format!("{name}.q"), width, width, false, rng),
            k: Dense::new(store, &format!("{name}.k"), width, width, false, rng),
            v: Dense::new(store, &format!("{name}.v"), width, width, false, rng),
            ln: (
                store.constant(format!("{name}.ln.weight"), 1, width, 1.0, true),
                store.constant(format!("{name}.ln.bias"), 1, width, 0.0, true),
            ),
            width,
            channels,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, r: Var, phi: Var) -> Var {
        let p = self.phi.forward(g, phi);
        let q = self.q.forward(g, r);
        let k = self.k.forward(g, p);
        let v = self.v.forward(g, p);
        let att = g.outer_attention(q, k, v, T::of(1.0 / (self.width as f64).sqrt()));
        let ln = g.layer_norm(r, Some(self.ln), LN_EPS);
        let sum = g.add(ln, att);
        g.max_pool3(sum, self.channels)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    deconv: Conv,
    bn: BatchNorm,
    fuse: Conv,
    res: ResBlock,
}

#[derive(Debug, Clone)]
struct Level {
    down: ResBlock,
    downsample: Option<Conv>,
    attention: Option<CatalystAttention>,
    up: Option<UpBlock>,
}

#[derive(Debug, Clone)]
pub struct PUNet {
    input: Dense,
    output: Dense,
    levels: Vec<Level>,
    step_embed_dim: usize,
}

impl PUNet {
    /// `attention == false` replaces every catalyst attention by the
    /// identity, so the catalyst no longer enters the network.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &PUNetConfig,
        d: usize,
        attention: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let lengths = cfg.lengths()?;
        let c = cfg.channels;
        let e = cfg.step_embed_dim;
        let depth = lengths.len();
        let input = Dense::new(store, "punet.in", d, cfg.widths[0], true, rng);
        let levels = (0..depth)
            .map(|l| {
                let len = lengths[l];
                let name = format!("punet.level{l}");
                let down = ResBlock::new(store, &format!("{name}.down"), c, len, e, rng);
                let downsample = (l + 1 < depth).then(|| {
                    Conv::new(
                        store,
                        &format!("{name}.downsample"),
                        c,
                        c,
                        len,
                        3,
                        2,
                        false,
                        rng,
                    )
                });
                let attention = attention.then(|| {
                    CatalystAttention::new(
                        store,
                        &format!("{name}.attention"),
                        cfg.widths[l],
                        c,
                        3 * d,
                        rng,
                    )
                });
                let up = (l + 1 < depth).then(|| {
                    let mut deconv = Conv::new(
                        store,
                        &format!("{name}.deconv"),
                        c,
                        c,
                        lengths[l + 1],
                        4,
                        2,
                        true,
                        rng,
                    );
                    deconv.geom.lout = len;
                    UpBlock {
                        deconv,
                        bn: BatchNorm::new(store, &format!("{name}.deconv_bn"), c),
                        fuse: Conv::new(
                            store,
                            &format!("{name}.fuse"),
                            2 * c,
                            c,
                            len,
                            3,
                            1,
                            false,
                            rng,
                        ),
                        res: ResBlock::new(store, &format!("{name}.up"), c, len, e, rng),
                    }
                });
                Level {
                    down,
                    downsample,
                    attention,
                    up,
                }
            })
            .collect();
        let output = Dense::new(store, "punet.out", cfg.widths[0], d, true, rng);
        Ok(Self {
            input,
            output,
            levels,
            step_embed_dim: e,
        })
    }

    fn attend<T: Real>(&self, g: &mut Graph<'_, T>, l: usize, r: Var, phi: Var) -> Var {
        match &self.levels[l].attention {
            Some(a) => a.forward(g, r, phi),
            None => r,
        }
    }

    /// Clean next-visit estimate for each row of `x` (width `d`), given the
    /// catalyst rows `phi` (width `3d`) and per-row diffusion steps.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, phi: Var, steps: &[usize]) -> Var {
        let s_col = g.input(Tensor::column(
            steps.iter().map(|&s| T::of(s as f64)).collect(),
        ));
        let step_emb = g.sinusoid(s_col, self.step_embed_dim);
        let mut cur = self.input.forward(g, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for lv in &self.levels {
            let r = lv.down.forward(g, cur, step_emb);
            skips.push(r);
            if let Some(ds) = &lv.downsample {
                cur = g.conv1d(r, ds.w, ds.b, ds.geom);
            }
        }
        let deepest = self.levels.len() - 1;
        let mut u = self.attend(g, deepest, skips[deepest], phi);
        for l in (0..deepest).rev() {
            let a = self.attend(g, l, skips[l], phi);
            let up = self.levels[l]
                .up
                .as_ref()
                .expect("inner level has an up block");
            let dec = g.conv_transpose1d(u, up.deconv.w, up.deconv.b, up.deconv.geom);
            let dec = up.bn.forward(g, dec);
            let dec = g.relu(dec);
            let cat = g.concat_cols(vec![a, dec]);
            let fused = g.conv1d(cat, up.fuse.w, up.fuse.b, up.fuse.geom);
            u = up.res.forward(g, fused, step_emb);
        }
        self.output.forward(g, u)
    }
}
