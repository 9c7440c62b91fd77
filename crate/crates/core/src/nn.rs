//! Parameter initialisation shared by the model components.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Pid, Var};
use crate::real::Real;

/// Fully connected layer `x W^T + b` with `W: out x inp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: Pid,
    pub b: Option<Pid>,
}

impl Dense {
    /// Weights and bias drawn from `U(-1/sqrt(inp), 1/sqrt(inp))`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let w = store.uniform(format!("{name}.weight"), out, inp, bound, rng);
        let b = bias.then(|| store.uniform(format!("{name}.bias"), 1, out, bound, rng));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}
