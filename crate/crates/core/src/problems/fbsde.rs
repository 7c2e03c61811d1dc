//! Quadratic-driver FBSDE posed as a control problem.
//!
//! `X' = X + sqrt(2) dW`, `Y' = Y - beta |Z|^2 dt + Z . dW`, loss
//! `|Y_T - g(X_T)|^2` with `g(x) = ln((1 + |x|^2) / 2)`. The period-0
//! control is `(y, z_0)`; later periods output `c` with `Z = sqrt(2) c`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check, SpecError};
use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::policy::{HeadSpec, InputMap, PolicyLayout, PolicyStack};
use crate::simulate::{ControlProblem, Purpose, StreamKey, UtilityKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbsdeSpec {
    /// Brownian dimension `d_w`.
    pub d: usize,
    /// Real-time horizon.
    pub time: f64,
    /// Number of periods `N_T`.
    pub steps: usize,
    pub beta: f64,
    /// Start point; empty means the origin.
    pub x0: Vec<f64>,
    pub hidden: Option<Vec<usize>>,
}

impl Default for FbsdeSpec {
    fn default() -> Self {
        Self {
            d: 100,
            time: 1.0,
            steps: 20,
            beta: -1.0,
            x0: Vec::new(),
            hidden: None,
        }
    }
}

impl FbsdeSpec {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        check(&mut d, self.d >= 1, "d must be at least 1");
        check(&mut d, self.steps >= 1, "steps must be at least 1");
        check(&mut d, self.time > 0.0, "time must be positive");
        check(
            &mut d,
            self.beta != 0.0 && self.beta.is_finite(),
            "beta must be finite and nonzero",
        );
        check(
            &mut d,
            self.x0.is_empty() || self.x0.len() == self.d,
            "x0 must have d entries",
        );
        d
    }

    pub fn start(&self) -> Vec<f64> {
        if self.x0.is_empty() {
            vec![0.0; self.d]
        } else {
            self.x0.clone()
        }
    }

    pub fn dt(&self) -> f64 {
        self.time / self.steps as f64
    }
}

/// `ln((1 + |x|^2) / 2)`.
pub fn terminal_g(x: &[f64]) -> f64 {
    ((1.0 + x.iter().map(|v| v * v).sum::<f64>()) / 2.0).ln()
}

#[derive(Clone, Debug)]
pub struct FbsdeProblem {
    spec: FbsdeSpec,
}

impl FbsdeProblem {
    pub fn new(spec: FbsdeSpec) -> Result<Self, SpecError> {
        SpecError::from_diagnostics(spec.diagnostics())?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &FbsdeSpec {
        &self.spec
    }
}

impl ControlProblem for FbsdeProblem {
    fn name(&self) -> &str {
        "fbsde"
    }

    fn state_dim(&self) -> usize {
        self.spec.d + 1
    }

    fn shock_dim(&self) -> usize {
        self.spec.d
    }

    fn horizon(&self) -> usize {
        self.spec.steps
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut s = self.spec.start();
        s.push(0.0);
        s
    }

    fn policy_layout(&self) -> PolicyLayout {
        let d = self.spec.d;
        PolicyLayout {
            horizon: self.spec.steps,
            state_dim: d + 1,
            control_dim0: d + 1,
            control_dim: d,
            head0: HeadSpec::Unconstrained,
            head: HeadSpec::Unconstrained,
            input: InputMap::identity(0, d),
            hidden: self
                .spec
                .hidden
                .clone()
                .unwrap_or_else(|| vec![d + 10, d + 20, d + 20, d + 10]),
            c0_init: vec![0.0; d + 1],
            output_bias: None,
        }
    }

    fn sample_shock(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(rng);
        }
    }

    fn transition(
        &self,
        g: &mut Graph,
        t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let d = self.spec.d;
        let dt = self.spec.dt();
        let dw = g.scale(shock, dt.sqrt());
        let x = g.slice_cols(state, 0, d)?;
        let (y, z) = if t == 0 {
            (g.slice_cols(control, 0, 1)?, g.slice_cols(control, 1, d)?)
        } else {
            (g.slice_cols(state, d, 1)?, g.scale(control, 2f64.sqrt()))
        };
        let step = g.scale(dw, 2f64.sqrt());
        let x_next = g.add(x, step)?;
        let zz = g.square(z);
        let zz = g.sum_cols(zz)?;
        let drift = g.scale(zz, -self.spec.beta * dt);
        let zdw = g.mul(z, dw)?;
        let zdw = g.sum_cols(zdw)?;
        let y_next = g.add(y, drift)?;
        let y_next = g.add(y_next, zdw)?;
        g.concat_cols(&[x_next, y_next])
    }

    fn utility_kind(&self) -> UtilityKind {
        UtilityKind::General
    }

    fn path_utility(&self, g: &mut Graph, states: &[NodeId], _controls: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let d = self.spec.d;
        let last = *states.last().unwrap();
        let x = g.slice_cols(last, 0, d)?;
        let y = g.slice_cols(last, d, 1)?;
        let xx = g.square(x);
        let xx = g.sum_cols(xx)?;
        let gx = g.offset(xx, 1.0);
        let gx = g.scale(gx, 0.5);
        let gx = g.ln(gx);
        let err = g.sub(y, gx)?;
        let loss = g.square(err);
        Ok(g.neg(loss))
    }

    fn minimizes(&self) -> bool {
        true
    }

    fn tracked_scalars(&self, stack: &PolicyStack) -> Vec<(String, f64)> {
        vec![("y".to_string(), stack.c0()[0])]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub se: f64,
    pub samples: usize,
}

fn terminal_samples(
    spec: &FbsdeSpec,
    samples: usize,
    seed: u64,
    chunk: usize,
    f: impl Fn(f64) -> f64 + Sync,
) -> Vec<(f64, f64, usize)> {
    let key = StreamKey::new(seed, Purpose::Oracle, 0, 0, 0);
    let x0 = spec.start();
    let sd = (2.0 * spec.time).sqrt();
    let chunks: Vec<usize> = (0..samples.div_ceil(chunk)).collect();
    chunks
        .par_iter()
        .map(|&c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(samples);
            let mut x = vec![0.0; spec.d];
            let mut vals = Vec::with_capacity(hi - lo);
            for p in lo..hi {
                let mut rng = key.rng(p as u64, 0);
                for (xi, x0i) in x.iter_mut().zip(&x0) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = x0i + sd * z;
                }
                vals.push(f(terminal_g(&x)));
            }
            let n = vals.len();
            let m = vals.iter().sum::<f64>() / n as f64;
            let ss = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            (m, ss, n)
        })
        .collect()
}

/// Pooled mean and variance from per-chunk (mean, sum of squares, n).
fn pool(parts: &[(f64, f64, usize)]) -> (f64, f64, usize) {
    let n: usize = parts.iter().map(|p| p.2).sum();
    let mean = parts.iter().map(|p| p.0 * p.2 as f64).sum::<f64>() / n as f64;
    let ss: f64 = parts
        .iter()
        .map(|&(m, s, k)| s + k as f64 * (m - mean) * (m - mean))
        .sum();
    (mean, ss / (n - 1) as f64, n)
}

/// Optimal `y` of the discretized problem by plain Monte Carlo, with a
/// delta-method standard error.
///
/// With `Z = sqrt(2) grad u` and driver `beta |Z|^2`, `u` solves
/// `u_t + Lap u + 2 beta |grad u|^2 = 0`, so `exp(2 beta u)` is caloric and
/// `y* = ln E[exp(2 beta g(x0 + sqrt(2) W_T))] / (2 beta)`.
pub fn fbsde_oracle_y(spec: &FbsdeSpec, samples: usize, seed: u64) -> Result<OracleEstimate, SpecError> {
    SpecError::from_diagnostics(spec.diagnostics())?;
    if samples < 1000 {
        return Err(SpecError::Oracle("need at least 1000 samples".into()));
    }
    let beta = 2.0 * spec.beta;
    // Shift by beta * g at the start point so exp stays in range.
    let shift = beta * terminal_g(&spec.start());
    let parts = terminal_samples(spec, samples, seed, 65536, |g| (beta * g - shift).exp());
    let (mean, var, n) = pool(&parts);
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(SpecError::Oracle("exponential moment over- or underflowed".into()));
    }
    let value = (shift + mean.ln()) / beta;
    let se = var.sqrt() / (n as f64).sqrt() / mean / beta.abs();
    Ok(OracleEstimate { value, se, samples: n })
}

/// `Var[g(X_T)]`: the loss of the best zero-`Z` policy (`y = E g`).
pub fn fbsde_zero_control_loss(spec: &FbsdeSpec, samples: usize, seed: u64) -> Result<OracleEstimate, SpecError> {
    SpecError::from_diagnostics(spec.diagnostics())?;
    let parts = terminal_samples(spec, samples, seed, 65536, |g| g);
    let (_, var, n) = pool(&parts);
    Ok(OracleEstimate {
        value: var,
        se: var * (2.0 / (n as f64 - 1.0)).sqrt(),
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_reduces_to_mean_for_small_beta() {
        let spec = FbsdeSpec {
            d: 2,
            beta: 1e-4,
            ..FbsdeSpec::default()
        };
        let y = fbsde_oracle_y(&spec, 200_000, 1).unwrap();
        let mean = terminal_samples(&spec, 200_000, 1, 65536, |g| g);
        let (m, var, n) = pool(&mean);
        // ln E e^{2bg} / 2b = E g + b Var g + O(b^2).
        let expected = m + 1e-4 * var;
        assert!((y.value - expected).abs() < 1e-6, "{} vs {}", y.value, expected);
        assert!(n == 200_000);
    }
}
