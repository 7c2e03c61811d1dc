//! Multi-sector stochastic growth with Cobb–Douglas production and a
//! leisure good.
//!
//! Control layout per period: index 0 is leisure `Z`, `1..=n` are labor
//! `L_i`, then for each commodity `j` a block `[c_j, X_1j .. X_nj]` at
//! offset `n + 1 + j (n + 1)`. A grouped softmax keeps `Z + sum L = H` and
//! `c_j + sum_i X_ij = Y_j` exactly.

use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check, constant_stack, solve_dense, SpecError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::policy::{GroupScale, HeadSpec, InputMap, PolicyLayout, PolicyStack};
use crate::simulate::ControlProblem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthSpec {
    pub n: usize,
    pub horizon: usize,
    pub beta: f64,
    /// `(theta_0, theta_1 .. theta_n)`; `theta_0` weights leisure.
    pub theta: Vec<f64>,
    /// Curvatures, same indexing as `theta`. `1` means log utility.
    pub tau: Vec<f64>,
    pub h: f64,
    /// `a[i][j]`: share of input `j` in sector `i`.
    pub a: Vec<Vec<f64>>,
    /// Labor shares; defaults to `1 - sum_j a_ij`.
    pub b: Option<Vec<f64>>,
    pub y0: Vec<f64>,
    /// Standard deviation of `ln lambda`.
    pub shock_sd: f64,
    pub hidden: Option<Vec<usize>>,
}

impl Default for GrowthSpec {
    fn default() -> Self {
        Self {
            n: 6,
            horizon: 5,
            beta: 0.95,
            theta: vec![0.1, 0.1, 0.12, 0.08, 0.1, 0.2, 0.3],
            tau: vec![1.0; 7],
            h: 1.0,
            a: vec![
                vec![0.40, 0.01, 0.01, 0.10, 0.05, 0.03],
                vec![0.01, 0.10, 0.01, 0.10, 0.05, 0.08],
                vec![0.01, 0.05, 0.02, 0.30, 0.10, 0.10],
                vec![0.05, 0.05, 0.01, 0.35, 0.08, 0.06],
                vec![0.02, 0.01, 0.02, 0.10, 0.20, 0.10],
                vec![0.02, 0.01, 0.04, 0.08, 0.10, 0.25],
            ],
            b: None,
            y0: vec![6.0, 10.0, 9.0, 5.0, 8.0, 4.0],
            shock_sd: 1.0,
            hidden: None,
        }
    }
}

impl GrowthSpec {
    pub fn labor_shares(&self) -> Vec<f64> {
        match &self.b {
            Some(b) => b.clone(),
            None => self.a.iter().map(|row| 1.0 - row.iter().sum::<f64>()).collect(),
        }
    }

    pub fn control_dim(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    /// Index of `c_j` in the control vector.
    pub fn consumption_index(&self, j: usize) -> usize {
        self.n + 1 + j * (self.n + 1)
    }

    /// Index of `X_ij` (input `j` used by sector `i`).
    pub fn input_index(&self, i: usize, j: usize) -> usize {
        self.consumption_index(j) + 1 + i
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        let n = self.n;
        check(&mut d, n >= 1, "n must be at least 1");
        check(&mut d, self.horizon >= 1, "horizon must be at least 1");
        check(&mut d, self.beta > 0.0 && self.beta < 1.0, "beta must lie in (0, 1)");
        check(&mut d, self.theta.len() == n + 1, "theta must have n + 1 entries");
        check(&mut d, self.tau.len() == n + 1, "tau must have n + 1 entries");
        check(&mut d, self.theta.iter().all(|&t| t > 0.0), "theta must be positive");
        check(&mut d, self.tau.iter().all(|&t| t > 0.0), "tau must be positive");
        check(&mut d, self.h > 0.0, "h must be positive");
        check(
            &mut d,
            self.y0.len() == n && self.y0.iter().all(|&y| y > 0.0),
            "y0 must have n positive entries",
        );
        check(&mut d, self.shock_sd >= 0.0, "shock_sd must be non-negative");
        let square = self.a.len() == n && self.a.iter().all(|r| r.len() == n);
        check(&mut d, square, "a must be n x n");
        if square {
            check(
                &mut d,
                self.a.iter().flatten().all(|&v| v > 0.0),
                "all a_ij must be positive",
            );
            let b = self.labor_shares();
            check(&mut d, b.len() == n, "b must have n entries");
            if b.len() == n {
                check(&mut d, b.iter().all(|&v| v > 0.0), "all b_i must be positive");
                for (i, (row, bi)) in self.a.iter().zip(&b).enumerate() {
                    let total = bi + row.iter().sum::<f64>();
                    if (total - 1.0).abs() > 1e-9 {
                        d.push(format!(
                            "constant returns to scale violated in sector {}: b_i + sum_j a_ij = {total}, must equal 1",
                            i + 1
                        ));
                    }
                }
            }
        }
        d
    }
}

fn utility_of(x: f64, tau: f64) -> f64 {
    if tau == 1.0 {
        x.ln()
    } else {
        x.powf(1.0 - tau) / (1.0 - tau)
    }
}

#[derive(Clone, Debug)]
pub struct GrowthProblem {
    spec: GrowthSpec,
    /// `[(n+1)^2, n]` map from log controls to log output.
    production: Tensor,
    /// `[(n+1)^2, 1]` theta weights on `ln Z` and `ln c_j`.
    log_weights: Tensor,
}

impl GrowthProblem {
    pub fn new(spec: GrowthSpec) -> Result<Self, SpecError> {
        SpecError::from_diagnostics(spec.diagnostics())?;
        let n = spec.n;
        let w = spec.control_dim();
        let b = spec.labor_shares();
        let mut m = vec![0.0; w * n];
        let mut lw = vec![0.0; w];
        lw[0] = spec.theta[0];
        for i in 0..n {
            m[(1 + i) * n + i] = b[i];
            for j in 0..n {
                m[spec.input_index(i, j) * n + i] = spec.a[i][j];
            }
            lw[spec.consumption_index(i)] = spec.theta[i + 1];
        }
        Ok(Self {
            production: Tensor::matrix(w, n, m).unwrap(),
            log_weights: Tensor::matrix(w, 1, lw).unwrap(),
            spec,
        })
    }

    pub fn spec(&self) -> &GrowthSpec {
        &self.spec
    }

    fn groups(&self) -> (Arc<[Vec<usize>]>, Vec<GroupScale>) {
        let n = self.spec.n;
        let mut groups = vec![(0..=n).collect::<Vec<_>>()];
        let mut scales = vec![GroupScale::Constant(self.spec.h)];
        for j in 0..n {
            let s = self.spec.consumption_index(j);
            groups.push((s..s + n + 1).collect());
            scales.push(GroupScale::State(j));
        }
        (groups.into(), scales)
    }

    /// Weighted utility `[r, 1]` of leisure `z` and consumptions `c` (both
    /// taken from columns of `x` at `z_col` and `c_cols`).
    fn weighted_utility(
        &self,
        g: &mut Graph,
        x: NodeId,
        z_col: Option<usize>,
        c_cols: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let s = &self.spec;
        let mut parts = Vec::with_capacity(c_cols.len() + 1);
        let mut add = |g: &mut Graph, col: usize, k: usize| -> Result<(), AutodiffError> {
            let v = g.slice_cols(x, col, 1)?;
            let u = if s.tau[k] == 1.0 {
                g.ln(v)
            } else {
                let p = g.powf(v, 1.0 - s.tau[k]);
                g.scale(p, 1.0 / (1.0 - s.tau[k]))
            };
            parts.push(g.scale(u, s.theta[k]));
            Ok(())
        };
        if let Some(z) = z_col {
            add(g, z, 0)?;
        }
        for (j, &col) in c_cols.iter().enumerate() {
            add(g, col, j + 1)?;
        }
        let all = g.concat_cols(&parts)?;
        g.sum_cols(all)
    }
}

impl ControlProblem for GrowthProblem {
    fn name(&self) -> &str {
        "growth"
    }

    fn state_dim(&self) -> usize {
        2 * self.spec.n
    }

    fn shock_dim(&self) -> usize {
        self.spec.n
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut s = self.spec.y0.clone();
        s.extend(std::iter::repeat_n(1.0, self.spec.n));
        s
    }

    fn policy_layout(&self) -> PolicyLayout {
        let n = self.spec.n;
        let (groups, scales) = self.groups();
        let head = HeadSpec::GroupedSoftmax { groups, scales };
        PolicyLayout {
            horizon: self.spec.horizon,
            state_dim: 2 * n,
            control_dim0: self.spec.control_dim(),
            control_dim: self.spec.control_dim(),
            head0: head.clone(),
            head,
            input: InputMap {
                log: true,
                ..InputMap::identity(0, 2 * n)
            },
            hidden: self.spec.hidden.clone().unwrap_or_else(|| vec![300, 300]),
            c0_init: vec![0.0; self.spec.control_dim()],
            output_bias: None,
        }
    }

    fn sample_shock(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        for v in out {
            let z: f64 = StandardNormal.sample(rng);
            *v = self.spec.shock_sd * z;
        }
    }

    fn transition(
        &self,
        g: &mut Graph,
        _t: usize,
        _state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let m = g.input(self.production.clone());
        let lc = g.ln(control);
        let ly = g.matmul(lc, m)?;
        let ly = g.add(ly, shock)?;
        let y = g.exp(ly);
        let lambda = g.exp(shock);
        g.concat_cols(&[y, lambda])
    }

    fn period_utility(
        &self,
        g: &mut Graph,
        t: usize,
        _state: NodeId,
        control: NodeId,
        next: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let s = &self.spec;
        let n = s.n;
        let disc = s.beta.powi(t as i32);
        let u = if s.tau.iter().all(|&v| v == 1.0) {
            let w = g.input(self.log_weights.clone());
            let lc = g.ln(control);
            g.matmul(lc, w)?
        } else {
            let cols: Vec<usize> = (0..n).map(|j| s.consumption_index(j)).collect();
            self.weighted_utility(g, control, Some(0), &cols)?
        };
        let u = g.scale(u, disc);
        if t + 1 < s.horizon {
            return Ok(u);
        }
        let cols: Vec<usize> = (0..n).collect();
        let tail = self.weighted_utility(g, next, None, &cols)?;
        let leisure = s.theta[0] * utility_of(s.h, s.tau[0]);
        let tail = g.offset(tail, leisure);
        let tail = g.scale(tail, disc * s.beta);
        g.add(u, tail)
    }
}

/// Solve `m x = rhs` by Gaussian elimination with partial pivoting.
/// `gamma^T = theta^T (I - beta A)^{-1}` over the commodity weights.
pub fn growth_gamma(spec: &GrowthSpec) -> Result<Vec<f64>, SpecError> {
    SpecError::from_diagnostics(spec.diagnostics())?;
    let n = spec.n;
    // (I - beta A)^T gamma = theta.
    let m = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| f64::from(u8::from(i == j)) - spec.beta * spec.a[i][j])
                .collect()
        })
        .collect();
    solve_dense(m, spec.theta[1..].to_vec()).ok_or_else(|| SpecError::Oracle("I - beta A is singular".into()))
}

/// Control fractions for one period: each group's entries divided by its
/// scale. `now` weights the goods consumed this period, `next` the value
/// of next period's output.
fn fractions(spec: &GrowthSpec, now: &[f64], next: &[f64]) -> Vec<f64> {
    let n = spec.n;
    let b = spec.labor_shares();
    let mut f = vec![0.0; spec.control_dim()];
    let denom = spec.theta[0] + spec.beta * (0..n).map(|j| next[j] * b[j]).sum::<f64>();
    f[0] = spec.theta[0] / denom;
    for i in 0..n {
        f[1 + i] = spec.beta * next[i] * b[i] / denom;
    }
    for j in 0..n {
        f[spec.consumption_index(j)] = spec.theta[j + 1] / now[j];
        for i in 0..n {
            f[spec.input_index(i, j)] = spec.beta * next[i] * spec.a[i][j] / now[j];
        }
    }
    f
}

/// Zero network weights and output bias `ln(fraction)`, so the softmax
/// head reproduces the fractions whatever the state.
fn fraction_stack(problem: &GrowthProblem, per_period: &[Vec<f64>]) -> Result<PolicyStack, SpecError> {
    let logs: Vec<Vec<f64>> = per_period.iter().map(|f| f.iter().map(|v| v.ln()).collect()).collect();
    constant_stack(problem.policy_layout(), logs[0].clone(), &logs[1..])
}

/// The stationary closed-form policy that is optimal for the infinite
/// horizon log-utility problem, as a policy stack.
pub fn growth_infinite_baseline(problem: &GrowthProblem) -> Result<PolicyStack, SpecError> {
    let spec = problem.spec();
    if spec.tau.iter().any(|&t| t != 1.0) {
        return Err(SpecError::Oracle("closed form needs log utility (tau = 1)".into()));
    }
    let gamma = growth_gamma(spec)?;
    let f = fractions(spec, &gamma, &gamma);
    fraction_stack(problem, &vec![f; spec.horizon])
}

/// Exact optimum of the finite-horizon log-utility problem:
/// `gamma_T = theta`, `gamma_t = theta + beta A^T gamma_{t+1}`.
pub fn growth_finite_optimal(problem: &GrowthProblem) -> Result<PolicyStack, SpecError> {
    let spec = problem.spec();
    if spec.tau.iter().any(|&t| t != 1.0) {
        return Err(SpecError::Oracle("closed form needs log utility (tau = 1)".into()));
    }
    let n = spec.n;
    let t_max = spec.horizon;
    let mut gammas = vec![spec.theta[1..].to_vec(); t_max + 1];
    for t in (0..t_max).rev() {
        for j in 0..n {
            gammas[t][j] = spec.theta[j + 1] + spec.beta * (0..n).map(|i| spec.a[i][j] * gammas[t + 1][i]).sum::<f64>();
        }
    }
    let per: Vec<Vec<f64>> = (0..t_max)
        .map(|t| fractions(spec, &gammas[t], &gammas[t + 1]))
        .collect();
    fraction_stack(problem, &per)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_with_49_controls() {
        let s = GrowthSpec::default();
        assert!(s.diagnostics().is_empty(), "{:?}", s.diagnostics());
        assert_eq!(s.control_dim(), 49);
    }

    #[test]
    fn baseline_fractions_fill_each_group() {
        let s = GrowthSpec::default();
        let gamma = growth_gamma(&s).unwrap();
        let f = fractions(&s, &gamma, &gamma);
        let time: f64 = f[..=s.n].iter().sum();
        assert!((time - 1.0).abs() < 1e-12);
        for j in 0..s.n {
            let k = s.consumption_index(j);
            let sum: f64 = f[k..k + s.n + 1].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "group {j}: {sum}");
        }
    }

    #[test]
    fn one_sector_gamma() {
        let s = GrowthSpec {
            n: 1,
            theta: vec![0.3, 0.5],
            tau: vec![1.0, 1.0],
            a: vec![vec![0.4]],
            y0: vec![2.0],
            ..GrowthSpec::default()
        };
        let g = growth_gamma(&s).unwrap();
        assert!((g[0] - 0.5 / (1.0 - 0.95 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn utility_of_handles_log_and_power() {
        assert_eq!(utility_of(1.0, 1.0), 0.0);
        assert!((utility_of(4.0, 0.5) - 4.0).abs() < 1e-12);
    }
}
