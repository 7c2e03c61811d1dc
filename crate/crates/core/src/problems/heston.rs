//! Recursive (Epstein–Zin) utility under Heston stochastic volatility,
//! written as a forward-backward system in `(xi, eta)`.
//!
//! `xi' = xi + (r~(eta) xi - c_s xi^e) dt + Z dW` with `e = 1 - psi k / theta`,
//! `eta' = max(eta + a~(eta) dt + beta_bar sqrt(eta) dW, 0)`, loss
//! `(xi_T - 1)^2`. The period-0 control is `(xi_0, Z_0)`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check, SpecError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::policy::{HeadSpec, InputMap, PolicyLayout, PolicyStack};
use crate::simulate::{ControlProblem, UtilityKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HestonSpec {
    pub r: f64,
    pub delta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub kappa: f64,
    pub ybar: f64,
    /// Defaults to `0.07 / sqrt(ybar)`.
    pub lambda_bar: Option<f64>,
    pub beta_bar: f64,
    pub psi: f64,
    pub time: f64,
    pub steps: usize,
    pub y0: f64,
    pub hidden: Option<Vec<usize>>,
}

impl Default for HestonSpec {
    fn default() -> Self {
        Self {
            r: 0.05,
            delta: 0.08,
            gamma: 2.0,
            rho: -0.5,
            kappa: 5.0,
            ybar: 0.0225,
            lambda_bar: None,
            beta_bar: 0.25,
            psi: 0.125,
            time: 10.0,
            steps: 120,
            y0: 0.1,
            hidden: None,
        }
    }
}

/// Constants derived from a [`HestonSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HestonCoefficients {
    pub k: f64,
    pub theta: f64,
    /// `theta delta^psi / (psi k)`.
    pub source: f64,
    /// `1 - psi k / theta`.
    pub exponent: f64,
    pub lambda_bar: f64,
    /// `r~(y) = r0 + r1 y`.
    pub r0: f64,
    pub r1: f64,
    /// `a~(y) = a0 + a1 y`.
    pub a0: f64,
    pub a1: f64,
}

impl HestonCoefficients {
    pub fn r_tilde(&self, y: f64) -> f64 {
        self.r0 + self.r1 * y
    }

    pub fn a_tilde(&self, y: f64) -> f64 {
        self.a0 + self.a1 * y
    }
}

impl HestonSpec {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        check(
            &mut d,
            self.gamma > 0.0 && self.gamma != 1.0,
            "gamma must be positive and not 1",
        );
        check(
            &mut d,
            self.psi > 0.0 && self.psi != 1.0,
            "psi must be positive and not 1",
        );
        check(&mut d, self.delta > 0.0, "delta must be positive");
        check(&mut d, self.ybar > 0.0, "ybar must be positive");
        check(&mut d, self.kappa >= 0.0, "kappa must be non-negative");
        check(&mut d, self.beta_bar >= 0.0, "beta_bar must be non-negative");
        check(&mut d, self.rho.abs() <= 1.0, "rho must lie in [-1, 1]");
        check(&mut d, self.y0 >= 0.0, "y0 must be non-negative");
        check(&mut d, self.time > 0.0, "time must be positive");
        check(&mut d, self.steps >= 1, "steps must be at least 1");
        if let Some(l) = self.lambda_bar {
            check(&mut d, l.is_finite(), "lambda_bar must be finite");
        }
        d
    }

    pub fn dt(&self) -> f64 {
        self.time / self.steps as f64
    }

    pub fn coefficients(&self) -> HestonCoefficients {
        let g = self.gamma;
        let k = g / (g + (1.0 - g) * self.rho * self.rho);
        let theta = (1.0 - g) / (1.0 - 1.0 / self.psi);
        let lambda_bar = self.lambda_bar.unwrap_or(0.07 / self.ybar.sqrt());
        HestonCoefficients {
            k,
            theta,
            source: theta * self.delta.powf(self.psi) / (self.psi * k),
            exponent: 1.0 - self.psi * k / theta,
            lambda_bar,
            r0: (self.r * (1.0 - g) - self.delta * theta) / k,
            r1: 0.5 * ((1.0 - g) / g) * lambda_bar * lambda_bar / k,
            a0: self.kappa * self.ybar,
            a1: -self.kappa + ((1.0 - g) / g) * lambda_bar * self.beta_bar * self.rho,
        }
    }

    /// The EIS for which the problem has a closed-form solution.
    pub fn solvable_psi(gamma: f64, rho: f64) -> f64 {
        2.0 - gamma + (1.0 - gamma).powi(2) / gamma * rho * rho
    }
}

#[derive(Clone, Debug)]
pub struct HestonProblem {
    spec: HestonSpec,
    coef: HestonCoefficients,
}

impl HestonProblem {
    pub fn new(spec: HestonSpec) -> Result<Self, SpecError> {
        SpecError::from_diagnostics(spec.diagnostics())?;
        Ok(Self {
            coef: spec.coefficients(),
            spec,
        })
    }

    pub fn spec(&self) -> &HestonSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> HestonCoefficients {
        self.coef
    }
}

impl ControlProblem for HestonProblem {
    fn name(&self) -> &str {
        "heston"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn shock_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.spec.steps
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![1.0, self.spec.y0]
    }

    fn policy_layout(&self) -> PolicyLayout {
        PolicyLayout {
            horizon: self.spec.steps,
            state_dim: 2,
            control_dim0: 2,
            control_dim: 1,
            head0: HeadSpec::Unconstrained,
            head: HeadSpec::Unconstrained,
            input: InputMap {
                start: 1,
                len: 1,
                log: false,
                shift: vec![self.spec.ybar],
                scale: vec![0.05],
            },
            hidden: self.spec.hidden.clone().unwrap_or_else(|| vec![120, 120]),
            c0_init: vec![1.0, 0.0],
            output_bias: None,
        }
    }

    fn sample_shock(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = StandardNormal.sample(rng);
    }

    fn transition(
        &self,
        g: &mut Graph,
        t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let c = &self.coef;
        let dt = self.spec.dt();
        let xi = if t == 0 {
            g.slice_cols(control, 0, 1)?
        } else {
            g.slice_cols(state, 0, 1)?
        };
        let z = if t == 0 { g.slice_cols(control, 1, 1)? } else { control };
        // Variance never depends on controls; cut it from the tape so the
        // square root at zero cannot poison gradients.
        let eta_node = g.slice_cols(state, 1, 1)?;
        let eta = g.value(eta_node).map(|v| v.max(0.0));
        let shocks = g.value(shock);
        let sq = dt.sqrt();
        let mut r_t = Vec::with_capacity(eta.rows());
        let mut eta_next = Vec::with_capacity(eta.rows());
        for (y, zz) in eta.data().iter().zip(shocks.data()) {
            r_t.push(c.r_tilde(*y));
            eta_next.push((y + c.a_tilde(*y) * dt + self.spec.beta_bar * y.sqrt() * sq * zz).max(0.0));
        }
        let rows = eta.rows();
        let r_node = g.input(Tensor::matrix(rows, 1, r_t).unwrap());
        let rxi = g.mul(r_node, xi)?;
        let drift = if c.exponent == 0.0 {
            g.offset(rxi, -c.source)
        } else {
            let p = if c.exponent == 1.0 {
                xi
            } else {
                let pos = g.clamp_min(xi, 1e-8);
                g.powf(pos, c.exponent)
            };
            let s = g.scale(p, c.source);
            g.sub(rxi, s)?
        };
        let drift = g.scale(drift, dt);
        let dw = g.scale(shock, sq);
        let noise = g.mul(z, dw)?;
        let xi_next = g.add(xi, drift)?;
        let xi_next = g.add(xi_next, noise)?;
        let eta_next = g.input(Tensor::matrix(rows, 1, eta_next).unwrap());
        g.concat_cols(&[xi_next, eta_next])
    }

    fn utility_kind(&self) -> UtilityKind {
        UtilityKind::General
    }

    fn path_utility(&self, g: &mut Graph, states: &[NodeId], _controls: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let last = *states.last().unwrap();
        let xi = g.slice_cols(last, 0, 1)?;
        let err = g.offset(xi, -1.0);
        let loss = g.square(err);
        Ok(g.neg(loss))
    }

    fn minimizes(&self) -> bool {
        true
    }

    fn tracked_scalars(&self, stack: &PolicyStack) -> Vec<(String, f64)> {
        vec![("xi0".to_string(), stack.c0()[0])]
    }
}

/// Finite-difference grid for [`heston_pde_oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeGrid {
    pub y_max: f64,
    /// Intervals in `y`.
    pub points: usize,
    /// Time steps over `[0, T]`.
    pub steps: usize,
    /// Largest accepted change under grid doubling.
    pub tolerance: f64,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            y_max: 1.0,
            points: 400,
            steps: 2000,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PdeSolution {
    /// `g(0, y0)` on the refined grid.
    pub value: f64,
    /// Same on the base grid.
    pub coarse: f64,
    pub change: f64,
}

/// Solve `g_tau = a~ g_y + beta_bar^2 y g_yy / 2 - r~ g + c_s g^e`,
/// `g(tau = 0) = 1`, and return `g` at `y0` after `tau = T`.
/// Linear terms are Crank–Nicolson, the source is Adams–Bashforth 2.
pub fn solve_heston_pde(spec: &HestonSpec, y_max: f64, points: usize, steps: usize) -> Result<f64, SpecError> {
    SpecError::from_diagnostics(spec.diagnostics())?;
    if !(y_max > spec.y0) || points < 4 || steps < 1 {
        return Err(SpecError::Oracle("grid must cover y0 with at least 4 intervals".into()));
    }
    let c = spec.coefficients();
    let n = points + 1;
    let h = y_max / points as f64;
    let dt = spec.time / steps as f64;
    let ys: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    // L g = lo g_{i-1} + di g_i + up g_{i+1}.
    let mut lo = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n];
    for i in 0..n {
        let y = ys[i];
        let a = c.a_tilde(y);
        let dif = 0.5 * spec.beta_bar * spec.beta_bar * y;
        di[i] = -c.r_tilde(y);
        if i == 0 {
            di[i] -= a / h;
            up[i] = a / h;
        } else if i == n - 1 {
            di[i] += a / h;
            lo[i] = -a / h;
        } else {
            lo[i] = -a / (2.0 * h) + dif / (h * h);
            di[i] += -2.0 * dif / (h * h);
            up[i] = a / (2.0 * h) + dif / (h * h);
        }
    }
    let source = |g: f64| -> f64 {
        if c.exponent == 0.0 {
            c.source
        } else {
            c.source * g.max(1e-12).powf(c.exponent)
        }
    };
    let mut g = vec![1.0; n];
    let mut prev_src: Option<Vec<f64>> = None;
    let (mut a, mut b, mut cc, mut rhs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..steps {
        let src: Vec<f64> = g.iter().map(|&v| source(v)).collect();
        for i in 0..n {
            let mut lg = di[i] * g[i];
            if i > 0 {
                lg += lo[i] * g[i - 1];
            }
            if i + 1 < n {
                lg += up[i] * g[i + 1];
            }
            let s = match &prev_src {
                Some(p) => 1.5 * src[i] - 0.5 * p[i],
                None => src[i],
            };
            rhs[i] = g[i] + 0.5 * dt * lg + dt * s;
            a[i] = -0.5 * dt * lo[i];
            b[i] = 1.0 - 0.5 * dt * di[i];
            cc[i] = -0.5 * dt * up[i];
        }
        g = thomas(&a, &b, &cc, &rhs)?;
        prev_src = Some(src);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(SpecError::Oracle("PDE solution is not finite".into()));
    }
    let pos = spec.y0 / h;
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    Ok(g[i] * (1.0 - w) + g[i + 1] * w)
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>, SpecError> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut den = b[0];
    if den == 0.0 {
        return Err(SpecError::Oracle("singular tridiagonal system".into()));
    }
    cp[0] = c[0] / den;
    dp[0] = d[0] / den;
    for i in 1..n {
        den = b[i] - a[i] * cp[i - 1];
        if den == 0.0 {
            return Err(SpecError::Oracle("singular tridiagonal system".into()));
        }
        cp[i] = c[i] / den;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / den;
    }
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

/// `g(0, y0)` with a grid-doubling convergence check.
pub fn heston_pde_oracle(spec: &HestonSpec, grid: PdeGrid) -> Result<PdeSolution, SpecError> {
    let coarse = solve_heston_pde(spec, grid.y_max, grid.points, grid.steps)?;
    let value = solve_heston_pde(spec, grid.y_max, 2 * grid.points, 2 * grid.steps)?;
    let change = (value - coarse).abs();
    if change > grid.tolerance {
        return Err(SpecError::Oracle(format!(
            "grid doubling changed g(0, y0) by {change:.3e} (> {:.1e}); refine the grid",
            grid.tolerance
        )));
    }
    Ok(PdeSolution { value, coarse, change })
}

/// Closed form when `r~` is constant (`lambda_bar = 0`):
/// `h = g^(1-e)` solves `h' = (1-e)(c_s - r~ h)`.
pub fn heston_constant_rate_value(spec: &HestonSpec) -> f64 {
    let c = spec.coefficients();
    let r = c.r0;
    let e = c.exponent;
    let h = c.source / r + (1.0 - c.source / r) * (-(1.0 - e) * r * spec.time).exp();
    h.powf(1.0 / (1.0 - e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_constants() {
        let c = HestonSpec::default().coefficients();
        assert!((c.k - 8.0 / 7.0).abs() < 1e-12);
        assert!((c.theta - 1.0 / 7.0).abs() < 1e-12);
        assert!(c.exponent.abs() < 1e-12);
        assert!((HestonSpec::solvable_psi(2.0, -0.5) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn pde_terminal_slice_is_one() {
        let spec = HestonSpec {
            time: 1e-9,
            ..HestonSpec::default()
        };
        let g = solve_heston_pde(&spec, 1.0, 50, 1).unwrap();
        assert!((g - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pde_matches_constant_rate_closed_form() {
        for psi in [0.125, 0.5] {
            let spec = HestonSpec {
                lambda_bar: Some(0.0),
                beta_bar: 0.0,
                psi,
                time: 2.0,
                ..HestonSpec::default()
            };
            let exact = heston_constant_rate_value(&spec);
            let g = solve_heston_pde(&spec, 1.0, 100, 2000).unwrap();
            assert!((g - exact).abs() < 1e-6, "psi {psi}: {g} vs {exact}");
        }
    }
}
