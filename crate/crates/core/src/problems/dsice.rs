//! Climate-economy planner problem without tipping events.
//!
//! State `(K, M_AT, M_UO, M_LO, T_AT, T_OC, zeta, chi)`, controls
//! `(mu, p)` in the open unit box: `mu` is the emission control rate and
//! `C = p (1 - theta_1 mu^theta_2) Y`. Years are periods.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{check, constant_stack, logit, SpecError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::policy::{HeadSpec, InputMap, PolicyLayout, PolicyStack};
use crate::simulate::{simulate_full, ControlProblem, Purpose, SimError, StreamKey, TrajectoryBatch};

/// Finite-state Markov chain for productivity: `values[chi]` is `zeta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductivityChain {
    pub values: Vec<f64>,
    /// Row-stochastic transition matrix over chain states.
    pub transition: Vec<Vec<f64>>,
    pub initial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsiceSpec {
    pub horizon: usize,
    /// Years simulated after the horizon for the terminal value.
    pub tail: usize,
    pub phi12: f64,
    pub phi21: f64,
    pub phi23: f64,
    pub phi32: f64,
    /// Heat exchange rates of the temperature matrix.
    pub heat12: f64,
    pub heat21: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub eta: f64,
    pub m_star: f64,
    pub m0: [f64; 3],
    pub t0: [f64; 2],
    pub k0: f64,
    pub alpha: f64,
    pub a0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub sigma0: f64,
    pub theta2: f64,
    pub delta_k: f64,
    pub psi: f64,
    pub beta: f64,
    /// Land emissions at year 0, falling linearly to zero.
    pub land0: f64,
    pub land_years: f64,
    /// Consumption share of output after the horizon.
    pub tail_consumption: f64,
    pub chain: Option<ProductivityChain>,
    pub hidden: Option<Vec<usize>>,
}

impl Default for DsiceSpec {
    fn default() -> Self {
        Self {
            horizon: 600,
            tail: 400,
            phi12: 0.0189288,
            phi21: 0.0097213,
            phi23: 0.0085865,
            phi32: 0.0003119,
            heat12: 0.01,
            heat21: 0.0048,
            xi1: 0.037,
            xi2: 0.047,
            eta: 3.8,
            m_star: 596.4,
            m0: [808.9, 1255.0, 18365.0],
            t0: [0.7307, 0.0068],
            k0: 137.0,
            alpha: 0.3,
            a0: 0.02722,
            alpha1: 0.0092,
            alpha2: 0.001,
            pi1: 0.0,
            pi2: 0.0028388,
            sigma0: 0.13418,
            theta2: 2.8,
            delta_k: 0.1,
            psi: 1.5,
            beta: (-0.015f64).exp(),
            land0: 1.1,
            land_years: 100.0,
            tail_consumption: 0.78,
            chain: None,
            hidden: None,
        }
    }
}

impl DsiceSpec {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        check(&mut d, self.horizon >= 1, "horizon must be at least 1");
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check(
            &mut d,
            [self.phi12, self.phi21, self.phi23, self.phi32].into_iter().all(unit),
            "carbon diffusion rates must lie in [0, 1]",
        );
        check(
            &mut d,
            self.phi21 + self.phi23 <= 1.0,
            "phi21 + phi23 must not exceed 1",
        );
        check(
            &mut d,
            [self.heat12, self.heat21, self.xi2].into_iter().all(unit) && self.heat21 + self.xi2 <= 1.0,
            "heat rates must lie in [0, 1]",
        );
        check(
            &mut d,
            self.m_star > 0.0 && self.m0.iter().all(|&m| m > 0.0),
            "carbon masses must be positive",
        );
        check(&mut d, self.k0 > 0.0, "k0 must be positive");
        check(&mut d, self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)");
        check(
            &mut d,
            self.a0 > 0.0 && self.alpha2 > 0.0,
            "a0 and alpha2 must be positive",
        );
        check(
            &mut d,
            self.pi1 >= 0.0 && self.pi2 >= 0.0,
            "damage coefficients must be non-negative",
        );
        check(
            &mut d,
            self.sigma0 >= 0.0 && self.theta2 > 1.0,
            "need sigma0 >= 0 and theta2 > 1",
        );
        check(&mut d, unit(self.delta_k), "delta_k must lie in [0, 1]");
        check(
            &mut d,
            self.psi > 0.0 && self.psi != 1.0,
            "psi must be positive and not 1",
        );
        check(&mut d, self.beta > 0.0 && self.beta < 1.0, "beta must lie in (0, 1)");
        check(
            &mut d,
            self.land0 >= 0.0 && self.land_years > 0.0,
            "land emissions path invalid",
        );
        check(
            &mut d,
            self.tail_consumption > 0.0 && self.tail_consumption < 1.0,
            "tail_consumption must lie in (0, 1)",
        );
        if let Some(c) = &self.chain {
            let k = c.values.len();
            check(
                &mut d,
                k >= 1 && c.initial < k,
                "chain needs values and a valid initial state",
            );
            check(
                &mut d,
                c.values.iter().all(|&v| v > 0.0),
                "chain values must be positive",
            );
            check(
                &mut d,
                c.transition.len() == k
                    && c.transition.iter().all(|r| {
                        r.len() == k && r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9
                    }),
                "chain transition must be a row-stochastic k x k matrix",
            );
        }
        d
    }

    pub fn population(&self, t: f64) -> f64 {
        6514.0 * (-0.035 * t).exp() + 8600.0 * (1.0 - (-0.035 * t).exp())
    }

    pub fn productivity(&self, t: f64) -> f64 {
        self.a0 * (self.alpha1 * (1.0 - (-self.alpha2 * t).exp()) / self.alpha2).exp()
    }

    pub fn carbon_intensity(&self, t: f64) -> f64 {
        self.sigma0 * (-0.0073 * (1.0 - (-0.003 * t).exp()) / 0.003).exp()
    }

    pub fn abatement_scale(&self, t: f64) -> f64 {
        1.17 * self.carbon_intensity(t) * (1.0 + (-0.005 * t).exp()) / (2.0 * self.theta2)
    }

    pub fn external_forcing(&self, t: f64) -> f64 {
        if t <= 100.0 {
            -0.06 + 0.0036 * t
        } else {
            0.3
        }
    }

    pub fn land_emissions(&self, t: f64) -> f64 {
        (self.land0 * (1.0 - t / self.land_years)).max(0.0)
    }

    /// `Phi_M` in row-major order, so `M' = Phi_M M`.
    pub fn carbon_matrix(&self) -> [[f64; 3]; 3] {
        [
            [1.0 - self.phi12, self.phi21, 0.0],
            [self.phi12, 1.0 - self.phi21 - self.phi23, self.phi32],
            [0.0, self.phi23, 1.0 - self.phi32],
        ]
    }

    pub fn temperature_matrix(&self) -> [[f64; 2]; 2] {
        [
            [1.0 - self.heat21 - self.xi2, self.heat12],
            [self.heat21, 1.0 - self.heat12],
        ]
    }

    fn utility_exponent(&self) -> f64 {
        1.0 - 1.0 / self.psi
    }
}

/// One carbon step `Phi_M m + (e, 0, 0)`.
pub fn carbon_step(spec: &DsiceSpec, m: [f64; 3], e: f64) -> [f64; 3] {
    let p = spec.carbon_matrix();
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|j| p[i][j] * m[j]).sum();
    }
    out[0] += e;
    out
}

/// Plain-number accounting of one period, for checks and reporting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodAccount {
    /// Output before damages.
    pub gross: f64,
    /// Output net of damages.
    pub output: f64,
    pub abatement_cost: f64,
    pub consumption: f64,
    pub investment: f64,
    pub industrial_emissions: f64,
}

/// Accounting at year `t` for one state row and control `(mu, p)`.
pub fn period_account(spec: &DsiceSpec, t: usize, state: &[f64], mu: f64, p: f64) -> PeriodAccount {
    let tf = t as f64;
    let (k, t_at, zeta) = (state[0], state[4], state[6]);
    let gross = zeta * spec.productivity(tf) * k.powf(spec.alpha) * spec.population(tf).powf(1.0 - spec.alpha);
    let output = gross / (1.0 + spec.pi1 * t_at + spec.pi2 * t_at * t_at);
    let share = spec.abatement_scale(tf) * mu.powf(spec.theta2);
    let consumption = p * (1.0 - share) * output;
    PeriodAccount {
        gross,
        output,
        abatement_cost: share * output,
        consumption,
        investment: (1.0 - share) * output - consumption,
        industrial_emissions: spec.carbon_intensity(tf) * (1.0 - mu) * gross,
    }
}

#[derive(Clone, Debug)]
pub struct DsiceProblem {
    spec: DsiceSpec,
    carbon_t: Tensor,
    temp_t: Tensor,
}

impl DsiceProblem {
    pub fn new(spec: DsiceSpec) -> Result<Self, SpecError> {
        SpecError::from_diagnostics(spec.diagnostics())?;
        let pm = spec.carbon_matrix();
        let pt = spec.temperature_matrix();
        let carbon_t = Tensor::matrix(3, 3, (0..9).map(|k| pm[k % 3][k / 3]).collect()).unwrap();
        let temp_t = Tensor::matrix(2, 2, (0..4).map(|k| pt[k % 2][k / 2]).collect()).unwrap();
        Ok(Self { spec, carbon_t, temp_t })
    }

    pub fn spec(&self) -> &DsiceSpec {
        &self.spec
    }

    /// Gross and net output `[r, 1]` with productivity and population
    /// taken at year `base`.
    fn output(&self, g: &mut Graph, base: f64, state: NodeId) -> Result<(NodeId, NodeId), AutodiffError> {
        let s = &self.spec;
        let k = g.slice_cols(state, 0, 1)?;
        let zeta = g.slice_cols(state, 6, 1)?;
        let t_at = g.slice_cols(state, 4, 1)?;
        let kp = g.powf(k, s.alpha);
        let scale = s.productivity(base) * s.population(base).powf(1.0 - s.alpha);
        let gross = g.mul(kp, zeta)?;
        let gross = g.scale(gross, scale);
        let damage = if s.pi1 == 0.0 && s.pi2 == 0.0 {
            None
        } else {
            let lin = g.scale(t_at, s.pi1);
            let sq = g.square(t_at);
            let sq = g.scale(sq, s.pi2);
            let d = g.add(lin, sq)?;
            Some(g.offset(d, 1.0))
        };
        let output = match damage {
            Some(d) => g.div(gross, d)?,
            None => gross,
        };
        Ok((gross, output))
    }

    /// Carbon and temperature update given total emissions `[r, 1]` (or
    /// none) at year `year`. Returns `(M', T')`.
    fn climate(
        &self,
        g: &mut Graph,
        year: f64,
        state: NodeId,
        emissions: Option<NodeId>,
    ) -> Result<(NodeId, NodeId), AutodiffError> {
        let s = &self.spec;
        let m = g.slice_cols(state, 1, 3)?;
        let temp = g.slice_cols(state, 4, 2)?;
        let pm = g.input(self.carbon_t.clone());
        let mut m_next = g.matmul(m, pm)?;
        if let Some(e) = emissions {
            let rows = g.value(state).rows();
            let zeros = g.input(Tensor::zeros(rows, 2));
            let push = g.concat_cols(&[e, zeros])?;
            m_next = g.add(m_next, push)?;
        }
        let m_at = g.slice_cols(state, 1, 1)?;
        let ratio = g.scale(m_at, 1.0 / s.m_star);
        let f = g.ln(ratio);
        let f = g.scale(f, s.eta / std::f64::consts::LN_2);
        let f = g.offset(f, s.external_forcing(year));
        let heat = g.scale(f, s.xi1);
        let pt = g.input(self.temp_t.clone());
        let t_next = g.matmul(temp, pt)?;
        let rows = g.value(state).rows();
        let zeros = g.input(Tensor::zeros(rows, 1));
        let push = g.concat_cols(&[heat, zeros])?;
        let t_next = g.add(t_next, push)?;
        Ok((m_next, t_next))
    }

    fn flow_utility(&self, g: &mut Graph, consumption: NodeId, pop: f64) -> NodeId {
        let e = self.spec.utility_exponent();
        let per = g.scale(consumption, 1.0 / pop);
        let u = g.powf(per, e);
        g.scale(u, pop / e)
    }

    /// Abatement share `theta_1 mu^theta_2` and consumption for period `t`.
    fn allocation(
        &self,
        g: &mut Graph,
        t: usize,
        control: NodeId,
        output: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId), AutodiffError> {
        let s = &self.spec;
        let mu = g.slice_cols(control, 0, 1)?;
        let p = g.slice_cols(control, 1, 1)?;
        let share = g.powf(mu, s.theta2);
        let share = g.scale(share, s.abatement_scale(t as f64));
        let keep = g.neg(share);
        let keep = g.offset(keep, 1.0);
        let net = g.mul(keep, output)?;
        let c = g.mul(p, net)?;
        Ok((mu, net, c))
    }

    /// `V_T`: the deterministic tail from the state at year `T`.
    fn terminal_value(&self, g: &mut Graph, state: NodeId) -> Result<NodeId, AutodiffError> {
        let s = &self.spec;
        let base = s.horizon as f64;
        let pop = s.population(base);
        let zeta = g.slice_cols(state, 6, 2)?;
        let mut st = state;
        let mut total: Option<NodeId> = None;
        for k in 0..=s.tail {
            let year = base + k as f64;
            let (_, y) = self.output(g, base, st)?;
            let c = g.scale(y, s.tail_consumption);
            let u = self.flow_utility(g, c, pop);
            let u = g.scale(u, s.beta.powi(k as i32));
            total = Some(match total {
                Some(acc) => g.add(acc, u)?,
                None => u,
            });
            if k == s.tail {
                break;
            }
            let kap = g.slice_cols(st, 0, 1)?;
            let kap = g.scale(kap, 1.0 - s.delta_k);
            let inv = g.scale(y, 1.0 - s.tail_consumption);
            let k_next = g.add(kap, inv)?;
            let (m_next, t_next) = self.climate(g, year, st, None)?;
            st = g.concat_cols(&[k_next, m_next, t_next, zeta])?;
        }
        Ok(total.unwrap())
    }
}

impl ControlProblem for DsiceProblem {
    fn name(&self) -> &str {
        "dsice"
    }

    fn state_dim(&self) -> usize {
        8
    }

    fn shock_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        let s = &self.spec;
        let (zeta, chi) = match &s.chain {
            Some(c) => (c.values[c.initial], c.initial as f64),
            None => (1.0, 0.0),
        };
        vec![s.k0, s.m0[0], s.m0[1], s.m0[2], s.t0[0], s.t0[1], zeta, chi]
    }

    fn policy_layout(&self) -> PolicyLayout {
        let s = &self.spec;
        let head = HeadSpec::SigmoidBox {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let start = [0.0, logit(s.tail_consumption)];
        PolicyLayout {
            horizon: s.horizon,
            state_dim: 8,
            control_dim0: 2,
            control_dim: 2,
            head0: head.clone(),
            head,
            input: InputMap {
                start: 0,
                len: 8,
                log: false,
                shift: vec![s.k0, s.m0[0], s.m0[1], s.m0[2], s.t0[0], s.t0[1], 1.0, 0.0],
                scale: vec![100.0, 200.0, 100.0, 100.0, 1.0, 0.5, 1.0, 1.0],
            },
            hidden: s.hidden.clone().unwrap_or_else(|| vec![100; 5]),
            c0_init: start.to_vec(),
            output_bias: Some(start.to_vec()),
        }
    }

    fn sample_shock(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = rng.random::<f64>();
    }

    fn transition(
        &self,
        g: &mut Graph,
        t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let s = &self.spec;
        let year = t as f64;
        let (gross, output) = self.output(g, year, state)?;
        let (mu, net, c) = self.allocation(g, t, control, output)?;
        let k = g.slice_cols(state, 0, 1)?;
        let k = g.scale(k, 1.0 - s.delta_k);
        let inv = g.sub(net, c)?;
        let k_next = g.add(k, inv)?;
        let clean = g.neg(mu);
        let clean = g.offset(clean, 1.0);
        let e = g.mul(clean, gross)?;
        let e = g.scale(e, s.carbon_intensity(year));
        let e = g.offset(e, s.land_emissions(year));
        let (m_next, t_next) = self.climate(g, year, state, Some(e))?;
        let exo = match &s.chain {
            None => g.slice_cols(state, 6, 2)?,
            Some(chain) => {
                let st = g.value(state);
                let u = g.value(shock);
                let mut data = Vec::with_capacity(2 * st.rows());
                for r in 0..st.rows() {
                    let from = st.get(r, 7) as usize;
                    let row = &chain.transition[from];
                    let draw = u.get(r, 0);
                    let mut acc = 0.0;
                    let mut to = row.len() - 1;
                    for (j, p) in row.iter().enumerate() {
                        acc += p;
                        if draw < acc {
                            to = j;
                            break;
                        }
                    }
                    data.push(chain.values[to]);
                    data.push(to as f64);
                }
                g.input(Tensor::matrix(st.rows(), 2, data).unwrap())
            }
        };
        g.concat_cols(&[k_next, m_next, t_next, exo])
    }

    fn period_utility(
        &self,
        g: &mut Graph,
        t: usize,
        state: NodeId,
        control: NodeId,
        next: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let s = &self.spec;
        let year = t as f64;
        let (_, output) = self.output(g, year, state)?;
        let (_, _, c) = self.allocation(g, t, control, output)?;
        let u = self.flow_utility(g, c, s.population(year));
        let u = g.scale(u, s.beta.powi(t as i32));
        if t + 1 < s.horizon {
            return Ok(u);
        }
        let v = self.terminal_value(g, next)?;
        let v = g.scale(v, s.beta.powi(s.horizon as i32));
        g.add(u, v)
    }

    fn tracked_scalars(&self, stack: &PolicyStack) -> Vec<(String, f64)> {
        let c = stack.layout().head0.clone();
        let raw = stack.c0();
        let mut out = Vec::new();
        if let HeadSpec::SigmoidBox { .. } = c {
            out.push(("mu0".to_string(), crate::autodiff::sigmoid(raw[0])));
            out.push(("p0".to_string(), crate::autodiff::sigmoid(raw[1])));
        }
        out
    }
}

/// Stack playing the constant control `(mu, p)` in every period.
pub fn dsice_constant_stack(problem: &DsiceProblem, mu: f64, p: f64) -> Result<PolicyStack, SpecError> {
    if !(mu > 0.0 && mu < 1.0 && p > 0.0 && p < 1.0) {
        return Err(SpecError::Oracle("constant controls must lie in (0, 1)".into()));
    }
    let raw = vec![logit(mu), logit(p)];
    let layout = problem.policy_layout();
    let periods = vec![raw.clone(); layout.horizon - 1];
    constant_stack(layout, raw, &periods)
}

/// Objective of one path under a constant `(mu, p)` policy, terminal
/// value included. Without a productivity chain the path is deterministic.
pub fn dsice_reference_rollout(problem: &DsiceProblem, mu: f64, p: f64) -> Result<f64, SimError> {
    let stack = dsice_constant_stack(problem, mu, p).map_err(|e| SimError::Input(e.to_string()))?;
    let key = StreamKey::new(0, Purpose::Oracle, 0, 0, 0);
    let batch = simulate_full(problem, &stack, 1, key)?;
    let v = crate::simulate::path_values(problem, &batch, crate::simulate::ObjectiveMode::Separable)?;
    Ok(v[0])
}

/// `points x points` constant controls: `mu` at cell midpoints of
/// `(0, 1)`, `p` at cell midpoints of `(0.5, 0.9)`.
pub fn dsice_constant_grid(points: usize) -> Vec<(f64, f64)> {
    let mid = |i: usize| (i as f64 + 0.5) / points as f64;
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            out.push((mid(i), 0.5 + 0.4 * mid(j)));
        }
    }
    out
}

/// Best [`dsice_reference_rollout`] over [`dsice_constant_grid`] as
/// `(mu, p, value)`.
pub fn dsice_best_constant(problem: &DsiceProblem, points: usize) -> Result<(f64, f64, f64), SimError> {
    if points == 0 {
        return Err(SimError::Input("grid needs at least one point".into()));
    }
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for (mu, p) in dsice_constant_grid(points) {
        let v = dsice_reference_rollout(problem, mu, p)?;
        if v > best.2 {
            best = (mu, p, v);
        }
    }
    Ok(best)
}

/// Checks consumption feasibility `0 < C < (1 - theta_1 mu^theta_2) Y`,
/// positive capital and non-negative carbon on every path and period.
pub fn check_dsice_invariants(problem: &DsiceProblem, batch: &TrajectoryBatch) -> Result<(), String> {
    let spec = problem.spec();
    for (k, (states, controls)) in batch.states.iter().zip(&batch.controls).enumerate() {
        let t = batch.start + k;
        for r in 0..states.rows() {
            let st = states.row_slice(r);
            let (mu, p) = (controls.get(r, 0), controls.get(r, 1));
            let acc = period_account(spec, t, st, mu, p);
            let cap = acc.output - acc.abatement_cost;
            if !(acc.consumption > 0.0 && acc.consumption < cap) {
                return Err(format!(
                    "path {r}, year {t}: consumption {} outside (0, {cap})",
                    acc.consumption
                ));
            }
            if !(0.0..=1.0).contains(&mu) {
                return Err(format!("path {r}, year {t}: mu {mu} outside [0, 1]"));
            }
        }
    }
    for (k, states) in batch.states.iter().enumerate() {
        for r in 0..states.rows() {
            let st = states.row_slice(r);
            if !(st[0] > 0.0) {
                return Err(format!(
                    "path {r}, year {}: capital {} not positive",
                    batch.start + k,
                    st[0]
                ));
            }
            if st[1..4].iter().any(|&m| !(m >= 0.0)) {
                return Err(format!("path {r}, year {}: negative carbon mass", batch.start + k));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_carbon_matrix_adds_emissions() {
        let spec = DsiceSpec {
            phi12: 0.0,
            phi21: 0.0,
            phi23: 0.0,
            phi32: 0.0,
            ..DsiceSpec::default()
        };
        let m = carbon_step(&spec, [800.0, 1200.0, 18000.0], 5.0);
        assert_eq!(m, [805.0, 1200.0, 18000.0]);
    }

    #[test]
    fn full_abatement_has_no_industrial_emissions() {
        let spec = DsiceSpec::default();
        let p = DsiceProblem::new(spec.clone()).unwrap();
        let acc = period_account(&spec, 3, &p.initial_state(), 1.0, 0.7);
        assert_eq!(acc.industrial_emissions, 0.0);
    }

    #[test]
    fn carbon_matrix_columns_conserve_mass() {
        let pm = DsiceSpec::default().carbon_matrix();
        for j in 0..3 {
            let s: f64 = (0..3).map(|i| pm[i][j]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exogenous_paths() {
        let s = DsiceSpec::default();
        assert_eq!(s.population(0.0), 6514.0);
        assert!((s.external_forcing(100.0) - 0.3).abs() < 1e-12);
        assert_eq!(s.land_emissions(100.0), 0.0);
        assert!((s.land_emissions(50.0) - 0.55).abs() < 1e-12);
    }
}
