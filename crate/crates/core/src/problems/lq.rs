//! Linear-quadratic family: `s' = A s + B c + sd * z`, reward
//! `-(s'^T Q s' + c^T R c)` with diagonal `Q`, `R`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check, solve_dense, transposed, SpecError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::policy::{HeadSpec, InputMap, PolicyLayout};
use crate::simulate::ControlProblem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: usize,
    /// `state_dim x state_dim`, row-major rows.
    pub a: Vec<Vec<f64>>,
    /// `state_dim x control_dim`.
    pub b: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub noise_sd: f64,
    pub s0: Vec<f64>,
    pub hidden: Option<Vec<usize>>,
}

impl Default for LqSpec {
    fn default() -> Self {
        Self::diagonal(2, 2, 4, 0.9, 0.1)
    }
}

impl LqSpec {
    /// `A = a I`, `B = I`, `Q = I`, `R = r I`, unit start state.
    pub fn diagonal(state_dim: usize, control_dim: usize, horizon: usize, a: f64, r: f64) -> Self {
        let eye = |rows: usize, cols: usize, v: f64| {
            (0..rows)
                .map(|i| (0..cols).map(|j| if i == j { v } else { 0.0 }).collect())
                .collect()
        };
        Self {
            state_dim,
            control_dim,
            horizon,
            a: eye(state_dim, state_dim, a),
            b: eye(state_dim, control_dim, 1.0),
            q: vec![1.0; state_dim],
            r: vec![r; control_dim],
            noise_sd: 0.1,
            s0: vec![1.0; state_dim],
            hidden: None,
        }
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        let (n, k) = (self.state_dim, self.control_dim);
        check(
            &mut d,
            n >= 1 && k >= 1,
            "state and control dimensions must be positive",
        );
        check(&mut d, self.horizon >= 1, "horizon must be at least 1");
        check(
            &mut d,
            self.a.len() == n && self.a.iter().all(|r| r.len() == n),
            "A must be state_dim x state_dim",
        );
        check(
            &mut d,
            self.b.len() == n && self.b.iter().all(|r| r.len() == k),
            "B must be state_dim x control_dim",
        );
        check(&mut d, self.q.len() == n, "q must have state_dim entries");
        check(&mut d, self.r.len() == k, "r must have control_dim entries");
        check(&mut d, self.s0.len() == n, "s0 must have state_dim entries");
        check(&mut d, self.noise_sd >= 0.0, "noise_sd must be non-negative");
        d
    }
}

#[derive(Clone, Debug)]
pub struct LqProblem {
    spec: LqSpec,
    a_t: Tensor,
    b_t: Tensor,
}

impl LqProblem {
    pub fn new(spec: LqSpec) -> Result<Self, SpecError> {
        SpecError::from_diagnostics(spec.diagnostics())?;
        Ok(Self {
            a_t: transposed(&spec.a),
            b_t: transposed(&spec.b),
            spec,
        })
    }

    pub fn spec(&self) -> &LqSpec {
        &self.spec
    }
}

impl ControlProblem for LqProblem {
    fn name(&self) -> &str {
        "lq"
    }

    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn shock_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        self.spec.s0.clone()
    }

    fn policy_layout(&self) -> PolicyLayout {
        let s = &self.spec;
        PolicyLayout {
            horizon: s.horizon,
            state_dim: s.state_dim,
            control_dim0: s.control_dim,
            control_dim: s.control_dim,
            head0: HeadSpec::Unconstrained,
            head: HeadSpec::Unconstrained,
            input: InputMap::identity(0, s.state_dim),
            hidden: s
                .hidden
                .clone()
                .unwrap_or_else(|| PolicyLayout::default_hidden(s.state_dim)),
            c0_init: vec![0.0; s.control_dim],
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
        _t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let a = g.input(self.a_t.clone());
        let b = g.input(self.b_t.clone());
        let drift = g.matmul(state, a)?;
        let push = g.matmul(control, b)?;
        let next = g.add(drift, push)?;
        if self.spec.noise_sd == 0.0 {
            return Ok(next);
        }
        let noise = g.scale(shock, self.spec.noise_sd);
        g.add(next, noise)
    }

    fn period_utility(
        &self,
        g: &mut Graph,
        _t: usize,
        _state: NodeId,
        control: NodeId,
        next: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let q = g.input(Tensor::row(&self.spec.q));
        let r = g.input(Tensor::row(&self.spec.r));
        let s2 = g.square(next);
        let sq = g.mul(s2, q)?;
        let c2 = g.square(control);
        let cr = g.mul(c2, r)?;
        let both = g.concat_cols(&[sq, cr])?;
        let cost = g.sum_cols(both)?;
        Ok(g.neg(cost))
    }
}

/// Optimal expected reward from `s0` by the backward Riccati recursion.
///
/// With `M = Q + P'`: `P = A^T M A - A^T M B (R + B^T M B)^{-1} B^T M A`
/// and the constant picks up `sd^2 tr M` each period.
pub fn lq_optimal_value(spec: &LqSpec) -> Result<f64, SpecError> {
    SpecError::from_diagnostics(spec.diagnostics())?;
    let (n, k) = (spec.state_dim, spec.control_dim);
    let (a, b) = (&spec.a, &spec.b);
    let mut p = vec![vec![0.0; n]; n];
    let mut constant = 0.0;
    for _ in 0..spec.horizon {
        let mut m = p.clone();
        for i in 0..n {
            m[i][i] += spec.q[i];
        }
        constant += spec.noise_sd * spec.noise_sd * (0..n).map(|i| m[i][i]).sum::<f64>();
        let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>, tx: bool| -> Vec<Vec<f64>> {
            let rows = if tx { x[0].len() } else { x.len() };
            let inner = y.len();
            (0..rows)
                .map(|i| {
                    (0..y[0].len())
                        .map(|j| (0..inner).map(|l| if tx { x[l][i] } else { x[i][l] } * y[l][j]).sum())
                        .collect()
                })
                .collect()
        };
        let ma = mul(&m, a, false);
        let mb = mul(&m, b, false);
        let ata = mul(a, &ma, true);
        let btma = mul(b, &ma, true);
        let mut gram = mul(b, &mb, true);
        for i in 0..k {
            gram[i][i] += spec.r[i];
        }
        // Gain columns: (R + B^T M B)^{-1} B^T M A.
        let mut gain = vec![vec![0.0; n]; k];
        for j in 0..n {
            let col: Vec<f64> = (0..k).map(|i| btma[i][j]).collect();
            let x =
                solve_dense(gram.clone(), col).ok_or_else(|| SpecError::Oracle("R + B^T M B is singular".into()))?;
            for i in 0..k {
                gain[i][j] = x[i];
            }
        }
        let correction = mul(&btma, &gain, true);
        p = (0..n)
            .map(|i| (0..n).map(|j| ata[i][j] - correction[i][j]).collect())
            .collect();
    }
    let s = &spec.s0;
    let quad: f64 = (0..n).map(|i| (0..n).map(|j| s[i] * p[i][j] * s[j]).sum::<f64>()).sum();
    Ok(-(quad + constant))
}
