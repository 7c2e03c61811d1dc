//! Benchmark problems and their independent reference solutions.

pub mod dsice;
pub mod fbsde;
pub mod growth;
pub mod heston;
pub mod lq;

use thiserror::Error;

use crate::autodiff::{Activation, DenseNetwork, Tensor};
use crate::policy::{PolicyLayout, PolicyStack};
use crate::simulate::CounterRng;

pub use dsice::{DsiceProblem, DsiceSpec};
pub use fbsde::{FbsdeProblem, FbsdeSpec};
pub use growth::{GrowthProblem, GrowthSpec};
pub use heston::{HestonProblem, HestonSpec};
pub use lq::{lq_optimal_value, LqProblem, LqSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("invalid problem specification: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("reference solution failed: {0}")]
    Oracle(String),
}

impl SpecError {
    pub(crate) fn from_diagnostics(d: Vec<String>) -> Result<(), SpecError> {
        if d.is_empty() {
            Ok(())
        } else {
            Err(SpecError::Invalid(d))
        }
    }
}

pub(crate) fn check(d: &mut Vec<String>, ok: bool, msg: &str) {
    if !ok {
        d.push(msg.to_string());
    }
}

/// Transpose of a row-major nested matrix as a tensor.
pub(crate) fn transposed(m: &[Vec<f64>]) -> Tensor {
    let rows = m.len();
    let cols = m.first().map(|r| r.len()).unwrap_or(0);
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            data[j * rows + i] = m[i][j];
        }
    }
    Tensor::matrix(cols, rows, data).unwrap()
}

/// Gaussian elimination with partial pivoting; `None` when singular.
pub(crate) fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A stack that ignores the state: zero network weights with the given
/// raw output bias per period (`per_period[t]` for `t >= 1`) and raw `c0`.
pub fn constant_stack(layout: PolicyLayout, c0: Vec<f64>, per_period: &[Vec<f64>]) -> Result<PolicyStack, SpecError> {
    let err = |e: &dyn std::fmt::Display| SpecError::Oracle(e.to_string());
    if per_period.len() + 1 != layout.horizon {
        return Err(SpecError::Oracle(format!(
            "need {} per-period biases, got {}",
            layout.horizon - 1,
            per_period.len()
        )));
    }
    let mut rng = CounterRng::from_seed(0);
    let mut nets = Vec::with_capacity(per_period.len());
    for bias in per_period {
        let mut net = DenseNetwork::init(
            layout.input.len,
            &layout.hidden,
            layout.control_dim,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )
        .map_err(|e| err(&e))?;
        let mut flat = vec![0.0; net.num_params()];
        let k = flat.len();
        if bias.len() != layout.control_dim {
            return Err(SpecError::Oracle("bias width differs from control width".into()));
        }
        flat[k - bias.len()..].copy_from_slice(bias);
        net.set_flat(&flat).map_err(|e| err(&e))?;
        nets.push(net);
    }
    PolicyStack::from_parts(layout, c0, nets).map_err(|e| err(&e))
}
