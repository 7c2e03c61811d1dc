//! Path simulation under a policy stack, objective estimation, and the
//! differentiable suffix objective used by each period update.

mod rng;

use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use thiserror::Error;

pub use rng::{mix64, CounterRng, Purpose, StreamKey};

use crate::autodiff::{tree_sum, AutodiffError, Graph, NodeId, Tensor};
use crate::policy::{PolicyError, PolicyLayout, PolicyStack};

/// Paths per graph when simulating without gradients.
pub const SIM_CHUNK: usize = 256;
/// Paths per graph when differentiating.
pub const GRAD_CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state at period {period}, path {path}")]
    PathBlowup { period: usize, path: usize },
    #[error("non-finite utility on path {path}")]
    NonFiniteUtility { path: usize },
    #[error("invalid simulation input: {0}")]
    Input(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtilityKind {
    /// Sum of per-period rewards `u_{t+1}(s_{t+1}, s_t, c_t)`.
    TimeSeparable,
    /// One reward on the whole path.
    General,
}

/// A finite-horizon control problem written in graph operations.
///
/// Shocks must not depend on controls; transitions and utilities must be
/// differentiable in state and control.
pub trait ControlProblem: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn shock_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    fn policy_layout(&self) -> PolicyLayout;

    /// Draw `z_{t+1}` for one path into `out` (length `shock_dim`).
    fn sample_shock(&self, t: usize, rng: &mut dyn RngCore, out: &mut [f64]);

    /// `s_{t+1}` from `s_t [r, n_s]`, `c_t [r, n_c]` and `z_{t+1} [r, n_z]`.
    fn transition(
        &self,
        g: &mut Graph,
        t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError>;

    fn utility_kind(&self) -> UtilityKind {
        UtilityKind::TimeSeparable
    }

    /// Per-path reward `[r, 1]` for the step `t -> t+1`.
    fn period_utility(
        &self,
        _g: &mut Graph,
        _t: usize,
        _state: NodeId,
        _control: NodeId,
        _next: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        Err(AutodiffError::Usage(format!(
            "{} defines no per-period utility",
            self.name()
        )))
    }

    /// Per-path reward `[r, 1]` on a whole path: `states` has `T + 1`
    /// entries, `controls` has `T`. Defaults to the in-order sum of
    /// per-period utilities.
    fn path_utility(&self, g: &mut Graph, states: &[NodeId], controls: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let mut total: Option<NodeId> = None;
        for t in 0..controls.len() {
            let u = self.period_utility(g, t, states[t], controls[t], states[t + 1])?;
            total = Some(match total {
                Some(acc) => g.add(acc, u)?,
                None => u,
            });
        }
        total.ok_or_else(|| AutodiffError::Usage("empty path".into()))
    }

    /// True when the problem is naturally a minimization; the trainer
    /// always maximizes the negated objective and reports flip it back.
    fn minimizes(&self) -> bool {
        false
    }

    /// Named scalars worth reporting per sweep (e.g. the period-0 value).
    fn tracked_scalars(&self, _stack: &PolicyStack) -> Vec<(String, f64)> {
        Vec::new()
    }
}

/// How a path's objective is assembled from its rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Per-period utilities, so prefix terms drop out of suffix updates.
    Separable,
    /// Whole-path utility on the spliced path.
    General,
}

impl ObjectiveMode {
    pub fn for_problem(problem: &dyn ControlProblem) -> Self {
        match problem.utility_kind() {
            UtilityKind::TimeSeparable => ObjectiveMode::Separable,
            UtilityKind::General => ObjectiveMode::General,
        }
    }
}

/// Simulated paths from period `start` to `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub start: usize,
    /// `states[k]` holds period `start + k`, shape `[N, n_s]`.
    pub states: Vec<Tensor>,
    /// `controls[k]` holds period `start + k`, up to `T - 1`.
    pub controls: Vec<Tensor>,
    /// `[N, 1]` per period when utilities were recorded.
    pub utilities: Vec<Tensor>,
    pub stream: StreamKey,
    pub stack_fingerprint: u64,
}

impl TrajectoryBatch {
    pub fn paths(&self) -> usize {
        self.states.first().map(|s| s.rows()).unwrap_or(0)
    }

    pub fn horizon(&self) -> usize {
        self.start + self.controls.len()
    }

    pub fn state(&self, t: usize) -> &Tensor {
        &self.states[t - self.start]
    }

    pub fn control(&self, t: usize) -> &Tensor {
        &self.controls[t - self.start]
    }

    /// Columnar dump: `path,t,s0..,c0..`; control cells are empty where
    /// the period has fewer controls or none (terminal period).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let ns = self.states.first().map(|s| s.cols()).unwrap_or(0);
        let nc = self.controls.iter().map(|c| c.cols()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..ns).map(|i| format!("s{i}")));
        header.extend((0..nc).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for p in 0..self.paths() {
            for (k, s) in self.states.iter().enumerate() {
                let mut rec = vec![p.to_string(), (self.start + k).to_string()];
                rec.extend(s.row_slice(p).iter().map(|v| v.to_string()));
                let c = self.controls.get(k).map(|c| c.row_slice(p)).unwrap_or(&[]);
                rec.extend((0..nc).map(|i| c.get(i).map(|v| v.to_string()).unwrap_or_default()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(N)`; `None` when `N < 2`.
    pub se: Option<f64>,
    pub n: usize,
}

impl ObjectiveEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let se = (n >= 2).then(|| {
            let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        });
        Self { mean, se, n }
    }
}

/// Shocks for `paths` over steps `t0..t1`, one `[r, n_z]` tensor per step.
pub fn draw_shocks(
    problem: &dyn ControlProblem,
    key: StreamKey,
    paths: std::ops::Range<usize>,
    t0: usize,
    t1: usize,
) -> Vec<Tensor> {
    let nz = problem.shock_dim();
    let rows = paths.len();
    (t0..t1)
        .map(|j| {
            let mut data = vec![0.0; rows * nz];
            for (r, p) in paths.clone().enumerate() {
                let mut rng = key.rng(p as u64, j as u64);
                problem.sample_shock(j, &mut rng, &mut data[r * nz..(r + 1) * nz]);
            }
            Tensor::matrix(rows, nz, data).unwrap()
        })
        .collect()
}

/// Graph nodes of one rollout from period `t0`.
pub(crate) struct Rollout {
    pub states: Vec<NodeId>,
    pub controls: Vec<NodeId>,
    pub utilities: Vec<NodeId>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn rollout(
    g: &mut Graph,
    problem: &dyn ControlProblem,
    stack: &PolicyStack,
    binding: &crate::policy::StackBinding,
    t0: usize,
    start: NodeId,
    shocks: &[Tensor],
    path_offset: usize,
    with_utilities: bool,
) -> Result<Rollout, SimError> {
    let horizon = problem.horizon();
    let mut out = Rollout {
        states: vec![start],
        controls: Vec::with_capacity(horizon - t0),
        utilities: Vec::new(),
    };
    let mut s = start;
    for t in t0..horizon {
        let c = stack.control(g, binding, t, s)?;
        let z = g.input(shocks[t - t0].clone());
        let next = problem.transition(g, t, s, c, z)?;
        if let Some(row) = g.value(next).data().iter().position(|v| !v.is_finite()) {
            return Err(SimError::PathBlowup {
                period: t + 1,
                path: path_offset + row / problem.state_dim(),
            });
        }
        if with_utilities {
            let u = problem.period_utility(g, t, s, c, next)?;
            out.utilities.push(u);
        }
        out.controls.push(c);
        out.states.push(next);
        s = next;
    }
    Ok(out)
}

fn check_start(problem: &dyn ControlProblem, states: &Tensor) -> Result<(), SimError> {
    if states.cols() != problem.state_dim() {
        return Err(SimError::Input(format!(
            "start states have {} columns, state dimension is {}",
            states.cols(),
            problem.state_dim()
        )));
    }
    if let Some(i) = states.data().iter().position(|v| !v.is_finite()) {
        return Err(SimError::Input(format!(
            "start state of path {} is not finite",
            i / states.cols()
        )));
    }
    Ok(())
}

/// `N` paths from `s_0` to `s_T`.
pub fn simulate_full(
    problem: &dyn ControlProblem,
    stack: &PolicyStack,
    n: usize,
    key: StreamKey,
) -> Result<TrajectoryBatch, SimError> {
    if n == 0 {
        return Err(SimError::Input("need at least one path".into()));
    }
    let s0 = problem.initial_state();
    let ns = s0.len();
    let mut data = Vec::with_capacity(n * ns);
    for _ in 0..n {
        data.extend_from_slice(&s0);
    }
    let starts = Tensor::matrix(n, ns, data)?;
    simulate_from(problem, stack, 0, &starts, key, 0)
}

/// Paths from period `t` starting at the given states. Path `i` uses the
/// substream of path index `i`, so feeding the period-`t` states of a
/// full batch with the same key reproduces that batch's tail.
pub fn simulate_suffix(
    problem: &dyn ControlProblem,
    stack: &PolicyStack,
    t: usize,
    start_states: &Tensor,
    key: StreamKey,
) -> Result<TrajectoryBatch, SimError> {
    if t >= problem.horizon() {
        return Err(SimError::Input(format!(
            "suffix start {t} must be below the horizon {}",
            problem.horizon()
        )));
    }
    simulate_from(problem, stack, t, start_states, key, 0)
}

pub(crate) fn simulate_from(
    problem: &dyn ControlProblem,
    stack: &PolicyStack,
    t0: usize,
    starts: &Tensor,
    key: StreamKey,
    path_offset: usize,
) -> Result<TrajectoryBatch, SimError> {
    check_start(problem, starts)?;
    let n = starts.rows();
    let horizon = problem.horizon();
    let with_u = problem.utility_kind() == UtilityKind::TimeSeparable;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(SIM_CHUNK).map(|a| (a, (a + SIM_CHUNK).min(n))).collect();
    type Parts = (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>);
    let parts: Vec<Result<Parts, SimError>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut g = Graph::new();
            let binding = stack.bind(&mut g, t0, None);
            let start = g.input(starts.slice_rows(a, b));
            let shocks = draw_shocks(problem, key, path_offset + a..path_offset + b, t0, horizon);
            let r = rollout(
                &mut g,
                problem,
                stack,
                &binding,
                t0,
                start,
                &shocks,
                path_offset + a,
                with_u,
            )?;
            let grab = |ids: &[NodeId]| ids.iter().map(|&i| g.value(i).clone()).collect::<Vec<_>>();
            Ok((grab(&r.states), grab(&r.controls), grab(&r.utilities)))
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let stitch = |sel: fn(&Parts) -> &Vec<Tensor>| -> Result<Vec<Tensor>, SimError> {
        let len = parts.first().map(|p| sel(p).len()).unwrap_or(0);
        (0..len)
            .map(|k| {
                let pieces: Vec<Tensor> = parts.iter().map(|p| sel(p)[k].clone()).collect();
                Ok(Tensor::vstack(&pieces)?)
            })
            .collect()
    };
    Ok(TrajectoryBatch {
        start: t0,
        states: stitch(|p| &p.0)?,
        controls: stitch(|p| &p.1)?,
        utilities: stitch(|p| &p.2)?,
        stream: key,
        stack_fingerprint: stack.fingerprint(),
    })
}

/// In-order left fold of per-period utilities for each path.
pub(crate) fn fold_utilities(utilities: &[Tensor], init: Option<&[f64]>) -> Vec<f64> {
    let n = utilities.first().map(|u| u.rows()).unwrap_or(0);
    let mut acc = init.map(|i| i.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    for u in utilities {
        for (a, v) in acc.iter_mut().zip(u.data()) {
            *a += *v;
        }
    }
    acc
}

/// Per-path objective values of a batch that starts at period 0.
pub fn path_values(
    problem: &dyn ControlProblem,
    batch: &TrajectoryBatch,
    mode: ObjectiveMode,
) -> Result<Vec<f64>, SimError> {
    if batch.start != 0 {
        return Err(SimError::Input("objective needs a batch starting at period 0".into()));
    }
    let values = match mode {
        ObjectiveMode::Separable => {
            if batch.utilities.len() != batch.controls.len() {
                return Err(SimError::Input("batch carries no per-period utilities".into()));
            }
            fold_utilities(&batch.utilities, None)
        }
        ObjectiveMode::General => general_values(problem, &batch.states, &batch.controls)?,
    };
    if let Some(path) = values.iter().position(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteUtility { path });
    }
    Ok(values)
}

/// Whole-path utilities for full-length state/control tensors.
pub(crate) fn general_values(
    problem: &dyn ControlProblem,
    states: &[Tensor],
    controls: &[Tensor],
) -> Result<Vec<f64>, SimError> {
    let n = states.first().map(|s| s.rows()).unwrap_or(0);
    let chunks: Vec<(usize, usize)> = (0..n).step_by(SIM_CHUNK).map(|a| (a, (a + SIM_CHUNK).min(n))).collect();
    let parts: Vec<Result<Vec<f64>, SimError>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut g = Graph::new();
            let s: Vec<NodeId> = states.iter().map(|x| g.input(x.slice_rows(a, b))).collect();
            let c: Vec<NodeId> = controls.iter().map(|x| g.input(x.slice_rows(a, b))).collect();
            let u = problem.path_utility(&mut g, &s, &c)?;
            Ok(g.value(u).data().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean and standard error of the objective over a batch from period 0.
pub fn estimate_objective(
    problem: &dyn ControlProblem,
    batch: &TrajectoryBatch,
) -> Result<ObjectiveEstimate, SimError> {
    let v = path_values(problem, batch, ObjectiveMode::for_problem(problem))?;
    Ok(ObjectiveEstimate::from_samples(&v))
}

/// Cached period-`0..t` states and controls for the rows of a minibatch;
/// only needed for whole-path objectives.
pub struct Prefix<'a> {
    pub states: &'a [Tensor],
    pub controls: &'a [Tensor],
}

/// Minibatch-average suffix objective from period `t` and its gradient
/// with respect to period `t`'s parameters (`c0` when `t = 0`).
///
/// Gradients flow through the controls and through every later state.
/// Separable mode sums rewards from `t` on; general mode evaluates the
/// whole-path utility on the prefix spliced with the new suffix.
#[allow(clippy::too_many_arguments)]
pub fn suffix_objective_and_gradient(
    problem: &dyn ControlProblem,
    stack: &PolicyStack,
    t: usize,
    start_states: &Tensor,
    key: StreamKey,
    mode: ObjectiveMode,
    prefix: Option<&Prefix<'_>>,
) -> Result<(f64, Vec<f64>), SimError> {
    check_start(problem, start_states)?;
    let b = start_states.rows();
    if b == 0 {
        return Err(SimError::Input("empty minibatch".into()));
    }
    let horizon = problem.horizon();
    if t >= horizon {
        return Err(SimError::Input(format!("period {t} has no suffix")));
    }
    if mode == ObjectiveMode::General {
        let p = prefix.ok_or_else(|| SimError::Input("whole-path objective needs the prefix".into()))?;
        if p.states.len() != t || p.controls.len() != t {
            return Err(SimError::Input(format!("prefix must cover periods 0..{t}")));
        }
    }
    let chunks: Vec<(usize, usize)> = (0..b)
        .step_by(GRAD_CHUNK)
        .map(|a| (a, (a + GRAD_CHUNK).min(b)))
        .collect();
    let weight = 1.0 / b as f64;
    let parts: Vec<Result<(Vec<f64>, Vec<f64>), SimError>> = chunks
        .par_iter()
        .map(|&(a, e)| {
            let mut g = Graph::new();
            let binding = stack.bind(&mut g, t, Some(t));
            let start = g.input(start_states.slice_rows(a, e));
            let shocks = draw_shocks(problem, key, a..e, t, horizon);
            let sep = mode == ObjectiveMode::Separable;
            let r = rollout(&mut g, problem, stack, &binding, t, start, &shocks, a, sep)?;
            let total = if sep {
                let mut acc = r.utilities[0];
                for &u in &r.utilities[1..] {
                    acc = g.add(acc, u)?;
                }
                acc
            } else {
                let p = prefix.unwrap();
                let mut states: Vec<NodeId> = p.states.iter().map(|x| g.input(x.slice_rows(a, e))).collect();
                let mut controls: Vec<NodeId> = p.controls.iter().map(|x| g.input(x.slice_rows(a, e))).collect();
                states.extend(&r.states);
                controls.extend(&r.controls);
                problem.path_utility(&mut g, &states, &controls)?
            };
            let values = g.value(total).data().to_vec();
            if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                return Err(SimError::NonFiniteUtility { path: a + row });
            }
            let grad = if g.requires_grad(total) {
                let grads = g.backward(total, Tensor::filled(e - a, 1, weight))?;
                if t == 0 {
                    let id = binding.c0().unwrap();
                    grads
                        .get(id)
                        .map(|x| x.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; stack.c0().len()])
                } else {
                    let net = stack.network(t).unwrap();
                    net.gradient_flat(&grads, binding.network(t).unwrap())
                }
            } else {
                vec![0.0; stack.period_len(t)?]
            };
            Ok((values, grad))
        })
        .collect();
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for p in parts {
        let (values, grad) = p?;
        sum += values.iter().sum::<f64>();
        grads.push(grad);
    }
    Ok((sum * weight, tree_sum(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_samples() {
        let e = ObjectiveEstimate::from_samples(&[3.0, 3.0, 3.0]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.se, Some(0.0));
        let single = ObjectiveEstimate::from_samples(&[1.0]);
        assert_eq!(single.se, None);
        assert_eq!(single.n, 1);
    }

    #[test]
    fn estimate_matches_textbook_formula() {
        let e = ObjectiveEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((e.se.unwrap() - sd / 2.0).abs() < 1e-15);
    }
}
