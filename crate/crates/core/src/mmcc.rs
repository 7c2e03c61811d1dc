//! Backward-sweep trainer with monotone acceptance.
//!
//! Each sweep visits periods `T-1, ..., 1, 0`. A period update runs `m`
//! Adam steps on the suffix objective, starting from states cached at the
//! beginning of the sweep, then keeps the result only if the objective on
//! a fixed evaluation set strictly improves. The evaluation set uses the
//! same shocks for every comparison in a run, so the accepted objective
//! sequence is non-decreasing exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::optim::{run_minibatch_ascent, AdamConfig, AdamState};
use crate::policy::{PolicyError, PolicyStack};
use crate::simulate::{
    fold_utilities, general_values, simulate_from, simulate_full, suffix_objective_and_gradient, ControlProblem,
    ObjectiveEstimate, ObjectiveMode, Prefix, Purpose, SimError, StreamKey,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    /// Training paths `N` simulated at the start of each sweep.
    pub paths: usize,
    /// Minibatch size `b`.
    pub minibatch: usize,
    /// Adam steps per period update `m`; `b * m` must equal `N`.
    pub minibatches: usize,
    /// Adam step size in sweep 1.
    pub learning_rate: f64,
    /// Step size factor applied per sweep: sweep `k` uses
    /// `learning_rate * lr_decay^(k-1)`.
    pub lr_decay: f64,
    pub max_sweeps: usize,
    /// Stop after two consecutive sweeps whose relative improvement is
    /// below this.
    pub rel_tol: f64,
    pub eval_paths: usize,
    pub seed: u64,
    /// Force whole-path objectives even for time-separable problems.
    pub force_general: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            paths: 4096,
            minibatch: 64,
            minibatches: 64,
            learning_rate: 0.01,
            lr_decay: 1.0,
            max_sweeps: 10,
            rel_tol: 1e-4,
            eval_paths: 4096,
            seed: 0,
            force_general: false,
        }
    }
}

impl TrainerConfig {
    /// Adam step size used in sweep `k` (1-based).
    pub fn step_size(&self, k: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(k.saturating_sub(1) as i32)
    }

    /// Human-readable problems with the configuration; empty when valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if self.minibatch == 0 || self.minibatches == 0 {
            d.push("minibatch size b and count m must be at least 1".to_string());
        }
        if self.minibatch.checked_mul(self.minibatches) != Some(self.paths) {
            d.push(format!(
                "b*m != N: {} * {} != {}",
                self.minibatch, self.minibatches, self.paths
            ));
        }
        if self.eval_paths < 2 {
            d.push("eval_paths must be at least 2".to_string());
        }
        if self.max_sweeps == 0 {
            d.push("max_sweeps must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            d.push("learning_rate must be positive".to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            d.push("lr_decay must be in (0, 1]".to_string());
        }
        if !(self.rel_tol >= 0.0) {
            d.push("rel_tol must be non-negative".to_string());
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodUpdate {
    pub period: usize,
    pub accepted: bool,
    /// Incumbent evaluation objective after this update.
    pub eval_mean: f64,
    pub eval_se: Option<f64>,
    /// Candidate evaluation objective, when it could be computed.
    pub candidate_mean: Option<f64>,
    pub seconds: f64,
    /// Why the update failed, if it did.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sweep: usize,
    /// In the order they were applied: `T-1, ..., 1, 0`.
    pub updates: Vec<PeriodUpdate>,
    pub eval_mean: f64,
    pub eval_se: Option<f64>,
    pub seconds: f64,
    pub tracked: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSweeps,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stack: PolicyStack,
    pub initial: ObjectiveEstimate,
    pub reports: Vec<SweepReport>,
    pub stop: StopReason,
}

/// Incumbent paths on the evaluation set.
struct EvalCache {
    states: Vec<Tensor>,
    controls: Vec<Tensor>,
    utilities: Vec<Tensor>,
    estimate: ObjectiveEstimate,
}

struct Candidate {
    states: Vec<Tensor>,
    controls: Vec<Tensor>,
    utilities: Vec<Tensor>,
    estimate: ObjectiveEstimate,
}

pub struct Trainer<'a> {
    problem: &'a dyn ControlProblem,
    config: TrainerConfig,
    mode: ObjectiveMode,
    eval_key: StreamKey,
    eval: EvalCache,
    initial: f64,
}

impl<'a> Trainer<'a> {
    /// Validate the configuration and evaluate `stack` on the run's
    /// evaluation set.
    pub fn new(
        problem: &'a dyn ControlProblem,
        config: TrainerConfig,
        stack: &PolicyStack,
    ) -> Result<Self, TrainError> {
        let diag = config.diagnostics();
        if !diag.is_empty() {
            return Err(TrainError::Config(diag.join("; ")));
        }
        if stack.horizon() != problem.horizon() {
            return Err(TrainError::Config(format!(
                "stack horizon {} differs from problem horizon {}",
                stack.horizon(),
                problem.horizon()
            )));
        }
        let mode = if config.force_general {
            ObjectiveMode::General
        } else {
            ObjectiveMode::for_problem(problem)
        };
        let eval_key = StreamKey::new(config.seed, Purpose::Eval, 0, 0, 0);
        let batch = simulate_full(problem, stack, config.eval_paths, eval_key)?;
        let mut trainer = Self {
            problem,
            config,
            mode,
            eval_key,
            eval: EvalCache {
                states: batch.states,
                controls: batch.controls,
                utilities: batch.utilities,
                estimate: ObjectiveEstimate::from_samples(&[0.0]),
            },
            initial: 0.0,
        };
        let values = trainer.values(0, None)?;
        trainer.eval.estimate = ObjectiveEstimate::from_samples(&values);
        trainer.initial = trainer.eval.estimate.mean;
        Ok(trainer)
    }

    pub fn mode(&self) -> ObjectiveMode {
        self.mode
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Objective before the first sweep, used by the stopping rule. A
    /// resumed trainer must be told the original value.
    pub fn set_initial(&mut self, mean: f64) {
        self.initial = mean;
    }

    /// Incumbent objective on the evaluation set.
    pub fn incumbent(&self) -> ObjectiveEstimate {
        self.eval.estimate
    }

    /// Per-path incumbent values on the evaluation set.
    pub fn incumbent_values(&self) -> Result<Vec<f64>, TrainError> {
        self.values(0, None)
    }

    /// Per-path values on the evaluation set. With `tail = None` the
    /// incumbent paths are used; otherwise periods `< t` come from the
    /// cache and periods `>= t` from `tail` (states, controls, utilities).
    fn values(&self, t: usize, tail: Option<(&[Tensor], &[Tensor], &[Tensor])>) -> Result<Vec<f64>, TrainError> {
        let v = match (self.mode, tail) {
            (ObjectiveMode::Separable, None) => fold_utilities(&self.eval.utilities, None),
            (ObjectiveMode::Separable, Some((_, _, utilities))) => {
                let prefix = fold_utilities(&self.eval.utilities[..t], None);
                fold_utilities(utilities, (t > 0).then_some(prefix.as_slice()))
            }
            (ObjectiveMode::General, None) => general_values(self.problem, &self.eval.states, &self.eval.controls)?,
            (ObjectiveMode::General, Some((states, controls, _))) => {
                let mut s: Vec<Tensor> = self.eval.states[..t].to_vec();
                s.extend_from_slice(states);
                let mut c: Vec<Tensor> = self.eval.controls[..t].to_vec();
                c.extend_from_slice(controls);
                general_values(self.problem, &s, &c)?
            }
        };
        if let Some(path) = v.iter().position(|x| !x.is_finite()) {
            return Err(SimError::NonFiniteUtility { path }.into());
        }
        Ok(v)
    }

    fn evaluate_candidate(&self, stack: &PolicyStack, t: usize) -> Result<Candidate, TrainError> {
        let batch = simulate_from(self.problem, stack, t, &self.eval.states[t], self.eval_key, 0)?;
        let values = self.values(t, Some((&batch.states, &batch.controls, &batch.utilities)))?;
        Ok(Candidate {
            states: batch.states,
            controls: batch.controls,
            utilities: batch.utilities,
            estimate: ObjectiveEstimate::from_samples(&values),
        })
    }

    fn adopt(&mut self, t: usize, c: Candidate) {
        self.eval.states.truncate(t);
        self.eval.states.extend(c.states);
        self.eval.controls.truncate(t);
        self.eval.controls.extend(c.controls);
        if !self.eval.utilities.is_empty() {
            self.eval.utilities.truncate(t);
            self.eval.utilities.extend(c.utilities);
        }
        self.eval.estimate = c.estimate;
    }

    /// Run the minibatch ascent for period `t`, leaving the result in
    /// `stack`.
    fn optimize_period(
        &self,
        stack: &mut PolicyStack,
        sweep: usize,
        t: usize,
        prefix_states: &[Tensor],
        prefix_controls: &[Tensor],
    ) -> Result<(), String> {
        let cfg = &self.config;
        let b = cfg.minibatch;
        let mut params = stack.clone_period(t).map_err(|e| e.to_string())?;
        let mut adam = AdamState::new(params.len(), AdamConfig::with_learning_rate(cfg.step_size(sweep)));
        let s0 = self.problem.initial_state();
        let origin = (t == 0).then(|| {
            let mut d = Vec::with_capacity(b * s0.len());
            for _ in 0..b {
                d.extend_from_slice(&s0);
            }
            Tensor::matrix(b, s0.len(), d).unwrap()
        });
        let result = run_minibatch_ascent(
            |i, p| -> Result<(f64, Vec<f64>), SimError> {
                stack.restore_period(t, p)?;
                let key = StreamKey::new(cfg.seed, Purpose::TrainSuffix, sweep as u64, t as u64, i as u64);
                let rows = (i * b, (i + 1) * b);
                let start = match &origin {
                    Some(s) => s.clone(),
                    None => prefix_states[t].slice_rows(rows.0, rows.1),
                };
                let (ps, pc): (Vec<Tensor>, Vec<Tensor>) = if self.mode == ObjectiveMode::General {
                    (
                        prefix_states[..t]
                            .iter()
                            .map(|x| x.slice_rows(rows.0, rows.1))
                            .collect(),
                        prefix_controls[..t]
                            .iter()
                            .map(|x| x.slice_rows(rows.0, rows.1))
                            .collect(),
                    )
                } else {
                    (Vec::new(), Vec::new())
                };
                let prefix = Prefix {
                    states: &ps,
                    controls: &pc,
                };
                suffix_objective_and_gradient(self.problem, stack, t, &start, key, self.mode, Some(&prefix))
            },
            &mut params,
            &mut adam,
            cfg.minibatches,
        );
        match result {
            Ok(_) => stack.restore_period(t, &params).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        }
    }

    /// One backward sweep (sweep index `k >= 1`).
    pub fn sweep(&mut self, stack: &mut PolicyStack, k: usize) -> Result<SweepReport, TrainError> {
        let started = Instant::now();
        let horizon = self.problem.horizon();
        let prefix_key = StreamKey::new(self.config.seed, Purpose::TrainPrefix, k as u64, 0, 0);
        let prefix = if horizon > 1 {
            Some(simulate_full(self.problem, stack, self.config.paths, prefix_key)?)
        } else {
            None
        };
        let (ps, pc): (&[Tensor], &[Tensor]) = match &prefix {
            Some(b) => (&b.states, &b.controls),
            None => (&[], &[]),
        };
        let mut updates = Vec::with_capacity(horizon);
        for t in (0..horizon).rev() {
            let t_start = Instant::now();
            let saved = stack.clone_period(t)?;
            let mut failure = None;
            let mut candidate_mean = None;
            let mut accepted = false;
            match self.optimize_period(stack, k, t, ps, pc) {
                Err(e) => failure = Some(e),
                Ok(()) => match self.evaluate_candidate(stack, t) {
                    Err(e) => failure = Some(e.to_string()),
                    Ok(c) => {
                        candidate_mean = Some(c.estimate.mean);
                        if c.estimate.mean > self.eval.estimate.mean {
                            accepted = true;
                            self.adopt(t, c);
                        }
                    }
                },
            }
            if !accepted {
                stack.restore_period(t, &saved)?;
            }
            updates.push(PeriodUpdate {
                period: t,
                accepted,
                eval_mean: self.eval.estimate.mean,
                eval_se: self.eval.estimate.se,
                candidate_mean,
                seconds: t_start.elapsed().as_secs_f64(),
                failure,
            });
        }
        Ok(SweepReport {
            sweep: k,
            updates,
            eval_mean: self.eval.estimate.mean,
            eval_se: self.eval.estimate.se,
            seconds: started.elapsed().as_secs_f64(),
            tracked: self.problem.tracked_scalars(stack),
        })
    }

    /// Sweep until converged or `max_sweeps` in total. `history` holds
    /// reports of sweeps already completed (for resuming); `on_sweep` is
    /// called after each new sweep.
    pub fn run<E>(
        &mut self,
        stack: &mut PolicyStack,
        mut history: Vec<SweepReport>,
        mut on_sweep: impl FnMut(&PolicyStack, &[SweepReport]) -> Result<(), E>,
    ) -> Result<(Vec<SweepReport>, StopReason), RunError<E>> {
        let initial = self.initial;
        loop {
            if converged(initial, &history, self.config.rel_tol) {
                return Ok((history, StopReason::Converged));
            }
            if history.len() >= self.config.max_sweeps {
                return Ok((history, StopReason::MaxSweeps));
            }
            let k = history.len() + 1;
            let report = self.sweep(stack, k).map_err(RunError::Train)?;
            history.push(report);
            on_sweep(stack, &history).map_err(RunError::Callback)?;
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Train(TrainError),
    #[error("sweep callback failed: {0}")]
    Callback(E),
}

fn converged(initial: f64, history: &[SweepReport], tol: f64) -> bool {
    if history.len() < 2 {
        return false;
    }
    let mut means = vec![initial];
    means.extend(history.iter().map(|r| r.eval_mean));
    let n = means.len();
    let small = |a: f64, b: f64| (b - a) / a.abs().max(1e-12) < tol;
    small(means[n - 3], means[n - 2]) && small(means[n - 2], means[n - 1])
}

/// Train from `stack` until the stopping rule fires.
pub fn train(
    problem: &dyn ControlProblem,
    stack: PolicyStack,
    config: TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut stack = stack;
    let mut trainer = Trainer::new(problem, config, &stack)?;
    let initial = trainer.incumbent();
    let (reports, stop) = trainer
        .run::<std::convert::Infallible>(&mut stack, Vec::new(), |_, _| Ok(()))
        .map_err(|e| match e {
            RunError::Train(t) => t,
            RunError::Callback(never) => match never {},
        })?;
    Ok(TrainOutcome {
        stack,
        initial,
        reports,
        stop,
    })
}
