//! Adam and the fixed-count minibatch loop used for each period update.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at parameter {index}")]
    PoisonedStep { index: usize },
    #[error("gradient has {got} entries, parameters have {expected}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum AscentError<E> {
    #[error("minibatch {step}: {source}")]
    Sampler { step: usize, source: E },
    #[error("minibatch {step}: {source}")]
    Optim { step: usize, source: OptimError },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// One Adam step that increases the objective whose gradient is
    /// `grads`. Internally this is descent on the negated gradient.
    /// Nothing is modified when the step is rejected.
    pub fn ascent_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(OptimError::Length {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::PoisonedStep { index });
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = -grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Exactly `minibatches` Adam ascent steps, one per minibatch index in
/// order. `sampler(i, params)` returns the objective value and gradient on
/// minibatch `i` at the current parameters. Returns the sampled values.
pub fn run_minibatch_ascent<E, F>(
    mut sampler: F,
    params: &mut [f64],
    state: &mut AdamState,
    minibatches: usize,
) -> Result<Vec<f64>, AscentError<E>>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let mut values = Vec::with_capacity(minibatches);
    for step in 0..minibatches {
        let (value, grad) = sampler(step, params).map_err(|source| AscentError::Sampler { step, source })?;
        state
            .ascent_step(params, &grad)
            .map_err(|source| AscentError::Optim { step, source })?;
        values.push(value);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        s.ascent_step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.v, vec![0.0, 0.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_has_bias_corrected_magnitude() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::default());
        s.ascent_step(&mut p, &[1.0]).unwrap();
        let expected = 0.01 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn poisoned_gradient_is_rejected_without_mutation() {
        let mut p = vec![0.5, 0.5, 0.5];
        let mut s = AdamState::new(3, AdamConfig::default());
        let err = s.ascent_step(&mut p, &[0.1, f64::NAN, 0.2]).unwrap_err();
        assert_eq!(err, OptimError::PoisonedStep { index: 1 });
        assert_eq!(p, vec![0.5, 0.5, 0.5]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn single_minibatch_is_one_step() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::default());
        let vals = run_minibatch_ascent::<(), _>(|_, _| Ok((0.0, vec![1.0])), &mut p, &mut s, 1).unwrap();
        assert_eq!(vals.len(), 1);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn quadratic_reaches_its_maximizer() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::with_learning_rate(0.1));
        run_minibatch_ascent::<(), _>(
            |_, x| Ok((-(x[0] - 3.0).powi(2), vec![-2.0 * (x[0] - 3.0)])),
            &mut p,
            &mut s,
            200,
        )
        .unwrap();
        assert!((p[0] - 3.0).abs() < 0.05, "{}", p[0]);
    }

    #[test]
    fn sampler_failure_stops_the_loop() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::default());
        let r = run_minibatch_ascent(
            |i, _| if i == 2 { Err("boom") } else { Ok((0.0, vec![1.0])) },
            &mut p,
            &mut s,
            5,
        );
        assert!(matches!(r, Err(AscentError::Sampler { step: 2, .. })));
        assert_eq!(s.t, 2);
    }

    proptest! {
        #[test]
        fn step_is_bounded_and_finite(
            grads in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 4), 1..30),
            lr in 1e-4f64..1.0,
        ) {
            let cfg = AdamConfig::with_learning_rate(lr);
            let mut p = vec![0.0; 4];
            let mut s = AdamState::new(4, cfg);
            for g in &grads {
                let before = p.clone();
                s.ascent_step(&mut p, g).unwrap();
                for i in 0..4 {
                    prop_assert!(p[i].is_finite());
                    prop_assert!(s.v[i] >= 0.0);
                    let bound = lr / (1.0 - cfg.beta1) * (1.0 + 1e-9);
                    prop_assert!((p[i] - before[i]).abs() <= bound);
                }
            }
        }

        #[test]
        fn coordinates_do_not_interact(gs in proptest::collection::vec(-10f64..10.0, 1..50)) {
            let mut p = vec![0.3, 0.3];
            let mut s = AdamState::new(2, AdamConfig::default());
            for g in &gs {
                s.ascent_step(&mut p, &[*g, *g]).unwrap();
            }
            prop_assert_eq!(p[0].to_bits(), p[1].to_bits());
        }

        #[test]
        fn replay_is_bit_identical(gs in proptest::collection::vec(-10f64..10.0, 1..50)) {
            let run = || {
                let mut p = vec![1.0];
                let mut s = AdamState::new(1, AdamConfig::default());
                for g in &gs {
                    s.ascent_step(&mut p, &[*g]).unwrap();
                }
                p[0].to_bits()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
