//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use mmcc::autodiff::{Activation, AutodiffError, DenseNetwork, Graph, NodeId, Tensor};
use mmcc::policy::{HeadSpec, InputMap, PolicyLayout, PolicyStack};
use mmcc::problems::{LqProblem, LqSpec};
use mmcc::simulate::{
    simulate_full, suffix_objective_and_gradient, ControlProblem, CounterRng, ObjectiveMode, Prefix, Purpose, StreamKey,
};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n|` relative to the larger magnitude, or 0 when both are within
/// `abs_floor` of each other.
pub fn rel_err(a: f64, n: f64, abs_floor: f64) -> f64 {
    let d = (a - n).abs();
    if d <= abs_floor {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

pub fn random_tensor(rng: &mut CounterRng, rows: usize, cols: usize, sd: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * sd).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Activation families checked by the gradient tests.
pub fn activation_cases() -> Vec<(&'static str, Activation, Activation)> {
    vec![
        ("identity", Activation::Identity, Activation::Identity),
        ("relu", Activation::Relu, Activation::Identity),
        ("sigmoid", Activation::Sigmoid, Activation::Sigmoid),
        (
            "grouped_softmax",
            Activation::Sigmoid,
            Activation::GroupedSoftmax(Arc::from(vec![vec![0, 2], vec![1], vec![3, 4, 5]])),
        ),
    ]
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(w * net(x))` over every parameter of one random
/// three-layer network.
pub fn network_fd_error(trial: u64, hidden: Activation, output: Activation) -> f64 {
    let mut rng = CounterRng::from_seed(0xfd00 + trial);
    let inputs = rng.random_range(2..6);
    let widths = [rng.random_range(3..8), rng.random_range(3..8)];
    let outputs = if matches!(output, Activation::GroupedSoftmax(_)) {
        6
    } else {
        rng.random_range(1..5)
    };
    let mut net = DenseNetwork::init(inputs, &widths, outputs, hidden, output, &mut rng).unwrap();
    // Nonzero biases so kinks and saturation are not all at the origin.
    let mut flat = net.flatten();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    net.set_flat(&flat).unwrap();
    let rows = 4;
    let x = random_tensor(&mut rng, rows, inputs, 1.5);
    let w = random_tensor(&mut rng, rows, outputs, 1.0);

    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let xi = g.input(x.clone());
    let out = net.forward(&mut g, &bound, xi).unwrap();
    let wi = g.input(w.clone());
    let prod = g.mul(out, wi).unwrap();
    let total = g.sum_cols(prod).unwrap();
    let grads = g.backward(total, Tensor::filled(rows, 1, 1.0)).unwrap();
    let analytic = net.gradient_flat(&grads, &bound);

    let value = |n: &DenseNetwork| -> f64 {
        let y = n.predict(&x).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] += FD_STEP;
        probe.set_flat(&p).unwrap();
        let up = value(&probe);
        p[i] -= 2.0 * FD_STEP;
        probe.set_flat(&p).unwrap();
        let down = value(&probe);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, 1e-9));
    }
    worst
}

/// Three-period, two-dimensional linear-quadratic toy problem.
pub fn toy_lq(noise_sd: f64) -> LqProblem {
    let mut spec = LqSpec::diagonal(2, 2, 3, 0.9, 0.1);
    spec.a[0][1] = 0.2;
    spec.b[1][0] = 0.3;
    spec.noise_sd = noise_sd;
    spec.hidden = Some(vec![6, 5]);
    LqProblem::new(spec).unwrap()
}

/// Worst relative error of the suffix-objective gradient for period `t`
/// against central differences with frozen shocks (`b = 8`).
pub fn suffix_fd_error(problem: &dyn ControlProblem, stack: &PolicyStack, t: usize, mode: ObjectiveMode) -> f64 {
    let b = 8;
    let batch = simulate_full(problem, stack, b, StreamKey::new(3, Purpose::Custom(1), 0, 0, 0)).unwrap();
    let key = StreamKey::new(3, Purpose::Custom(2), 0, t as u64, 0);
    let prefix = Prefix {
        states: &batch.states[..t],
        controls: &batch.controls[..t],
    };
    let start = &batch.states[t];
    let (_, analytic) = suffix_objective_and_gradient(problem, stack, t, start, key, mode, Some(&prefix)).unwrap();
    let base = stack.clone_period(t).unwrap();
    let mut probe = stack.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += FD_STEP;
        probe.restore_period(t, &p).unwrap();
        let (up, _) = suffix_objective_and_gradient(problem, &probe, t, start, key, mode, Some(&prefix)).unwrap();
        p[i] -= 2.0 * FD_STEP;
        probe.restore_period(t, &p).unwrap();
        let (down, _) = suffix_objective_and_gradient(problem, &probe, t, start, key, mode, Some(&prefix)).unwrap();
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, 1e-9));
    }
    worst
}

pub fn seeded_stack(problem: &dyn ControlProblem, seed: u64) -> PolicyStack {
    let mut rng = CounterRng::from_seed(seed);
    let mut stack = PolicyStack::init(problem.policy_layout(), &mut rng).unwrap();
    // Move c0 off its zero initialization so period 0 has curvature.
    let c0: Vec<f64> = stack.c0().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    stack.restore_period(0, &c0).unwrap();
    stack
}

/// Scalar test problem: `s' = s + c + noise * z`, reward
/// `-(s'^2) - r c^2` per period, or a constant 1 when `constant` is set.
#[derive(Clone, Debug)]
pub struct Toy {
    pub horizon: usize,
    pub noise: f64,
    pub r: f64,
    pub s0: f64,
    pub constant: bool,
}

impl Toy {
    pub fn new(horizon: usize, noise: f64) -> Self {
        Self {
            horizon,
            noise,
            r: 0.5,
            s0: 1.0,
            constant: false,
        }
    }
}

impl ControlProblem for Toy {
    fn name(&self) -> &str {
        "toy"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn shock_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.s0]
    }

    fn policy_layout(&self) -> PolicyLayout {
        PolicyLayout {
            horizon: self.horizon,
            state_dim: 1,
            control_dim0: 1,
            control_dim: 1,
            head0: HeadSpec::Unconstrained,
            head: HeadSpec::Unconstrained,
            input: InputMap::identity(0, 1),
            hidden: vec![4, 4],
            c0_init: vec![0.0],
            output_bias: None,
        }
    }

    fn sample_shock(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = StandardNormal.sample(rng);
    }

    fn transition(
        &self,
        g: &mut Graph,
        _t: usize,
        state: NodeId,
        control: NodeId,
        shock: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let next = g.add(state, control)?;
        let z = g.scale(shock, self.noise);
        g.add(next, z)
    }

    fn period_utility(
        &self,
        g: &mut Graph,
        _t: usize,
        _state: NodeId,
        control: NodeId,
        next: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        if self.constant {
            let zero = g.scale(next, 0.0);
            return Ok(g.offset(zero, 1.0));
        }
        let s2 = g.square(next);
        let c2 = g.square(control);
        let c2 = g.scale(c2, self.r);
        let total = g.add(s2, c2)?;
        Ok(g.neg(total))
    }
}
