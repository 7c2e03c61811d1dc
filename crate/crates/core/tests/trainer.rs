mod common;

use common::{seeded_stack, Toy};
use mmcc::mmcc::{train, StopReason, TrainError, Trainer, TrainerConfig};
use mmcc::policy::PolicyStack;
use mmcc::simulate::{ControlProblem, CounterRng};

fn small_config(max_sweeps: usize) -> TrainerConfig {
    TrainerConfig {
        paths: 128,
        minibatch: 16,
        minibatches: 8,
        learning_rate: 0.02,
        lr_decay: 1.0,
        max_sweeps,
        rel_tol: 0.0,
        eval_paths: 256,
        seed: 4,
        force_general: false,
    }
}

fn fresh_stack(problem: &dyn ControlProblem) -> PolicyStack {
    PolicyStack::init(problem.policy_layout(), &mut CounterRng::from_seed(1)).unwrap()
}

#[test]
fn ties_are_rejected_and_leave_the_stack_unchanged() {
    let problem = Toy {
        constant: true,
        ..Toy::new(3, 0.5)
    };
    let stack = seeded_stack(&problem, 1);
    let before = stack.to_bytes();
    let out = train(&problem, stack, small_config(2)).unwrap();
    assert_eq!(out.stack.to_bytes(), before);
    assert_eq!(out.reports.len(), 2);
    for r in &out.reports {
        assert_eq!(r.updates.len(), 3);
        assert!(r.updates.iter().all(|u| !u.accepted));
        assert_eq!(r.eval_mean, 3.0);
    }
}

#[test]
fn one_sweep_budget_runs_one_sweep() {
    let problem = Toy::new(3, 0.3);
    let out = train(&problem, seeded_stack(&problem, 2), small_config(1)).unwrap();
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.reports[0].sweep, 1);
    assert_eq!(out.stop, StopReason::MaxSweeps);
    let periods: Vec<usize> = out.reports[0].updates.iter().map(|u| u.period).collect();
    assert_eq!(periods, vec![2, 1, 0]);
}

#[test]
fn deterministic_one_period_problem_reaches_its_optimum() {
    let problem = Toy::new(1, 0.0);
    let config = TrainerConfig {
        paths: 64,
        minibatch: 1,
        minibatches: 64,
        learning_rate: 0.01,
        max_sweeps: 40,
        eval_paths: 4,
        ..small_config(0)
    };
    let out = train(&problem, fresh_stack(&problem), config).unwrap();
    // max_c -(s0 + c)^2 - r c^2 at c = -s0 / (1 + r).
    let c_star = -problem.s0 / (1.0 + problem.r);
    let v_star = -(problem.s0 + c_star).powi(2) - problem.r * c_star * c_star;
    let c = out.stack.c0()[0];
    assert!((c - c_star).abs() < 1e-3, "c = {c}, optimum {c_star}");
    let last = out.reports.last().unwrap().eval_mean;
    assert!((last - v_star).abs() < 1e-3, "{last} vs {v_star}");
}

#[test]
fn incumbent_objective_never_decreases() {
    let problem = Toy::new(4, 0.4);
    let out = train(&problem, seeded_stack(&problem, 3), small_config(4)).unwrap();
    let mut prev = out.initial.mean;
    let mut accepted = 0;
    for r in &out.reports {
        for u in &r.updates {
            assert!(
                u.eval_mean >= prev,
                "sweep {} period {}: {} < {prev}",
                r.sweep,
                u.period,
                u.eval_mean
            );
            if u.accepted {
                assert!(u.eval_mean > prev);
                accepted += 1;
            } else {
                assert_eq!(u.eval_mean, prev);
            }
            prev = u.eval_mean;
        }
        assert_eq!(r.eval_mean, prev);
    }
    assert!(accepted > 0);
    assert!(prev > out.initial.mean);
}

#[test]
fn whole_path_and_separable_objectives_make_the_same_decisions() {
    let problem = Toy::new(3, 0.3);
    let run = |force_general| {
        let config = TrainerConfig {
            force_general,
            ..small_config(3)
        };
        train(&problem, seeded_stack(&problem, 4), config).unwrap()
    };
    let (sep, gen) = (run(false), run(true));
    let flags = |o: &mmcc::mmcc::TrainOutcome| {
        o.reports
            .iter()
            .flat_map(|r| r.updates.iter().map(|u| u.accepted))
            .collect::<Vec<_>>()
    };
    assert_eq!(flags(&sep), flags(&gen));
    for t in 0..3 {
        let a = sep.stack.clone_period(t).unwrap();
        let b = gen.stack.clone_period(t).unwrap();
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "period {t}: {gap:e}");
    }
    for (a, b) in sep.reports.iter().zip(&gen.reports) {
        assert!((a.eval_mean - b.eval_mean).abs() < 1e-9);
    }
}

#[test]
fn sweeps_are_reproducible() {
    let problem = Toy::new(3, 0.3);
    let a = train(&problem, seeded_stack(&problem, 5), small_config(2)).unwrap();
    let b = train(&problem, seeded_stack(&problem, 5), small_config(2)).unwrap();
    assert_eq!(a.stack.to_bytes(), b.stack.to_bytes());
    let strip = |o: &mmcc::mmcc::TrainOutcome| {
        o.reports
            .iter()
            .flat_map(|r| r.updates.iter().map(|u| (u.period, u.accepted, u.eval_mean.to_bits())))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn inconsistent_batch_sizes_are_rejected() {
    let problem = Toy::new(2, 0.3);
    let config = TrainerConfig {
        paths: 100,
        ..small_config(1)
    };
    let stack = seeded_stack(&problem, 6);
    match Trainer::new(&problem, config, &stack) {
        Err(TrainError::Config(msg)) => assert!(msg.contains("b*m != N"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("accepted b*m != N"),
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let problem = Toy::new(3, 0.3);
    let full = train(&problem, seeded_stack(&problem, 7), small_config(4)).unwrap();

    let mut stack = seeded_stack(&problem, 7);
    let mut first = Trainer::new(&problem, small_config(2), &stack).unwrap();
    let (history, _) = first.run::<()>(&mut stack, Vec::new(), |_, _| Ok(())).unwrap();
    let mut second = Trainer::new(&problem, small_config(4), &stack).unwrap();
    second.set_initial(full.initial.mean);
    let (history, stop) = second.run::<()>(&mut stack, history, |_, _| Ok(())).unwrap();
    assert_eq!(stop, StopReason::MaxSweeps);
    assert_eq!(history.len(), 4);
    assert_eq!(stack.to_bytes(), full.stack.to_bytes());
}

#[test]
fn step_size_decays_geometrically_per_sweep() {
    let config = TrainerConfig {
        lr_decay: 0.5,
        ..small_config(3)
    };
    assert_eq!(config.step_size(1), 0.02);
    assert_eq!(config.step_size(3), 0.005);
    assert!(config.diagnostics().is_empty());
    let problem = Toy::new(2, 0.3);
    let decayed = train(&problem, seeded_stack(&problem, 8), config.clone()).unwrap();
    let flat = train(&problem, seeded_stack(&problem, 8), small_config(3)).unwrap();
    let means = |o: &mmcc::mmcc::TrainOutcome| o.reports.iter().map(|r| r.eval_mean).collect::<Vec<_>>();
    let (d, f) = (means(&decayed), means(&flat));
    assert_eq!(d[0], f[0], "sweep 1 uses the undecayed step");
    assert_ne!(d[1..], f[1..], "later sweeps use smaller steps");
    for bad in [0.0, 1.5, f64::NAN] {
        let c = TrainerConfig {
            lr_decay: bad,
            ..small_config(1)
        };
        assert!(c.diagnostics().iter().any(|d| d.contains("lr_decay")), "{bad}");
    }
}
