mod common;

use common::{activation_cases, network_fd_error, seeded_stack, suffix_fd_error, toy_lq};
use mmcc::simulate::ObjectiveMode;

#[test]
fn network_gradients_match_central_differences() {
    for (name, hidden, output) in activation_cases() {
        let worst = (0..25)
            .map(|trial| network_fd_error(trial, hidden.clone(), output.clone()))
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn suffix_gradient_matches_central_differences() {
    let problem = toy_lq(0.1);
    let stack = seeded_stack(&problem, 11);
    for t in 0..3 {
        for mode in [ObjectiveMode::Separable, ObjectiveMode::General] {
            let worst = suffix_fd_error(&problem, &stack, t, mode);
            assert!(worst <= 1e-3, "period {t} {mode:?}: {worst:e}");
        }
    }
}
