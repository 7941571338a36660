mod support;

use support::trace_oracle::{check_all, Limits};

#[test]
fn every_small_trace_emits_each_input_exactly_once_in_order() {
    let limits = Limits {
        max_held: 1,
        fail_budget: 2,
    };
    for n in 0..=4 {
        let cov = check_all(n, limits);
        assert!(cov.failures.is_empty(), "n={n}: {:#?}", cov.failures);
        assert!(cov.traces > 0);
        eprintln!("n={n}: {} traces, {} steps", cov.traces, cov.steps);
    }
}

#[test]
fn traces_with_two_held_tickets_per_borrower() {
    let limits = Limits {
        max_held: 2,
        fail_budget: 1,
    };
    for n in 0..=3 {
        let cov = check_all(n, limits);
        assert!(cov.failures.is_empty(), "n={n}: {:#?}", cov.failures);
        eprintln!("n={n}: {} traces, {} steps", cov.traces, cov.steps);
    }
}
