//! Cross-checks of the weighted Monte Carlo estimator against independent
//! routes: the Kolmogorov forward law via the matrix exponential, and plain
//! simulation of constant-rate targets.

mod common;

use common::*;
use ratechange::chain::{ChainPath, TargetRateFamily};
use ratechange::oracles::dense_expm;
use ratechange::sampler::{
    sample_weighted_paths, simulate_reference_chain, weighted_expectation, RngStream,
};

/// Occupancy probabilities of the target chain computed by the
/// matrix-exponential forward equation: the importance-sampled estimate
/// must agree within 3 standard errors.
#[test]
fn weighted_expectation_matches_forward_equation() {
    let reference = unit_flip();
    let target_rates = rate(vec![vec![0.0, 2.0], vec![1.0, 0.0]]);
    let target = TargetRateFamily::constant(target_rates, 2.0);
    let horizon = 2.0;

    let q = vec![vec![-2.0, 2.0], vec![1.0, -1.0]];
    let p = dense_expm(&q, horizon).unwrap();
    let exact = p[0][1]; // start in state 1, occupy state 2 at T

    let (est, se) = weighted_expectation(
        |path: &ChainPath| (path.final_state() == 1) as u8 as f64,
        &reference,
        &target,
        &[1.0, 0.0],
        horizon,
        100_000,
        &RngStream::new(42, 0),
    )
    .unwrap();
    assert!(
        (est - exact).abs() <= 3.0 * se,
        "importance estimate {est} +- {se} vs forward law {exact}"
    );
}

/// Change-of-measure consistency: for a constant-rate target (which can be
/// simulated directly), weighted expectations under the proposal agree with
/// plain Monte Carlo under the target, across a battery of path functionals.
#[test]
fn weighted_estimates_match_direct_target_simulation() {
    let reference = unit_flip();
    let target_rates = rate(vec![vec![0.0, 1.6], vec![0.7, 0.0]]);
    let target = TargetRateFamily::constant(target_rates.clone(), 1.6);
    let horizon = 3.0;
    let samples = 60_000;

    let functionals: Vec<(&str, Box<dyn Fn(&ChainPath) -> f64 + Sync>)> = vec![
        (
            "final state",
            Box::new(|p: &ChainPath| p.final_state() as f64),
        ),
        ("jump count", Box::new(|p: &ChainPath| p.num_jumps() as f64)),
        (
            "occupation of state 2",
            Box::new(|p: &ChainPath| {
                p.segments()
                    .iter()
                    .filter(|(_, _, s)| *s == 1)
                    .map(|(lo, hi, _)| hi - lo)
                    .sum()
            }),
        ),
        (
            "early jump indicator",
            Box::new(|p: &ChainPath| {
                p.jump_times()
                    .first()
                    .map_or(0.0, |&w| (w < 0.5) as u8 as f64)
            }),
        ),
    ];

    for (name, f) in &functionals {
        let (weighted, se_w) = weighted_expectation(
            f.as_ref(),
            &reference,
            &target,
            &[1.0, 0.0],
            horizon,
            samples,
            &RngStream::new(7, 0),
        )
        .unwrap();

        // Direct target simulation: the target is a constant-rate chain.
        let base = RngStream::new(8, 0);
        let values: Vec<f64> = (0..samples)
            .map(|k| {
                let mut rng = base.substream(k as u64);
                let path = simulate_reference_chain(&target_rates, &[1.0, 0.0], horizon, &mut rng)
                    .unwrap();
                f(&path)
            })
            .collect();
        let n = samples as f64;
        let direct = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - direct).powi(2)).sum::<f64>() / (n - 1.0);
        let se_d = (var / n).sqrt();

        let tol = 3.0 * (se_w.powi(2) + se_d.powi(2)).sqrt();
        assert!(
            (weighted - direct).abs() <= tol,
            "{name}: weighted {weighted} vs direct {direct} (tol {tol})"
        );
    }
}

/// The weight of each stored sample matches a recomputation, and sampling is
/// invariant under how the worker pool slices the batch.
#[test]
fn sample_sets_are_self_consistent() {
    let reference = unit_flip();
    let target = dominated_time_target();
    let set = sample_weighted_paths(
        &reference,
        &target,
        &[0.5, 0.5],
        4.0,
        512,
        &RngStream::new(99, 0),
    )
    .unwrap();
    assert_eq!(set.len(), 512);
    for (path, lw) in set.paths().iter().zip(set.log_weights()) {
        let again = ratechange::sampler::log_weight(
            path,
            &target,
            &reference,
            ratechange::chain::PathDriver::Time,
        )
        .unwrap();
        assert_eq!(lw.log_a, again.log_a);
    }
}
