//! Residual-branching particle filter along a simulated observation record:
//! track the hidden state, watch the population stay near its initial size,
//! and read off the unnormalized mass that Bayes factors are built from.
//!
//! Run with `cargo run --release --example particle_filter_run`.

use ratechange::chain::{RateMatrix, StateSpace, TargetRateFamily};
use ratechange::model::{simulate_joint_target, CmomModel, HiddenDynamics, ObservationModel};
use ratechange::particle::{run_particle_filter, BranchingConfig};
use ratechange::sampler::RngStream;

fn model() -> CmomModel {
    let lambda = RateMatrix::new(vec![vec![0.0, 0.25], vec![0.25, 0.0]]).unwrap();
    let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let g0 = RateMatrix::new(vec![vec![0.0, 1.8], vec![0.4, 0.0]]).unwrap();
    let g1 = RateMatrix::new(vec![vec![0.0, 0.4], vec![1.8, 0.0]]).unwrap();
    CmomModel::new(
        StateSpace::new(vec!["x1", "x2"]).unwrap(),
        HiddenDynamics::Chain(lambda),
        StateSpace::new(vec!["y1", "y2"]).unwrap(),
        ObservationModel::Cmom {
            reference: gbar,
            rates: TargetRateFamily::state_dependent(vec![g0, g1], 1.8).unwrap(),
        },
        vec![0.5, 0.5],
        vec![1.0, 0.0],
    )
    .unwrap()
}

fn main() {
    let model = model();
    let horizon = 8.0;

    // Synthetic truth: a joint draw from the target law.
    let mut rng = RngStream::new(5, 0);
    let (x_true, y) = simulate_joint_target(&model, horizon, &mut rng).unwrap();

    let n = 20_000;
    let mut config = BranchingConfig::new(1.5, 0.1, RngStream::new(6, 1)).unwrap();
    let (ensemble, records) =
        run_particle_filter(&model, &y, n, &mut config, &RngStream::new(6, 0)).unwrap();

    println!(
        "N = {n} particles, r = 1.5, {} observation events\n",
        y.events().len()
    );
    println!(
        "{:>8} {:>10} {:>12} {:>8} {:>8}",
        "t", "particles", "log sigma(1)", "pi(x1)", "truth"
    );
    for rec in &records {
        let truth = x_true.state_at(rec.t.min(horizon)).unwrap();
        println!(
            "{:>8.3} {:>10} {:>12.4} {:>8.4} {:>8}",
            rec.t,
            rec.particle_count,
            rec.log_sigma_one,
            rec.pi[0],
            if truth == 0 { "x1" } else { "x2" }
        );
    }
    println!(
        "\nfinal population {} (started at {n}); integrated likelihood log sigma(1) = {:.4}",
        ensemble.len(),
        records.last().unwrap().log_sigma_one
    );
}
