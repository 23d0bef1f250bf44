//! The direct solver of the unnormalized filtering equation: Trotter-product
//! evolution between observation events, multiplicative update at events,
//! cross-checked here against a large particle filter on the same record.
//!
//! Run with `cargo run --release --example direct_filter_run`.

use ratechange::chain::{RateMatrix, StateSpace, TargetRateFamily};
use ratechange::direct::{run_direct_filter, DirectConfig};
use ratechange::model::{simulate_joint_target, CmomModel, HiddenDynamics, ObservationModel};
use ratechange::particle::{run_particle_filter, BranchingConfig};
use ratechange::sampler::RngStream;

fn model() -> CmomModel {
    let lambda = RateMatrix::new(vec![vec![0.0, 0.25], vec![0.25, 0.0]]).unwrap();
    let gbar = RateMatrix::new(vec![vec![0.0, 0.4], vec![0.4, 0.0]]).unwrap();
    let g0 = RateMatrix::new(vec![vec![0.0, 0.6], vec![0.25, 0.0]]).unwrap();
    let g1 = RateMatrix::new(vec![vec![0.0, 0.25], vec![0.6, 0.0]]).unwrap();
    CmomModel::new(
        StateSpace::new(vec!["x1", "x2"]).unwrap(),
        HiddenDynamics::Chain(lambda),
        StateSpace::new(vec!["y1", "y2"]).unwrap(),
        ObservationModel::Cmom {
            reference: gbar,
            rates: TargetRateFamily::state_dependent(vec![g0, g1], 1.5).unwrap(),
        },
        vec![0.5, 0.5],
        vec![1.0, 0.0],
    )
    .unwrap()
}

fn main() {
    let model = model();
    let horizon = 5.0;
    let mut rng = RngStream::new(2024, 0);
    let (_, y) = simulate_joint_target(&model, horizon, &mut rng).unwrap();

    let config = DirectConfig::default();
    let run = run_direct_filter(&model, &y, &[1.0, 2.0, 3.0, 4.0], &config).unwrap();

    println!(
        "{:>8} {:>6} {:>12} {:>12} {:>10}",
        "t", "event", "sigma(x1)", "sigma(x2)", "pi(x1)"
    );
    for rec in &run.records {
        println!(
            "{:>8.3} {:>6} {:>12.6} {:>12.6} {:>10.5}",
            rec.t,
            format!("{:?}", rec.event).to_lowercase(),
            rec.sigma[0],
            rec.sigma[1],
            rec.pi[0]
        );
    }
    println!(
        "(negative-mass clamps during the run: {})",
        run.clamped_entries
    );

    // A large particle filter lands on the same trajectory.
    let mut pf_config = BranchingConfig::new(1.5, 0.1, RngStream::new(7, 1)).unwrap();
    let (_, pf_records) =
        run_particle_filter(&model, &y, 50_000, &mut pf_config, &RngStream::new(7, 0)).unwrap();
    println!("\ndirect vs particle filter (N = 50k) at observation times:");
    for pf in &pf_records {
        if let Some(d) = run.records.iter().find(|r| r.t == pf.t) {
            println!(
                "  t = {:>6.3}: pi(x1) direct {:.5}, particle {:.5} (diff {:+.5})",
                pf.t,
                d.pi[0],
                pf.pi[0],
                pf.pi[0] - d.pi[0]
            );
        }
    }
}
