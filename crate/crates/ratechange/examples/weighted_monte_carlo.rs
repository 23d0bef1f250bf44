//! Importance sampling without rejection: simulate cheap reference paths,
//! weight them, and estimate target-law expectations directly.
//!
//! Run with `cargo run --release --example weighted_monte_carlo`.

use ratechange::chain::{ChainPath, RateMatrix, TargetRateFamily};
use ratechange::oracles::dense_expm;
use ratechange::sampler::{weighted_expectation, RngStream};

fn main() {
    let reference = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let target_rates = RateMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
    let target = TargetRateFamily::constant(target_rates, 2.0);
    let horizon = 2.0;
    let samples = 200_000;
    let rng = RngStream::new(11, 0);

    // The weight is a mean-one martingale: estimating the constant 1 is the
    // standard self-test.
    let (mass, se) = weighted_expectation(
        |_| 1.0,
        &reference,
        &target,
        &[1.0, 0.0],
        horizon,
        samples,
        &rng,
    )
    .unwrap();
    println!("E[weight] = {mass:.5} +- {se:.5} (should be 1)");

    // Occupancy of state 2 at the horizon, checked against the forward
    // equation solved by matrix exponential.
    let (occ, se_occ) = weighted_expectation(
        |p: &ChainPath| (p.final_state() == 1) as u8 as f64,
        &reference,
        &target,
        &[1.0, 0.0],
        horizon,
        samples,
        &rng.substream(1),
    )
    .unwrap();
    let p = dense_expm(&[vec![-2.0, 2.0], vec![1.0, -1.0]], horizon).unwrap();
    println!(
        "P(Y_T = 2): importance estimate {occ:.5} +- {se_occ:.5}, forward equation {:.5}",
        p[0][1]
    );

    // Path functionals work the same way; no rejection step is ever needed.
    let (jumps, se_j) = weighted_expectation(
        |p: &ChainPath| p.num_jumps() as f64,
        &reference,
        &target,
        &[1.0, 0.0],
        horizon,
        samples,
        &rng.substream(2),
    )
    .unwrap();
    println!("E[target jump count over [0, 2]] = {jumps:.4} +- {se_j:.4}");
}
