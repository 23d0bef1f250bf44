//! Exact simulation of the constant-rate reference chain, with a quick
//! check that holding times behave as advertised.
//!
//! Run with `cargo run --example simulate_reference`.

use ratechange::chain::{RateMatrix, StateSpace};
use ratechange::sampler::{simulate_reference_chain, RngStream};

fn main() {
    let space = StateSpace::new(vec!["calm", "windy", "storm"]).unwrap();
    let rates = RateMatrix::new(vec![
        vec![0.0, 0.8, 0.1],
        vec![1.2, 0.0, 0.5],
        vec![0.3, 1.5, 0.0],
    ])
    .unwrap();

    let mut rng = RngStream::new(7, 0);
    let path = simulate_reference_chain(&rates, &[1.0, 0.0, 0.0], 10.0, &mut rng).unwrap();

    println!("one path over [0, 10] as CSV:\n{}", path.to_csv(&space));
    println!(
        "state at t = 5.0 is {:?}, after {} jumps",
        space.label(path.state_at(5.0).unwrap()),
        path.jump_count(5.0).unwrap()
    );

    // Mean holding time in `calm` should approach 1 / leave rate = 1/0.9.
    let mut rng = RngStream::new(7, 1);
    let long = simulate_reference_chain(&rates, &[1.0, 0.0, 0.0], 20_000.0, &mut rng).unwrap();
    let mut calm_time = 0.0;
    let mut calm_exits = 0usize;
    for (lo, hi, s) in long.segments() {
        if s == 0 && hi < long.horizon() {
            calm_time += hi - lo;
            calm_exits += 1;
        }
    }
    println!(
        "empirical mean holding time in `calm`: {:.4} (expected {:.4}) over {calm_exits} visits",
        calm_time / calm_exits as f64,
        1.0 / rates.leave(0)
    );
}
