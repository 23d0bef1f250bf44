//! Model validation: the structural conditions a rate-change pair must
//! satisfy, and what the report looks like when they fail.
//!
//! Run with `cargo run --example validate_model`.

use ratechange::chain::{validate, RateMatrix, TargetRateFamily};

fn main() {
    // A healthy pair: symmetric reference, a slightly tilted target, and a
    // declared bound on the leave-rate ratio that actually holds.
    let reference = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let target = TargetRateFamily::constant(
        RateMatrix::new(vec![vec![0.0, 1.5], vec![0.7, 0.0]]).unwrap(),
        1.5,
    );
    println!("well-formed pair: {}", validate(&reference, &target));

    // A cemetery state: once the chain enters state 2 it can never leave,
    // which breaks the positivity condition on leave rates.
    let dead_end = RateMatrix::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let report = validate(&dead_end, &target);
    println!("cemetery reference: {report}");

    // A target that moves along an edge the reference never uses: the
    // likelihood ratio would divide by zero there.
    let reference3 = RateMatrix::new(vec![
        vec![0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ])
    .unwrap();
    let sneaky = TargetRateFamily::constant(
        RateMatrix::new(vec![
            vec![0.0, 0.5, 0.5],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap(),
        2.0,
    );
    println!("undominated edge:   {}", validate(&reference3, &sneaky));

    // An optimistic declared ratio bound is caught too.
    let overconfident = TargetRateFamily::constant(
        RateMatrix::new(vec![vec![0.0, 3.0], vec![0.7, 0.0]]).unwrap(),
        1.1,
    );
    println!(
        "understated bound:  {}",
        validate(&reference, &overconfident)
    );
}
