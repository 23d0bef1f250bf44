//! Joint simulation of a hidden Markov signal and its Markov-chain
//! observations, under both the reference measure (observations independent
//! of the signal) and the target measure (observation rates driven by the
//! signal), plus the likelihood weight connecting the two.
//!
//! Run with `cargo run --example joint_simulation`.

use ratechange::chain::{RateMatrix, StateSpace, TargetRateFamily};
use ratechange::model::{
    joint_log_weight, simulate_joint_reference, simulate_joint_target, CmomModel, HiddenDynamics,
    ObservationModel,
};
use ratechange::sampler::RngStream;

fn weather_model() -> CmomModel {
    // Hidden climate regime; observed weather flips faster in regime "wet".
    let lambda = RateMatrix::new(vec![vec![0.0, 0.3], vec![0.3, 0.0]]).unwrap();
    let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let dry = RateMatrix::new(vec![vec![0.0, 0.4], vec![1.3, 0.0]]).unwrap();
    let wet = RateMatrix::new(vec![vec![0.0, 1.6], vec![0.5, 0.0]]).unwrap();
    CmomModel::new(
        StateSpace::new(vec!["dry", "wet"]).unwrap(),
        HiddenDynamics::Chain(lambda),
        StateSpace::new(vec!["clear", "rain"]).unwrap(),
        ObservationModel::Cmom {
            reference: gbar,
            rates: TargetRateFamily::state_dependent(vec![dry, wet], 1.6).unwrap(),
        },
        vec![0.5, 0.5],
        vec![1.0, 0.0],
    )
    .unwrap()
}

fn main() {
    let model = weather_model();
    println!("model validation: {}", model.validate());

    let horizon = 6.0;
    let mut rng = RngStream::new(2024, 0);
    let (x_ref, y_ref) = simulate_joint_reference(&model, horizon, &mut rng).unwrap();
    println!(
        "reference draw: signal jumps {}, observation events {} (independent components)",
        x_ref.num_jumps(),
        y_ref.events().len()
    );
    let w = joint_log_weight(&x_ref, &y_ref, &model, horizon).unwrap();
    println!(
        "likelihood weight of the reference pair: log A = {:.4}",
        w.log_a
    );

    let mut rng = RngStream::new(2024, 1);
    let (x_tgt, y_tgt) = simulate_joint_target(&model, horizon, &mut rng).unwrap();
    println!(
        "\ntarget draw (thinning): signal CSV\n{}",
        x_tgt.to_csv(model.hidden_space())
    );
    println!("observations CSV\n{}", y_tgt.to_csv(model.obs_space()));

    // The weight of a target-law pair is typically above 1 when the signal
    // explains the observations better than the reference does.
    let w = joint_log_weight(&x_tgt, &y_tgt, &model, horizon).unwrap();
    println!(
        "likelihood weight of the target pair: log A = {:.4}",
        w.log_a
    );
}
