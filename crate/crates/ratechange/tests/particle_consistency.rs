//! Consistency of the pure weighted particle filter (branching disabled):
//! its error against the direct solver shrinks as the particle count grows.

mod common;

use common::*;
use rayon::prelude::*;

use ratechange::direct::{run_direct_filter, DirectConfig};
use ratechange::model::simulate_joint_target;
use ratechange::particle::{run_particle_filter, unnormalized_estimate, BranchingConfig};
use ratechange::sampler::RngStream;

#[test]
fn weighted_filter_error_decreases_in_n() {
    let model = benchmark_cmom();
    let mut rng = RngStream::new(51, 0);
    let (_, y) = simulate_joint_target(&model, 5.0, &mut rng).unwrap();
    let config = DirectConfig {
        step_hint: 1e-4,
        ..DirectConfig::default()
    };
    let truth = run_direct_filter(&model, &y, &[], &config)
        .unwrap()
        .final_record()
        .sigma[0];

    // r = infinity with no smoothing: particles never branch, this is the
    // plain weighted filter.
    let rms_error = |n: usize, reps: u64| -> f64 {
        let mse: f64 = (0..reps)
            .into_par_iter()
            .map(|k| {
                let mut cfg =
                    BranchingConfig::new(f64::INFINITY, 0.0, RngStream::new(52, k)).unwrap();
                let (ensemble, _) =
                    run_particle_filter(&model, &y, n, &mut cfg, &RngStream::new(53 + k, 0))
                        .unwrap();
                let est = unnormalized_estimate(&ensemble, |x| (x == 0) as u8 as f64).unwrap();
                (est - truth).powi(2)
            })
            .sum::<f64>()
            / reps as f64;
        mse.sqrt()
    };

    let errors = [
        rms_error(100, 48),
        rms_error(1_000, 24),
        rms_error(10_000, 12),
    ];
    println!("weighted-filter RMS errors over N = 1e2, 1e3, 1e4: {errors:?}");
    assert!(
        errors[0] > errors[1] && errors[1] > errors[2],
        "errors should decrease with N: {errors:?}"
    );
    // Each tenfold N should shrink the error by roughly sqrt(10); accept
    // anything meaningfully contractive.
    assert!(errors[2] < errors[0] / 4.0);
}
