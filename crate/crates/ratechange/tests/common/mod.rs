//! Benchmark models shared by the integration and acceptance suites.
//! Each suite uses its own subset.
#![allow(dead_code)]

use ratechange::chain::{RateMatrix, StateSpace, TargetRateFamily};
use ratechange::model::{CmomModel, CthmmModel, HiddenDynamics, ObservationModel};

pub fn rate(rows: Vec<Vec<f64>>) -> RateMatrix {
    RateMatrix::new(rows).unwrap()
}

/// Two-state flip chain at unit rate, the standard reference.
pub fn unit_flip() -> RateMatrix {
    rate(vec![vec![0.0, 1.0], vec![1.0, 0.0]])
}

/// Piecewise-constant-in-time target dominated by the unit reference
/// (all entry ratios <= 1), so the whole-horizon weight is bounded by
/// `exp(sup-gap * T)`.
pub fn dominated_time_target() -> TargetRateFamily {
    let seg1 = rate(vec![vec![0.0, 0.5], vec![0.8, 0.0]]);
    let seg2 = rate(vec![vec![0.0, 0.9], vec![0.6, 0.0]]);
    TargetRateFamily::piecewise_time(vec![0.0, 1.0], vec![seg1, seg2], 1.0).unwrap()
}

/// Certified weight bound for [`dominated_time_target`] on `[0, horizon]`:
/// ratios are <= 1 and the integrand gap is at most 0.5.
pub fn dominated_bound(horizon: f64) -> f64 {
    (0.5 * horizon).exp()
}

/// The 2-hidden x 2-observation benchmark. Rates are kept modest so the
/// fine-step Euler oracle resolves the trajectory to ~1e-7 at h = 1e-6.
pub fn benchmark_cmom() -> CmomModel {
    let lambda = rate(vec![vec![0.0, 0.25], vec![0.25, 0.0]]);
    let gbar = rate(vec![vec![0.0, 0.4], vec![0.4, 0.0]]);
    let g0 = rate(vec![vec![0.0, 0.6], vec![0.25, 0.0]]);
    let g1 = rate(vec![vec![0.0, 0.25], vec![0.6, 0.0]]);
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

/// Model-selection benchmark: frequent observations (about 70 events over
/// `T = 10`) whose rates all scale by `factor`, so a 25% perturbation is
/// `factor = 1.25`. The intensity channel gives the Bayes factor a strong,
/// stable signal at desk scale.
pub fn discrimination_cmom(factor: f64) -> CmomModel {
    let lambda = rate(vec![vec![0.0, 0.25], vec![0.25, 0.0]]);
    let gbar = rate(vec![vec![0.0, 7.0], vec![7.0, 0.0]]);
    let g0 = rate(vec![vec![0.0, 10.5 * factor], vec![4.4 * factor, 0.0]]);
    let g1 = rate(vec![vec![0.0, 4.4 * factor], vec![10.5 * factor, 0.0]]);
    let bound = (10.5 * factor).max(4.4 * factor) / 7.0 + 0.01;
    CmomModel::new(
        StateSpace::new(vec!["x1", "x2"]).unwrap(),
        HiddenDynamics::Chain(lambda),
        StateSpace::new(vec!["y1", "y2"]).unwrap(),
        ObservationModel::Cmom {
            reference: gbar,
            rates: TargetRateFamily::state_dependent(vec![g0, g1], bound.max(1.01)).unwrap(),
        },
        vec![0.5, 0.5],
        vec![1.0, 0.0],
    )
    .unwrap()
}

/// CTHMM test model: two hidden states with different update rates and
/// emission mixes over two symbols.
pub fn benchmark_cthmm() -> CmomModel {
    ratechange::model::cthmm_to_cmom(&CthmmModel {
        hidden_space: StateSpace::new(vec!["x1", "x2"]).unwrap(),
        hidden: HiddenDynamics::Chain(rate(vec![vec![0.0, 0.5], vec![0.5, 0.0]])),
        obs_space: StateSpace::new(vec!["y1", "y2"]).unwrap(),
        update_rate: vec![1.5, 0.7],
        emission: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        reference_update: 1.0,
        reference_emission: vec![0.5, 0.5],
        init_hidden: vec![0.5, 0.5],
        init_obs: vec![0.5, 0.5],
    })
    .unwrap()
}

/// Four-hidden-state model whose observation rates equal the reference, so
/// the filter reduces to the prior law and `sigma_t(1) = 1`.
pub fn four_state_reference_model() -> (CmomModel, Vec<Vec<f64>>) {
    let lambda_rows = vec![
        vec![0.0, 0.6, 0.2, 0.0],
        vec![0.3, 0.0, 0.4, 0.1],
        vec![0.0, 0.5, 0.0, 0.7],
        vec![0.2, 0.0, 0.3, 0.0],
    ];
    let gbar = rate(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    let model = CmomModel::new(
        StateSpace::numbered(4),
        HiddenDynamics::Chain(rate(lambda_rows.clone())),
        StateSpace::new(vec!["y1", "y2"]).unwrap(),
        ObservationModel::Cmom {
            rates: TargetRateFamily::state_dependent(vec![gbar.clone(); 4], 1.0).unwrap(),
            reference: gbar,
        },
        vec![0.4, 0.3, 0.2, 0.1],
        vec![1.0, 0.0],
    )
    .unwrap();
    (model, lambda_rows)
}

/// Hidden generator of [`four_state_reference_model`] in standard
/// (row = from-state) generator form, for the matrix-exponential oracle.
pub fn generator_matrix(lambda_rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = lambda_rows.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        -lambda_rows[i].iter().sum::<f64>()
                    } else {
                        lambda_rows[i][j]
                    }
                })
                .collect()
        })
        .collect()
}
