//! Slow, independent reference implementations used in tests and the
//! acceptance suite: empirical generator estimation from simulated paths, a
//! dense Pade matrix exponential, fine-step Euler integration of the
//! unnormalized filtering system, and conditional Monte Carlo for the
//! unnormalized filter.
//!
//! Nothing here shares numerical kernels with the production solvers; that
//! is the point. They ship in the library so the acceptance checks are
//! reproducible by users.

use rayon::prelude::*;

use crate::chain::ChainPath;
use crate::error::{Error, Result};
use crate::model::{joint_log_weight, simulate_hidden, CmomModel, ObsSequence};
use crate::sampler::RngStream;

/// Transition-rate estimates from observed paths: `rate = count / exposure`
/// with Poisson standard errors `sqrt(count) / exposure`. Rows with zero
/// exposure are flagged rather than estimated.
#[derive(Debug, Clone)]
pub struct RateEstimate {
    pub rates: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub exposure: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl RateEstimate {
    fn from_counts(counts: Vec<Vec<f64>>, exposure: Vec<f64>) -> Self {
        let dim = exposure.len();
        let mut rates = vec![vec![0.0; dim]; dim];
        let mut stderr = vec![vec![0.0; dim]; dim];
        let mut flagged = vec![false; dim];
        for i in 0..dim {
            if exposure[i] > 0.0 {
                for j in 0..dim {
                    rates[i][j] = counts[i][j] / exposure[i];
                    stderr[i][j] = counts[i][j].sqrt() / exposure[i];
                }
            } else {
                flagged[i] = true;
            }
        }
        Self {
            rates,
            stderr,
            exposure,
            flagged,
        }
    }

    /// True when `target[i][j]` is within `k` standard errors of the
    /// estimate for every off-diagonal entry of an unflagged row.
    pub fn within_stderr(&self, target: &[Vec<f64>], k: f64) -> bool {
        let dim = self.exposure.len();
        for i in 0..dim {
            if self.flagged[i] {
                continue;
            }
            for j in 0..dim {
                if i == j {
                    continue;
                }
                let tol = k * self.stderr[i][j];
                if (self.rates[i][j] - target[i][j]).abs() > tol.max(1e-12) {
                    return false;
                }
            }
        }
        true
    }
}

/// Estimates a constant generator from paths: time spent in each state and
/// transition counts between states.
pub fn empirical_generator(paths: &[ChainPath], dim: usize) -> Result<RateEstimate> {
    if paths.is_empty() {
        return Err(Error::Domain("need at least one path".into()));
    }
    let mut counts = vec![vec![0.0; dim]; dim];
    let mut exposure = vec![0.0; dim];
    for p in paths {
        for (lo, hi, s) in p.segments() {
            exposure[s] += hi - lo;
        }
        let mut from = p.initial_state();
        for (&_w, &to) in p.jump_times().iter().zip(p.jump_targets()) {
            counts[from][to] += 1.0;
            from = to;
        }
    }
    Ok(RateEstimate::from_counts(counts, exposure))
}

/// Per-window generator estimates for piecewise-constant-in-time rates.
/// A jump at time `w` is attributed to the window with `lo <= w < hi`
/// (rates are right-continuous); exposure is the occupation time inside the
/// window.
pub fn empirical_generator_windowed(
    paths: &[ChainPath],
    dim: usize,
    windows: &[(f64, f64)],
) -> Result<Vec<RateEstimate>> {
    if paths.is_empty() {
        return Err(Error::Domain("need at least one path".into()));
    }
    let mut out = Vec::with_capacity(windows.len());
    for &(a, b) in windows {
        if !(b > a) {
            return Err(Error::Domain(format!("bad window [{a}, {b})")));
        }
        let mut counts = vec![vec![0.0; dim]; dim];
        let mut exposure = vec![0.0; dim];
        for p in paths {
            for (lo, hi, s) in p.segments() {
                let lo = lo.max(a);
                let hi = hi.min(b);
                if hi > lo {
                    exposure[s] += hi - lo;
                }
            }
            let mut from = p.initial_state();
            for (&w, &to) in p.jump_times().iter().zip(p.jump_targets()) {
                if w >= a && w < b {
                    counts[from][to] += 1.0;
                }
                from = to;
            }
        }
        out.push(RateEstimate::from_counts(counts, exposure));
    }
    Ok(out)
}

/// Conditional generator estimates: transitions of `paths[k]` bucketed by
/// the simultaneous value of `hidden[k]` (right-continuous at the jump), one
/// estimate per hidden state.
pub fn empirical_generator_conditional(
    paths: &[ChainPath],
    hidden: &[ChainPath],
    dim: usize,
    hidden_dim: usize,
) -> Result<Vec<RateEstimate>> {
    if paths.len() != hidden.len() || paths.is_empty() {
        return Err(Error::Domain(
            "need equally many observation and hidden paths".into(),
        ));
    }
    let mut counts = vec![vec![vec![0.0; dim]; dim]; hidden_dim];
    let mut exposure = vec![vec![0.0; dim]; hidden_dim];
    for (p, x) in paths.iter().zip(hidden) {
        for (lo, hi, s) in p.segments() {
            // Split the observation segment at hidden jumps.
            for (xlo, xhi, xs) in x.segments() {
                let a = lo.max(xlo);
                let b = hi.min(xhi);
                if b > a {
                    exposure[xs][s] += b - a;
                }
            }
        }
        let mut from = p.initial_state();
        for (&w, &to) in p.jump_times().iter().zip(p.jump_targets()) {
            let xs = x.state_at(w)?;
            counts[xs][from][to] += 1.0;
            from = to;
        }
    }
    Ok(counts
        .into_iter()
        .zip(exposure)
        .map(|(c, e)| RateEstimate::from_counts(c, e))
        .collect())
}

// ---------------------------------------------------------------------------
// Dense matrix exponential (Pade 13 with scaling and squaring).
// ---------------------------------------------------------------------------

fn mat_identity(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

fn mat_add_scaled(acc: &mut [Vec<f64>], m: &[Vec<f64>], s: f64) {
    for (ra, rm) in acc.iter_mut().zip(m) {
        for (a, &v) in ra.iter_mut().zip(rm) {
            *a += s * v;
        }
    }
}

fn mat_norm1(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    (0..n)
        .map(|j| a.iter().map(|row| row[j].abs()).sum())
        .fold(0.0, f64::max)
}

/// Solves `A X = B` in place by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Numerical("singular matrix in Pade solve".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            for k in 0..n {
                let v = b[col][k];
                b[row][k] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..n {
            let mut v = b[col][k];
            for j in (col + 1)..n {
                v -= a[col][j] * b[j][k];
            }
            b[col][k] = v / a[col][col];
        }
    }
    Ok(b)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// `exp(t Q)` by scaling-and-squaring with the Pade(13) approximant.
/// For generator matrices the row sums of the result equal 1 up to
/// rounding.
pub fn dense_expm(q: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
    let n = q.len();
    if n == 0 || q.iter().any(|r| r.len() != n) {
        return Err(Error::Domain("matrix must be square and non-empty".into()));
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("t must be finite, got {t}")));
    }
    let mut a: Vec<Vec<f64>> = q
        .iter()
        .map(|row| row.iter().map(|&v| v * t).collect())
        .collect();
    let norm = mat_norm1(&a);
    if !norm.is_finite() {
        return Err(Error::Numerical("matrix norm overflowed".into()));
    }
    let theta13 = 5.371920351148152;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(s as i32);
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let a2 = mat_mul(&a, &a);
    let a4 = mat_mul(&a2, &a2);
    let a6 = mat_mul(&a2, &a4);
    let eye = mat_identity(n);

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    let mut w1 = vec![vec![0.0; n]; n];
    mat_add_scaled(&mut w1, &a6, PADE13[13]);
    mat_add_scaled(&mut w1, &a4, PADE13[11]);
    mat_add_scaled(&mut w1, &a2, PADE13[9]);
    let mut w = mat_mul(&a6, &w1);
    mat_add_scaled(&mut w, &a6, PADE13[7]);
    mat_add_scaled(&mut w, &a4, PADE13[5]);
    mat_add_scaled(&mut w, &a2, PADE13[3]);
    mat_add_scaled(&mut w, &eye, PADE13[1]);
    let u = mat_mul(&a, &w);

    // V = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let mut z1 = vec![vec![0.0; n]; n];
    mat_add_scaled(&mut z1, &a6, PADE13[12]);
    mat_add_scaled(&mut z1, &a4, PADE13[10]);
    mat_add_scaled(&mut z1, &a2, PADE13[8]);
    let mut v = mat_mul(&a6, &z1);
    mat_add_scaled(&mut v, &a6, PADE13[6]);
    mat_add_scaled(&mut v, &a4, PADE13[4]);
    mat_add_scaled(&mut v, &a2, PADE13[2]);
    mat_add_scaled(&mut v, &eye, PADE13[0]);

    // (V - U) X = (V + U)
    let mut vmu = v.clone();
    mat_add_scaled(&mut vmu, &u, -1.0);
    let mut vpu = v;
    mat_add_scaled(&mut vpu, &u, 1.0);
    let mut x = solve_linear(vmu, vpu)?;

    for _ in 0..s {
        x = mat_mul(&x, &x);
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Explicit Euler integration of the unnormalized filtering system.
// ---------------------------------------------------------------------------

/// A record of the Euler reference trajectory: time and unnormalized filter
/// vector (absolute scale).
pub type EulerRecord = (f64, Vec<f64>);

/// Explicit Euler integration of the filtering drift between observation
/// events plus the multiplicative update at events. Emits the initial
/// vector, the post-update vector at each event, and the final vector at the
/// horizon.
///
/// This bypasses the Trotter machinery entirely and serves as its
/// convergence reference; `h` should be small (1e-4 or less in oracle use).
pub fn euler_reference_filter(
    model: &CmomModel,
    y: &ObsSequence,
    h: f64,
) -> Result<Vec<EulerRecord>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let generator = model
        .hidden()
        .generator()
        .ok_or_else(|| Error::Domain("Euler oracle needs a finite hidden chain".into()))?;
    let m = model.hidden_space().len();
    let mut sigma: Vec<f64> = model.init_hidden().to_vec();
    let mut records = vec![(0.0, sigma.clone())];
    let mut t = 0.0;
    let mut y_prev = y.initial();

    let drift = |y_state: usize| -> Result<Vec<Vec<f64>>> {
        let mut d = vec![vec![0.0; m]; m];
        let ref_rate = model.observation().reference_event_rate(y_state);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    // adjoint generator: inflow lambda_{j -> i}
                    d[i][j] = generator.rate(j, i);
                }
            }
            d[i][i] =
                ref_rate - model.observation().target_event_rate(y_state, i)? - generator.leave(i);
        }
        Ok(d)
    };

    let integrate = |sigma: &mut Vec<f64>, y_state: usize, from: f64, to: f64| -> Result<()> {
        let d = drift(y_state)?;
        let mut s = from;
        while s < to {
            let step = h.min(to - s);
            let mut next = sigma.clone();
            for i in 0..m {
                let mut dv = 0.0;
                for j in 0..m {
                    dv += d[i][j] * sigma[j];
                }
                next[i] += step * dv;
            }
            *sigma = next;
            if sigma.iter().any(|v| v.abs() > 1e12) {
                return Err(Error::Numerical(
                    "Euler iteration unstable; decrease the step size".into(),
                ));
            }
            s += step;
        }
        Ok(())
    };

    for &(t_n, sym) in y.events() {
        integrate(&mut sigma, y_prev, t, t_n)?;
        for (i, v) in sigma.iter_mut().enumerate() {
            let reference = model.observation().reference_transition_rate(y_prev, sym);
            if reference <= 0.0 {
                return Err(Error::AbsoluteContinuity {
                    from: y_prev,
                    to: sym,
                    at: t_n,
                });
            }
            *v *= model.observation().target_transition_rate(y_prev, sym, i)? / reference;
        }
        records.push((t_n, sigma.clone()));
        t = t_n;
        y_prev = sym;
    }
    if t < y.horizon() {
        integrate(&mut sigma, y_prev, t, y.horizon())?;
    }
    records.push((y.horizon(), sigma.clone()));
    Ok(records)
}

// ---------------------------------------------------------------------------
// Conditional Monte Carlo for the unnormalized filter.
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of `sigma_T(f)` for a fixed observation record:
/// simulate hidden paths under their own law, weight each by the joint
/// likelihood against the frozen observations, and average `A f(X_T)`.
/// This is the weighted particle filter with no branching.
pub fn conditional_mc_sigma<F>(
    model: &CmomModel,
    y: &ObsSequence,
    f: F,
    samples: usize,
    rng: &RngStream,
) -> Result<(f64, f64)>
where
    F: Fn(usize) -> f64 + Sync,
{
    if samples < 2 {
        return Err(Error::Domain("need at least 2 samples".into()));
    }
    let t = y.horizon();
    let values: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut stream = rng.substream(k as u64);
            let x = simulate_hidden(model, t, &mut stream)?;
            let w = joint_log_weight(&x, y, model, t)?;
            Ok(w.weight() * f(x.state_at(t)?))
        })
        .collect();
    let mut acc = Vec::with_capacity(samples);
    for v in values {
        acc.push(v?);
    }
    let n = samples as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{RateMatrix, StateSpace, TargetRateFamily};
    use crate::model::{HiddenDynamics, ObservationModel};
    use crate::sampler::simulate_reference_chain;

    #[test]
    fn expm_at_zero_is_identity() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let p = dense_expm(&q, 0.0).unwrap();
        assert_eq!(p, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn expm_matches_two_state_closed_form() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        for &t in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            let p = dense_expm(&q, t).unwrap();
            let on = 0.5 * (1.0 + (-2.0 * t).exp());
            let off = 0.5 * (1.0 - (-2.0 * t).exp());
            assert!((p[0][0] - on).abs() < 1e-12, "t={t}");
            assert!((p[0][1] - off).abs() < 1e-12, "t={t}");
            assert!((p[1][0] - off).abs() < 1e-12, "t={t}");
            assert!((p[1][1] - on).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn expm_preserves_generator_row_sums() {
        let q = vec![
            vec![-3.0, 1.0, 2.0],
            vec![0.5, -0.7, 0.2],
            vec![4.0, 1.0, -5.0],
        ];
        let p = dense_expm(&q, 2.5).unwrap();
        for row in &p {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn generator_estimate_recovers_unit_rate() {
        let rates = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut rng = RngStream::new(5, 0);
        let path = simulate_reference_chain(&rates, &[1.0, 0.0], 1e4, &mut rng).unwrap();
        let est = empirical_generator(&[path], 2).unwrap();
        for i in 0..2 {
            let j = 1 - i;
            assert!(
                (est.rates[i][j] - 1.0).abs() <= 3.0 * est.stderr[i][j],
                "rate {} +- {}",
                est.rates[i][j],
                est.stderr[i][j]
            );
        }
    }

    #[test]
    fn no_jump_path_flags_unvisited_rows() {
        let p = ChainPath::constant(0, 5.0).unwrap();
        let est = empirical_generator(&[p], 3).unwrap();
        assert!(!est.flagged[0], "occupied state is estimated");
        assert!(
            est.flagged[1] && est.flagged[2],
            "unvisited states are flagged"
        );
        assert!(est.rates[0].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn windowed_estimates_split_time_segments() {
        // One deterministic path: stay in 0 until 1.0, then in 1 until 2.0.
        let p = ChainPath::new(0, vec![1.0], vec![1], 2.0).unwrap();
        let ests = empirical_generator_windowed(&[p], 2, &[(0.0, 1.0), (1.0, 2.0)]).unwrap();
        // The jump at t = 1.0 is attributed to the second window.
        assert_eq!(ests[0].rates[0][1], 0.0);
        assert_eq!(ests[1].rates[0][1], 0.0); // exposure of state 0 in window 2 is 0
        assert!(ests[1].flagged[0]);
        assert!((ests[0].exposure[0] - 1.0).abs() < 1e-14);
        assert!((ests[1].exposure[1] - 1.0).abs() < 1e-14);
    }

    fn reference_equal_model() -> CmomModel {
        let lambda = RateMatrix::new(vec![vec![0.0, 0.4], vec![0.6, 0.0]]).unwrap();
        let gbar = RateMatrix::new(vec![vec![0.0, 0.8], vec![0.7, 0.0]]).unwrap();
        CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Chain(lambda),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                rates: TargetRateFamily::state_dependent(vec![gbar.clone(), gbar.clone()], 1.0)
                    .unwrap(),
                reference: gbar,
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn euler_total_mass_constant_when_target_equals_reference() {
        let model = reference_equal_model();
        let mut rng = RngStream::new(2, 0);
        let (_, y) = crate::model::simulate_joint_reference(&model, 3.0, &mut rng).unwrap();
        let records = euler_reference_filter(&model, &y, 1e-3).unwrap();
        for (t, sigma) in records {
            let total: f64 = sigma.iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "sigma({t})(1) = {total}");
        }
    }

    #[test]
    fn euler_error_halves_with_the_step() {
        let model = crate_test_model();
        let mut rng = RngStream::new(3, 0);
        let (_, y) = crate::model::simulate_joint_target(&model, 2.0, &mut rng).unwrap();
        let run = |h: f64| {
            euler_reference_filter(&model, &y, h)
                .unwrap()
                .last()
                .unwrap()
                .1
                .clone()
        };
        let coarse = run(1e-3);
        let mid = run(5e-4);
        let fine = run(2.5e-4);
        let d1: f64 = coarse.iter().zip(&mid).map(|(a, b)| (a - b).abs()).sum();
        let d2: f64 = mid.iter().zip(&fine).map(|(a, b)| (a - b).abs()).sum();
        let ratio = d1 / d2;
        assert!(
            (1.5..2.6).contains(&ratio),
            "first-order convergence expected, got ratio {ratio}"
        );
    }

    fn crate_test_model() -> CmomModel {
        let lambda = RateMatrix::new(vec![vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let g0 = RateMatrix::new(vec![vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let g1 = RateMatrix::new(vec![vec![0.0, 0.5], vec![2.0, 0.0]]).unwrap();
        CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Chain(lambda),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                reference: gbar,
                rates: TargetRateFamily::state_dependent(vec![g0, g1], 2.0).unwrap(),
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn conditional_mc_is_exactly_one_for_reference_model() {
        let model = reference_equal_model();
        let mut rng = RngStream::new(8, 0);
        let (_, y) = crate::model::simulate_joint_reference(&model, 4.0, &mut rng).unwrap();
        let (est, stderr) =
            conditional_mc_sigma(&model, &y, |_| 1.0, 256, &RngStream::new(9, 0)).unwrap();
        assert!((est - 1.0).abs() < 1e-12, "weights are identically one");
        assert!(stderr < 1e-12);
    }

    #[test]
    fn conditional_mc_stderr_scales_like_inverse_sqrt_m() {
        let model = crate_test_model();
        let mut rng = RngStream::new(12, 0);
        let (_, y) = crate::model::simulate_joint_target(&model, 3.0, &mut rng).unwrap();
        let (_, s1) =
            conditional_mc_sigma(&model, &y, |_| 1.0, 2_000, &RngStream::new(1, 0)).unwrap();
        let (_, s2) =
            conditional_mc_sigma(&model, &y, |_| 1.0, 32_000, &RngStream::new(1, 1)).unwrap();
        let ratio = s1 / s2;
        assert!(
            (2.8..5.7).contains(&ratio),
            "stderr should shrink like 1/sqrt(M): ratio {ratio} for 16x samples"
        );
    }
}
