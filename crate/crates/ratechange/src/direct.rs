//! Exact finite-state solver for the unnormalized filtering system: between
//! observation events the filter vector evolves under the drift semigroup,
//! approximated by powers of a Trotter factor (hidden transition block times
//! a diagonal weight exponential); at events it is updated entrywise by the
//! observation rate ratio.
//!
//! The hidden transition function is computed from the generator by a
//! scaling-and-squaring matrix exponential (users may supply an analytic
//! one instead). The implementation here shares no numerical kernels with
//! the Euler/Pade oracles that check it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::chain::{ConditionId, ValidationReport};
use crate::error::{Error, Result};
use crate::model::{CmomModel, ObsSequence};

/// Dense square matrix, row-major. Private to this module so the solver's
/// kernels stay independent of the oracle implementations.
#[derive(Debug, Clone)]
struct DMat {
    n: usize,
    data: Vec<f64>,
}

impl DMat {
    fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self { n, data }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    fn mul(&self, other: &DMat) -> DMat {
        let n = self.n;
        let mut out = DMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += aik * other.data[k * n + j];
                }
            }
        }
        out
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.data[i * n + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    fn inf_norm(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| self.get(i, j).abs()).sum())
            .fold(0.0, f64::max)
    }

    fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }
}

/// Taylor series for `exp(A)` with `||A||` already scaled below 1/2.
fn expm_taylor(a: &DMat) -> DMat {
    let n = a.n;
    let mut result = DMat::identity(n);
    let mut term = DMat::identity(n);
    for k in 1..=48 {
        term = term.mul(a);
        term.scale(1.0 / k as f64);
        for (r, &t) in result.data.iter_mut().zip(&term.data) {
            *r += t;
        }
        if term.inf_norm() < 1e-20 {
            break;
        }
    }
    result
}

/// Scaling-and-squaring matrix exponential `exp(t Q)`.
fn expm(q: &DMat, t: f64) -> DMat {
    let mut a = q.clone();
    a.scale(t);
    let norm = a.inf_norm();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    a.scale(0.5f64.powi(s as i32));
    let mut x = expm_taylor(&a);
    for _ in 0..s {
        x = x.mul(&x);
    }
    x
}

/// Finite vector of point masses representing the unnormalized filter:
/// the true value is `sigma[i] * exp(log_scale)`, with the common factor
/// pulled out to keep entries well-scaled while `sigma_t(1)` decays or
/// grows exponentially.
#[derive(Debug, Clone)]
pub struct FilterVector {
    sigma: Vec<f64>,
    t: f64,
    log_scale: f64,
}

impl FilterVector {
    /// Starts the recursion at the initial signal law.
    pub fn from_distribution(mu: &[f64], t: f64) -> Result<Self> {
        if mu.is_empty() || mu.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Domain("initial vector must be nonnegative".into()));
        }
        if mu.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain("initial vector must not be all zero".into()));
        }
        Ok(Self {
            sigma: mu.to_vec(),
            t,
            log_scale: 0.0,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// Stored (scaled) entries.
    pub fn scaled_entries(&self) -> &[f64] {
        &self.sigma
    }

    /// Absolute value of `sigma_t({i})`.
    pub fn absolute(&self, i: usize) -> f64 {
        self.sigma[i] * self.log_scale.exp()
    }

    /// All absolute entries.
    pub fn absolute_entries(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .map(|v| v * self.log_scale.exp())
            .collect()
    }

    /// Total mass `sigma_t(1)`.
    pub fn sigma_one(&self) -> f64 {
        self.log_sigma_one().exp()
    }

    pub fn log_sigma_one(&self) -> f64 {
        self.log_scale + self.sigma.iter().sum::<f64>().ln()
    }

    /// Normalized filter `pi_t = sigma_t / sigma_t(1)`.
    pub fn pi(&self) -> Vec<f64> {
        let total: f64 = self.sigma.iter().sum();
        self.sigma.iter().map(|v| v / total).collect()
    }

    /// Pulls the max entry into `log_scale` when entries drift out of
    /// `[1e-2, 1e2]`.
    fn renormalize(&mut self) -> Result<()> {
        let max = self.sigma.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::DegenerateFilter(format!(
                "filter mass vanished at t={}",
                self.t
            )));
        }
        if !(0.01..=100.0).contains(&max) {
            for v in &mut self.sigma {
                *v /= max;
            }
            self.log_scale += max.ln();
        }
        Ok(())
    }
}

/// The drift matrix of the filtering system while the observation sits in
/// state `y`: the adjoint hidden generator plus the diagonal weight
/// `gammabar_{y->} - gamma_{y->}(i)`. Row `j`, column `i` holds the inflow
/// rate `lambda_{i->j}` off the diagonal.
#[derive(Debug, Clone)]
pub struct DriftMatrix {
    rows: Vec<Vec<f64>>,
}

impl DriftMatrix {
    pub fn new(model: &CmomModel, y: usize) -> Result<Self> {
        let generator = require_finite_chain(model)?;
        let m = generator.dim();
        let ref_rate = model.observation().reference_event_rate(y);
        let mut rows = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    rows[j][i] = generator.rate(i, j);
                }
            }
            rows[i][i] =
                ref_rate - model.observation().target_event_rate(y, i)? - generator.leave(i);
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `d sigma = (DriftMatrix sigma) dt` between observation events.
    pub fn apply(&self, sigma: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(sigma).map(|(a, s)| a * s).sum())
            .collect()
    }
}

/// Where the hidden transition function `P_t` comes from.
#[derive(Clone)]
pub enum TransitionSource {
    /// Matrix exponential of the hidden generator.
    Generator,
    /// User-supplied analytic transition function `t -> [P_t(i -> j)]`.
    Analytic(Arc<dyn Fn(f64) -> Vec<Vec<f64>> + Send + Sync>),
}

impl std::fmt::Debug for TransitionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransitionSource::Generator => f.write_str("Generator"),
            TransitionSource::Analytic(_) => f.write_str("Analytic(..)"),
        }
    }
}

/// Solver configuration: the Trotter step hint `h` (each inter-event stretch
/// of length `dt` uses `N_T = max(1, ceil(dt / h))` factor applications) and
/// the transition-function source.
#[derive(Debug, Clone)]
pub struct DirectConfig {
    pub step_hint: f64,
    pub transition: TransitionSource,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            step_hint: 1e-2,
            transition: TransitionSource::Generator,
        }
    }
}

fn require_finite_chain(model: &CmomModel) -> Result<&crate::chain::RateMatrix> {
    model.hidden().generator().ok_or_else(|| {
        Error::Validation(ValidationReport::from_violations(vec![(
            ConditionId::U,
            "the direct solver needs the hidden signal to be a finite Markov chain".into(),
        )]))
    })
}

fn check_stochastic(p: &[Vec<f64>]) -> Result<()> {
    for (i, row) in p.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-10 || row.iter().any(|&v| v < -1e-10) {
            return Err(Error::Oracle(format!(
                "transition function row {i} is not stochastic (sum {s})"
            )));
        }
    }
    Ok(())
}

/// The Trotter factor `S_t`: hidden transition block arranged with column
/// `i` holding `P_t(i -> .)`, times the diagonal weight
/// `exp(t (gammabar_{y->} - gamma_{y->}(i)))`.
pub fn trotter_factor(
    model: &CmomModel,
    y: usize,
    t: f64,
    p_t: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let factor = trotter_factor_mat(model, y, t, &DMat::from_rows(p_t))?;
    Ok(factor.rows())
}

fn trotter_factor_mat(model: &CmomModel, y: usize, t: f64, p_t: &DMat) -> Result<DMat> {
    if t < 0.0 {
        return Err(Error::Domain(format!("t must be >= 0, got {t}")));
    }
    let m = model.hidden_space().len();
    if p_t.n != m {
        return Err(Error::Oracle(format!(
            "transition function is {}x{} but the hidden space has {m} states",
            p_t.n, p_t.n
        )));
    }
    check_stochastic(&p_t.rows())?;
    let ref_rate = model.observation().reference_event_rate(y);
    let mut s = DMat::zeros(m);
    for i in 0..m {
        let weight = (t * (ref_rate - model.observation().target_event_rate(y, i)?)).exp();
        for j in 0..m {
            // Column i of the factor is P_t(i -> .) scaled by state i's weight.
            s.set(j, i, p_t.get(i, j) * weight);
        }
    }
    Ok(s)
}

fn transition_matrix(
    model: &CmomModel,
    config: &DirectConfig,
    h: f64,
    cache: &mut HashMap<u64, DMat>,
) -> Result<DMat> {
    if let Some(m) = cache.get(&h.to_bits()) {
        return Ok(m.clone());
    }
    let p = match &config.transition {
        TransitionSource::Generator => {
            let generator = require_finite_chain(model)?;
            let m = generator.dim();
            let mut q = DMat::zeros(m);
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        q.set(i, j, generator.rate(i, j));
                    }
                }
                q.set(i, i, -generator.leave(i));
            }
            expm(&q, h)
        }
        TransitionSource::Analytic(f) => {
            let rows = f(h);
            check_stochastic(&rows)?;
            DMat::from_rows(&rows)
        }
    };
    cache.insert(h.to_bits(), p.clone());
    Ok(p)
}

/// Evolves the filter vector over a jump-free stretch of length `dt` while
/// the observation sits in `y`: applies the Trotter factor at step
/// `dt / n_steps` that many times, renormalizing the scale after each
/// application. Entries in `[-1e-14, 0)` are clamped to zero (the count is
/// returned); anything more negative is an error.
pub fn evolve_between_jumps(
    fv: &FilterVector,
    model: &CmomModel,
    y: usize,
    dt: f64,
    n_steps: usize,
    config: &DirectConfig,
) -> Result<(FilterVector, usize)> {
    let mut cache = HashMap::new();
    evolve_between_jumps_cached(fv, model, y, dt, n_steps, config, &mut cache)
}

fn evolve_between_jumps_cached(
    fv: &FilterVector,
    model: &CmomModel,
    y: usize,
    dt: f64,
    n_steps: usize,
    config: &DirectConfig,
    cache: &mut HashMap<u64, DMat>,
) -> Result<(FilterVector, usize)> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Domain(format!(
            "dt must be finite and >= 0, got {dt}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be >= 1".into()));
    }
    if dt == 0.0 {
        return Ok((fv.clone(), 0));
    }
    let h = dt / n_steps as f64;
    let p_h = transition_matrix(model, config, h, cache)?;
    let factor = trotter_factor_mat(model, y, h, &p_h)?;
    let mut out = fv.clone();
    let mut clamped = 0usize;
    for _ in 0..n_steps {
        out.sigma = factor.matvec(&out.sigma);
        for v in &mut out.sigma {
            if *v < 0.0 {
                if *v < -1e-14 {
                    return Err(Error::Numerical(format!(
                        "filter entry went negative ({v}) during evolution"
                    )));
                }
                *v = 0.0;
                clamped += 1;
            }
        }
        out.renormalize()?;
    }
    out.t = fv.t + dt;
    Ok((out, clamped))
}

/// Observation-event update: multiply entry `i` by
/// `gamma_{y_prev -> y_new}(i) / gammabar_{y_prev -> y_new}`.
/// CTHMM-kind models may re-emit the same symbol (`y_new == y_prev`).
pub fn jump_update(
    fv: &FilterVector,
    model: &CmomModel,
    y_prev: usize,
    y_new: usize,
) -> Result<FilterVector> {
    if y_new == y_prev && !model.observation().is_cthmm() {
        return Err(Error::Usage(
            "observation cannot re-enter its own state in a CMOM model".into(),
        ));
    }
    let reference = model.observation().reference_transition_rate(y_prev, y_new);
    if reference <= 0.0 {
        return Err(Error::AbsoluteContinuity {
            from: y_prev,
            to: y_new,
            at: fv.t,
        });
    }
    let mut out = fv.clone();
    for (i, v) in out.sigma.iter_mut().enumerate() {
        *v *= model
            .observation()
            .target_transition_rate(y_prev, y_new, i)?
            / reference;
    }
    if out.sigma.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateFilter(format!(
            "update {y_prev}->{y_new} at t={} zeroed the filter; the model cannot produce this observation",
            fv.t
        )));
    }
    out.renormalize()?;
    Ok(out)
}

/// Why a trajectory record was emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordEvent {
    Grid,
    Jump,
}

#[derive(Debug, Clone)]
pub struct DirectRecord {
    pub t: f64,
    pub event: RecordEvent,
    /// Absolute unnormalized filter entries.
    pub sigma: Vec<f64>,
    pub log_sigma_one: f64,
    pub pi: Vec<f64>,
}

/// A full direct-solver run: trajectory records plus numerical bookkeeping.
#[derive(Debug, Clone)]
pub struct DirectRun {
    pub records: Vec<DirectRecord>,
    /// Entries clamped from `[-1e-14, 0)` to zero during the run.
    pub clamped_entries: usize,
}

impl DirectRun {
    pub fn final_record(&self) -> &DirectRecord {
        self.records
            .last()
            .expect("runs emit at least the horizon record")
    }
}

fn record(fv: &FilterVector, event: RecordEvent) -> DirectRecord {
    DirectRecord {
        t: fv.t(),
        event,
        sigma: fv.absolute_entries(),
        log_sigma_one: fv.log_sigma_one(),
        pi: fv.pi(),
    }
}

/// Runs the recursion along a full observation record: from the initial law,
/// alternate drift evolution on `[t_{n-1}, t_n)` (with the observation state
/// frozen at its value from `t_{n-1}`) and the multiplicative update at
/// `t_n`. Records are emitted at every event, every requested grid time, and
/// the horizon.
pub fn run_direct_filter(
    model: &CmomModel,
    y: &ObsSequence,
    grid: &[f64],
    config: &DirectConfig,
) -> Result<DirectRun> {
    if matches!(config.transition, TransitionSource::Generator) {
        require_finite_chain(model)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(
            "grid times must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = grid.last() {
        if last > y.horizon() {
            return Err(Error::Domain(format!(
                "grid time {last} beyond the observation horizon {}",
                y.horizon()
            )));
        }
    }
    let mut cache = HashMap::new();
    let mut fv = FilterVector::from_distribution(model.init_hidden(), 0.0)?;
    let mut records = Vec::new();
    let mut clamped = 0usize;
    let mut y_state = y.initial();
    let mut grid_iter = grid.iter().copied().peekable();
    if grid_iter.peek() == Some(&0.0) {
        grid_iter.next();
        records.push(record(&fv, RecordEvent::Grid));
    }

    let advance = |fv: &mut FilterVector,
                   clamped: &mut usize,
                   cache: &mut HashMap<u64, DMat>,
                   y_state: usize,
                   to: f64|
     -> Result<()> {
        let dt = to - fv.t();
        if dt <= 0.0 {
            return Ok(());
        }
        let n_steps = (dt / config.step_hint).ceil().max(1.0) as usize;
        let (next, c) =
            evolve_between_jumps_cached(fv, model, y_state, dt, n_steps, config, cache)?;
        *fv = next;
        *clamped += c;
        Ok(())
    };

    for &(t_n, sym) in y.events() {
        // Grid emissions inside the stretch use the same frozen y_state.
        while let Some(&g) = grid_iter.peek() {
            if g >= t_n {
                break;
            }
            grid_iter.next();
            advance(&mut fv, &mut clamped, &mut cache, y_state, g)?;
            records.push(record(&fv, RecordEvent::Grid));
        }
        advance(&mut fv, &mut clamped, &mut cache, y_state, t_n)?;
        fv = jump_update(&fv, model, y_state, sym)?;
        records.push(record(&fv, RecordEvent::Jump));
        // A grid point exactly at the event time is covered by the jump record.
        if grid_iter.peek() == Some(&t_n) {
            grid_iter.next();
        }
        y_state = sym;
    }
    for g in grid_iter {
        advance(&mut fv, &mut clamped, &mut cache, y_state, g)?;
        records.push(record(&fv, RecordEvent::Grid));
    }
    if fv.t() < y.horizon() {
        advance(&mut fv, &mut clamped, &mut cache, y_state, y.horizon())?;
        records.push(record(&fv, RecordEvent::Grid));
    } else if records.last().map(|r| r.t) != Some(y.horizon()) {
        records.push(record(&fv, RecordEvent::Grid));
    }
    Ok(DirectRun {
        records,
        clamped_entries: clamped,
    })
}

/// Pairwise Bayes factors `B_{a|b} = sigma^a_T(1) / sigma^b_T(1)` for models
/// sharing the observation space and reference rates.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub log_sigma_one: Vec<f64>,
    pub bayes: Vec<Vec<f64>>,
}

pub fn compare_models(
    models: &[&CmomModel],
    y: &ObsSequence,
    config: &DirectConfig,
) -> Result<CompareOutcome> {
    if models.is_empty() {
        return Err(Error::Domain("need at least one model".into()));
    }
    let fp = models[0].reference_fingerprint();
    for (k, m) in models.iter().enumerate().skip(1) {
        if m.reference_fingerprint() != fp {
            return Err(Error::Mismatch(format!(
                "model {k} does not share the observation space and reference rates of model 0; Bayes factors are only comparable against a common reference"
            )));
        }
    }
    let log_sigma_one: Vec<f64> = models
        .iter()
        .map(|m| {
            Ok(run_direct_filter(m, y, &[], config)?
                .final_record()
                .log_sigma_one)
        })
        .collect::<Result<_>>()?;
    let bayes = log_sigma_one
        .iter()
        .map(|&a| log_sigma_one.iter().map(|&b| (a - b).exp()).collect())
        .collect();
    Ok(CompareOutcome {
        log_sigma_one,
        bayes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{RateMatrix, StateSpace, TargetRateFamily};
    use crate::model::{HiddenDynamics, ObservationModel};
    use crate::oracles::dense_expm;
    use crate::sampler::RngStream;

    fn model_2x2() -> CmomModel {
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

    fn reference_equal_model(hidden: Vec<Vec<f64>>, mu: Vec<f64>) -> CmomModel {
        let m = hidden.len();
        let lambda = RateMatrix::new(hidden).unwrap();
        let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        CmomModel::new(
            StateSpace::numbered(m),
            HiddenDynamics::Chain(lambda),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                rates: TargetRateFamily::state_dependent(vec![gbar.clone(); m], 1.0).unwrap(),
                reference: gbar,
            },
            mu,
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn trotter_factor_at_zero_is_identity() {
        let model = model_2x2();
        let p0 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = trotter_factor(&model, 0, 0.0, &p0).unwrap();
        assert_eq!(s, p0);
    }

    #[test]
    fn trotter_factor_reduces_to_transition_block_when_rates_match() {
        let model = reference_equal_model(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.5, 0.5]);
        let t = 0.37;
        let p = dense_expm(&[vec![-1.0, 1.0], vec![1.0, -1.0]], t).unwrap();
        let s = trotter_factor(&model, 0, t, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (s[j][i] - p[i][j]).abs() < 1e-14,
                    "zero exponents leave the transposed transition block"
                );
            }
        }
    }

    #[test]
    fn trotter_factor_matches_closed_form_transition() {
        let model = model_2x2();
        let t: f64 = 0.5;
        // Hidden flip chain at rate 0.5: P_t = [[(1+e^{-t})/2, (1-e^{-t})/2], ...]
        let on = 0.5 * (1.0 + (-2.0 * 0.5 * t).exp());
        let off = 0.5 * (1.0 - (-2.0 * 0.5 * t).exp());
        let p = vec![vec![on, off], vec![off, on]];
        let s = trotter_factor(&model, 0, t, &p).unwrap();
        // y = 0: gammabar_{0->} = 1, gamma_{0->}(x0) = 2, gamma_{0->}(x1) = 0.5.
        let w0 = (t * (1.0 - 2.0)).exp();
        let w1 = (t * (1.0 - 0.5)).exp();
        assert!((s[0][0] - on * w0).abs() < 1e-10);
        assert!((s[1][0] - off * w0).abs() < 1e-10);
        assert!((s[0][1] - off * w1).abs() < 1e-10);
        assert!((s[1][1] - on * w1).abs() < 1e-10);
    }

    #[test]
    fn nonstochastic_transition_is_an_oracle_error() {
        let model = model_2x2();
        let bad = vec![vec![0.9, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            trotter_factor(&model, 0, 0.1, &bad),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn drift_matrix_assembles_adjoint_plus_diagonal() {
        let model = model_2x2();
        // lambda flips at 0.5; y = 0 has gammabar leave 1, gamma(x0) = 2,
        // gamma(x1) = 0.5.
        let d = DriftMatrix::new(&model, 0).unwrap();
        let expected = [[1.0 - 2.0 - 0.5, 0.5], [0.5, 1.0 - 0.5 - 0.5]];
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(d.rows()[j][i], expected[j][i]);
            }
        }
        // Off-diagonal entries are inflow rates, hence nonnegative.
        assert!(d.rows()[0][1] >= 0.0 && d.rows()[1][0] >= 0.0);
        let v = d.apply(&[0.4, 0.6]);
        assert!((v[0] - (-1.5 * 0.4 + 0.5 * 0.6)).abs() < 1e-15);
    }

    #[test]
    fn zero_dt_leaves_the_vector_unchanged() {
        let model = model_2x2();
        let fv = FilterVector::from_distribution(&[0.5, 0.5], 1.0).unwrap();
        let (out, clamped) =
            evolve_between_jumps(&fv, &model, 0, 0.0, 4, &DirectConfig::default()).unwrap();
        assert_eq!(out.absolute_entries(), fv.absolute_entries());
        assert_eq!(clamped, 0);
    }

    #[test]
    fn reference_rates_reduce_to_kolmogorov_forward() {
        let model = reference_equal_model(vec![vec![0.0, 0.7], vec![0.3, 0.0]], vec![0.8, 0.2]);
        let fv = FilterVector::from_distribution(&[0.8, 0.2], 0.0).unwrap();
        let t = 2.0;
        let (out, _) =
            evolve_between_jumps(&fv, &model, 0, t, 200, &DirectConfig::default()).unwrap();
        assert!(
            (out.sigma_one() - 1.0).abs() < 1e-8,
            "sigma(1) = {}",
            out.sigma_one()
        );
        let p = dense_expm(&[vec![-0.7, 0.7], vec![0.3, -0.3]], t).unwrap();
        // Forward law: sigma_j = sum_i mu_i P_t(i -> j).
        for j in 0..2 {
            let expected = 0.8 * p[0][j] + 0.2 * p[1][j];
            assert!(
                (out.absolute(j) - expected).abs() < 1e-8,
                "entry {j}: {} vs {expected}",
                out.absolute(j)
            );
        }
    }

    #[test]
    fn trotter_error_halves_when_steps_double() {
        let model = model_2x2();
        let fv = FilterVector::from_distribution(&[0.5, 0.5], 0.0).unwrap();
        let config = DirectConfig::default();
        let run = |n: usize| {
            evolve_between_jumps(&fv, &model, 0, 1.0, n, &config)
                .unwrap()
                .0
                .absolute_entries()
        };
        let exact = run(65536);
        let err = |n: usize| -> f64 { run(n).iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum() };
        let e4 = err(4);
        let e8 = err(8);
        let e16 = err(16);
        let r1 = e4 / e8;
        let r2 = e8 / e16;
        assert!(
            (1.6..2.6).contains(&r1) && (1.6..2.6).contains(&r2),
            "first-order Trotter convergence expected: ratios {r1}, {r2}"
        );
    }

    #[test]
    fn jump_update_hand_example() {
        // sigma = (0.3, 0.7), factors (2, 4): result (0.6, 2.8).
        let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let g0 = RateMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let g1 = RateMatrix::new(vec![vec![0.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let model = CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Chain(RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                reference: gbar,
                rates: TargetRateFamily::state_dependent(vec![g0, g1], 4.0).unwrap(),
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        let fv = FilterVector::from_distribution(&[0.3, 0.7], 1.0).unwrap();
        let out = jump_update(&fv, &model, 0, 1).unwrap();
        assert!((out.absolute(0) - 0.6).abs() < 1e-14);
        assert!((out.absolute(1) - 2.8).abs() < 1e-14);
    }

    #[test]
    fn jump_update_is_identity_for_reference_rates() {
        let model = reference_equal_model(vec![vec![0.0, 0.5], vec![0.5, 0.0]], vec![0.5, 0.5]);
        let fv = FilterVector::from_distribution(&[0.4, 0.6], 0.5).unwrap();
        let out = jump_update(&fv, &model, 0, 1).unwrap();
        assert_eq!(out.absolute_entries(), fv.absolute_entries());
    }

    #[test]
    fn zero_factor_excludes_the_state() {
        let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let g0 = RateMatrix::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let g1 = RateMatrix::new(vec![vec![0.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let model = CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Chain(RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                reference: gbar,
                rates: TargetRateFamily::state_dependent(vec![g0, g1], 4.0).unwrap(),
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        let fv = FilterVector::from_distribution(&[0.3, 0.7], 0.0).unwrap();
        let out = jump_update(&fv, &model, 0, 1).unwrap();
        assert_eq!(
            out.absolute(0),
            0.0,
            "state 0 cannot produce the observed jump"
        );
        assert!(out.absolute(1) > 0.0);
    }

    #[test]
    fn fkk_jump_consistency() {
        // Normalizing the multiplicative update must reproduce the discrete
        // FKK jump formula pi' = (pi * gamma) / pi(gamma).
        let model = model_2x2();
        let fv = FilterVector::from_distribution(&[0.35, 0.65], 0.2).unwrap();
        let out = jump_update(&fv, &model, 0, 1).unwrap();
        let pi = fv.pi();
        let gamma = [2.0, 0.5]; // gamma_{y1->y2}(x) for x = 0, 1
        let denom: f64 = pi[0] * gamma[0] + pi[1] * gamma[1];
        for i in 0..2 {
            let expected = pi[i] * gamma[i] / denom;
            assert!(
                (out.pi()[i] - expected).abs() < 1e-12,
                "pi'[{i}] = {} vs {expected}",
                out.pi()[i]
            );
        }
    }

    #[test]
    fn run_reference_model_tracks_prior_law() {
        let model = reference_equal_model(vec![vec![0.0, 0.4], vec![0.9, 0.0]], vec![0.6, 0.4]);
        let mut rng = RngStream::new(11, 0);
        let (_, y) = crate::model::simulate_joint_reference(&model, 3.0, &mut rng).unwrap();
        let run = run_direct_filter(&model, &y, &[1.5], &DirectConfig::default()).unwrap();
        let p = dense_expm(&[vec![-0.4, 0.4], vec![0.9, -0.9]], 3.0).unwrap();
        let final_rec = run.final_record();
        assert!((final_rec.log_sigma_one).abs() < 1e-8);
        for j in 0..2 {
            let expected = 0.6 * p[0][j] + 0.4 * p[1][j];
            assert!(
                (final_rec.pi[j] - expected).abs() < 1e-6,
                "pi[{j}] = {} vs forward law {expected}",
                final_rec.pi[j]
            );
        }
    }

    #[test]
    fn grid_records_are_emitted_between_events() {
        let model = model_2x2();
        let y = crate::model::ObsSequence::new(0, vec![(1.0, 1)], 2.0).unwrap();
        let run = run_direct_filter(&model, &y, &[0.5, 1.5], &DirectConfig::default()).unwrap();
        let times: Vec<(f64, RecordEvent)> = run.records.iter().map(|r| (r.t, r.event)).collect();
        assert_eq!(
            times,
            vec![
                (0.5, RecordEvent::Grid),
                (1.0, RecordEvent::Jump),
                (1.5, RecordEvent::Grid),
                (2.0, RecordEvent::Grid),
            ]
        );
        for r in &run.records {
            assert!((r.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_models_compare_to_unit_factors() {
        let model = model_2x2();
        let y = crate::model::ObsSequence::new(0, vec![(0.7, 1), (1.9, 0)], 3.0).unwrap();
        let out = compare_models(&[&model, &model], &y, &DirectConfig::default()).unwrap();
        assert_eq!(out.bayes[0][1], 1.0);
        assert_eq!(out.bayes[1][0], 1.0);
    }

    #[test]
    fn log_bayes_factors_are_additive() {
        let base = model_2x2();
        let mut rng = RngStream::new(40, 0);
        let (_, y) = crate::model::simulate_joint_target(&base, 4.0, &mut rng).unwrap();
        // Three models differing only in hidden generators share the
        // reference, so all pairwise factors exist.
        let faster = {
            let lambda = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
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
        };
        let slower = {
            let lambda = RateMatrix::new(vec![vec![0.0, 0.2], vec![0.2, 0.0]]).unwrap();
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
        };
        let out = compare_models(&[&base, &faster, &slower], &y, &DirectConfig::default()).unwrap();
        let log_ab = out.bayes[0][1].ln();
        let log_bc = out.bayes[1][2].ln();
        let log_ac = out.bayes[0][2].ln();
        assert!(
            (log_ac - (log_ab + log_bc)).abs() < 1e-10,
            "log additivity: {log_ac} vs {}",
            log_ab + log_bc
        );
    }

    #[test]
    fn mismatched_references_refuse_comparison() {
        let a = model_2x2();
        let b = reference_equal_model(vec![vec![0.0, 0.5], vec![0.5, 0.0]], vec![0.5, 0.5]);
        let y = crate::model::ObsSequence::new(0, vec![(1.0, 1)], 2.0).unwrap();
        // Same obs space labels but perturbed reference rates.
        let gbar = RateMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let c = CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Chain(RateMatrix::new(vec![vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap()),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                rates: TargetRateFamily::state_dependent(vec![gbar.clone(), gbar.clone()], 1.0)
                    .unwrap(),
                reference: gbar,
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            compare_models(&[&a, &c], &y, &DirectConfig::default()),
            Err(Error::Mismatch(_))
        ));
        let _ = b;
    }

    #[test]
    fn simulator_backed_models_are_rejected_with_condition_u() {
        struct Frozen;
        impl crate::model::SignalSimulator for Frozen {
            fn evolve(
                &self,
                state: usize,
                _t0: f64,
                dt: f64,
                _rng: &mut RngStream,
            ) -> crate::error::Result<crate::chain::ChainPath> {
                crate::chain::ChainPath::constant(state, dt)
            }
        }
        let gbar = RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let model = CmomModel::new(
            StateSpace::new(vec!["x1", "x2"]).unwrap(),
            HiddenDynamics::Simulator(std::sync::Arc::new(Frozen)),
            StateSpace::new(vec!["y1", "y2"]).unwrap(),
            ObservationModel::Cmom {
                rates: TargetRateFamily::state_dependent(vec![gbar.clone(), gbar.clone()], 1.0)
                    .unwrap(),
                reference: gbar,
            },
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        )
        .unwrap();
        let y = crate::model::ObsSequence::new(0, vec![(1.0, 1)], 2.0).unwrap();
        match run_direct_filter(&model, &y, &[], &DirectConfig::default()) {
            Err(Error::Validation(report)) => assert!(report.violates(ConditionId::U)),
            other => panic!("expected condition U violation, got {other:?}"),
        }
    }
}
