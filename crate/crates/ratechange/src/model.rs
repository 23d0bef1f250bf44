//! Joint hidden-signal / observation models: the general continuous Markov
//! observation model (CMOM), its CTHMM special case, joint simulation under
//! the reference and target measures, and the hidden-state-dependent
//! likelihood weight.
//!
//! CTHMM update events are observable even when the emitted symbol repeats
//! the previous one, so observation records are kept as an [`ObsSequence`]
//! (event times plus symbols, repeats allowed) rather than a [`ChainPath`].
//! A genuine CMOM observation never repeats and converts losslessly between
//! the two.

use std::sync::Arc;

use crate::chain::{
    self, ChainPath, ConditionId, PathDriver, RateMatrix, StateSpace, TargetRateFamily,
    ValidationReport,
};
use crate::error::{Error, Result};
use crate::sampler::{self, LogWeight, RngStream};

/// Observed update events on `[0, horizon]`: the symbol holds constant
/// between events in a cadlag manner. Event times are strictly increasing;
/// consecutive symbols may repeat (CTHMM self-emissions).
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSequence {
    initial: usize,
    events: Vec<(f64, usize)>,
    horizon: f64,
}

impl ObsSequence {
    pub fn new(initial: usize, events: Vec<(f64, usize)>, horizon: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon < 0.0 {
            return Err(Error::Domain(format!(
                "horizon must be finite and >= 0, got {horizon}"
            )));
        }
        let mut prev = 0.0;
        for &(t, _) in &events {
            if !t.is_finite() || t <= prev {
                return Err(Error::Domain(format!(
                    "event times must be strictly increasing and positive; got {t}"
                )));
            }
            prev = t;
        }
        if prev > horizon {
            return Err(Error::Domain(format!(
                "last event time {prev} exceeds horizon {horizon}"
            )));
        }
        Ok(Self {
            initial,
            events,
            horizon,
        })
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn events(&self) -> &[(f64, usize)] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Symbol value at `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> Result<usize> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(Error::Domain(format!(
                "t={t} outside observation domain [0, {}]",
                self.horizon
            )));
        }
        let n = self.events.partition_point(|&(w, _)| w <= t);
        Ok(if n == 0 {
            self.initial
        } else {
            self.events[n - 1].1
        })
    }

    /// The sequence restricted to `[0, t]`.
    pub fn restrict(&self, t: f64) -> Result<Self> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(Error::Domain(format!(
                "t={t} outside observation domain [0, {}]",
                self.horizon
            )));
        }
        let keep = self.events.partition_point(|&(w, _)| w <= t);
        Self::new(self.initial, self.events[..keep].to_vec(), t)
    }

    /// Order-sensitive fingerprint of the consumed observations; two filter
    /// runs are comparable only when these match.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        mix(self.initial as u64);
        mix(self.horizon.to_bits());
        for &(t, s) in &self.events {
            mix(t.to_bits());
            mix(s as u64);
        }
        h
    }

    /// Interprets a state-changing sequence as a [`ChainPath`]. Errors when
    /// a symbol repeats (CTHMM self-emission), which a chain path cannot
    /// represent.
    pub fn to_chain_path(&self) -> Result<ChainPath> {
        let (times, targets): (Vec<f64>, Vec<usize>) = self.events.iter().copied().unzip();
        ChainPath::new(self.initial, times, targets, self.horizon)
    }

    pub fn to_csv(&self, space: &StateSpace) -> String {
        let mut s = String::from("time,state\n");
        s.push_str(&format!(
            "{},{}\n",
            chain::fmt_time(0.0),
            space.label(self.initial)
        ));
        for &(t, sym) in &self.events {
            s.push_str(&format!("{},{}\n", chain::fmt_time(t), space.label(sym)));
        }
        s
    }

    pub fn from_csv(text: &str, space: &StateSpace, horizon: Option<f64>) -> Result<Self> {
        let (initial, events) = chain::parse_event_csv(text, space)?;
        let last = events.last().map(|&(t, _)| t).unwrap_or(0.0);
        Self::new(initial, events, horizon.unwrap_or(last))
    }
}

impl From<ChainPath> for ObsSequence {
    fn from(p: ChainPath) -> Self {
        let events = p
            .jump_times()
            .iter()
            .copied()
            .zip(p.jump_targets().iter().copied())
            .collect();
        Self {
            initial: p.initial_state(),
            events,
            horizon: p.horizon(),
        }
    }
}

/// How the hidden signal moves: a finite Markov chain simulated exactly from
/// its generator, or a user-supplied simulator (particle filtering only).
#[derive(Clone)]
pub enum HiddenDynamics {
    Chain(RateMatrix),
    Simulator(Arc<dyn SignalSimulator>),
}

impl std::fmt::Debug for HiddenDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HiddenDynamics::Chain(m) => f.debug_tuple("Chain").field(m).finish(),
            HiddenDynamics::Simulator(_) => f.write_str("Simulator(..)"),
        }
    }
}

/// User-supplied signal dynamics. Implementations must be deterministic
/// functions of the stream handed in, and callable concurrently on disjoint
/// streams.
pub trait SignalSimulator: Send + Sync {
    /// Trajectory over a window of length `dt` starting from `state` at
    /// absolute time `t0`, as a path on `[0, dt]` with that initial state.
    fn evolve(&self, state: usize, t0: f64, dt: f64, rng: &mut RngStream) -> Result<ChainPath>;
}

impl HiddenDynamics {
    /// Hidden trajectory over `[0, dt]` (relative times) from `state`.
    pub fn evolve_segment(
        &self,
        state: usize,
        t0: f64,
        dt: f64,
        rng: &mut RngStream,
    ) -> Result<ChainPath> {
        match self {
            HiddenDynamics::Chain(generator) => {
                let jumps = sampler::simulate_jumps_from(generator, state, 0.0, dt, None, rng)?;
                let (times, targets) = jumps.into_iter().unzip();
                ChainPath::new(state, times, targets, dt)
            }
            HiddenDynamics::Simulator(sim) => {
                let path = sim.evolve(state, t0, dt, rng)?;
                if path.initial_state() != state || path.horizon() != dt {
                    return Err(Error::Usage(
                        "signal simulator must return a path on [0, dt] from the given state"
                            .into(),
                    ));
                }
                Ok(path)
            }
        }
    }

    pub fn generator(&self) -> Option<&RateMatrix> {
        match self {
            HiddenDynamics::Chain(g) => Some(g),
            HiddenDynamics::Simulator(_) => None,
        }
    }
}

/// The observation half of the model: genuine Markov-chain observations with
/// hidden-state-dependent rates, or CTHMM update/emission form.
#[derive(Debug, Clone)]
pub enum ObservationModel {
    Cmom {
        /// Reference rates `gammabar_{i->j}` on the observation space.
        reference: RateMatrix,
        /// Target rates `gamma_{i->j}(x)`, one matrix per hidden state.
        rates: TargetRateFamily,
    },
    Cthmm {
        /// Canonical update rate `gammabar`.
        reference_update: f64,
        /// Canonical emission probabilities `qbar_j`.
        reference_emission: Vec<f64>,
        /// Update rate `gamma(x)` per hidden state.
        update_rate: Vec<f64>,
        /// Emission probabilities `q_j(x)`: one row per hidden state.
        emission: Vec<Vec<f64>>,
    },
}

impl ObservationModel {
    /// Total event rate under the reference measure while observing `y`.
    /// For CTHMM this counts all updates, including self-emissions.
    pub fn reference_event_rate(&self, y: usize) -> f64 {
        match self {
            ObservationModel::Cmom { reference, .. } => reference.leave(y),
            ObservationModel::Cthmm {
                reference_update, ..
            } => *reference_update,
        }
    }

    /// Total event rate under the target when the hidden state is `x`.
    pub fn target_event_rate(&self, y: usize, x: usize) -> Result<f64> {
        match self {
            ObservationModel::Cmom { rates, .. } => {
                rates.leave_rate(y, chain::DriverValue::Hidden(x))
            }
            ObservationModel::Cthmm { update_rate, .. } => update_rate
                .get(x)
                .copied()
                .ok_or_else(|| Error::Domain(format!("hidden state {x} out of range"))),
        }
    }

    /// Target rate of the event `y_prev -> y_new` given hidden state `x`.
    /// For CTHMM this is `gamma(x) q_{y_new}(x)`, defined also for
    /// `y_new == y_prev`.
    pub fn target_transition_rate(&self, y_prev: usize, y_new: usize, x: usize) -> Result<f64> {
        match self {
            ObservationModel::Cmom { rates, .. } => {
                rates.rate(y_prev, y_new, chain::DriverValue::Hidden(x))
            }
            ObservationModel::Cthmm {
                update_rate,
                emission,
                ..
            } => {
                let g = update_rate
                    .get(x)
                    .ok_or_else(|| Error::Domain(format!("hidden state {x} out of range")))?;
                Ok(g * emission[x][y_new])
            }
        }
    }

    /// Reference rate of the event `y_prev -> y_new`; for CTHMM this is
    /// `gammabar qbar_{y_new}`.
    pub fn reference_transition_rate(&self, y_prev: usize, y_new: usize) -> f64 {
        match self {
            ObservationModel::Cmom { reference, .. } => reference.rate(y_prev, y_new),
            ObservationModel::Cthmm {
                reference_update,
                reference_emission,
                ..
            } => reference_update * reference_emission[y_new],
        }
    }

    /// Log of the jump factor `gamma_{y_prev -> y_new}(x) / gammabar_{y_prev -> y_new}`.
    pub fn log_jump_ratio(&self, y_prev: usize, y_new: usize, x: usize, at: f64) -> Result<f64> {
        let reference = self.reference_transition_rate(y_prev, y_new);
        if reference <= 0.0 {
            return Err(Error::AbsoluteContinuity {
                from: y_prev,
                to: y_new,
                at,
            });
        }
        Ok((self.target_transition_rate(y_prev, y_new, x)? / reference).ln())
    }

    pub fn is_cthmm(&self) -> bool {
        matches!(self, ObservationModel::Cthmm { .. })
    }
}

/// Hidden Markov signal observed through a continuous-time Markov chain
/// whose rates depend on the hidden state.
#[derive(Debug, Clone)]
pub struct CmomModel {
    hidden_space: StateSpace,
    hidden: HiddenDynamics,
    obs_space: StateSpace,
    observation: ObservationModel,
    init_hidden: Vec<f64>,
    init_obs: Vec<f64>,
}

fn check_probability_vector(v: &[f64], len: usize, what: &str) -> Result<()> {
    if v.len() != len {
        return Err(Error::Domain(format!(
            "{what} has length {} but {len} states",
            v.len()
        )));
    }
    if v.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Domain(format!("{what} entries must be >= 0")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "{what} sums to {total}, expected 1 within 1e-12"
        )));
    }
    Ok(())
}

impl CmomModel {
    pub fn new(
        hidden_space: StateSpace,
        hidden: HiddenDynamics,
        obs_space: StateSpace,
        observation: ObservationModel,
        init_hidden: Vec<f64>,
        init_obs: Vec<f64>,
    ) -> Result<Self> {
        let m = hidden_space.len();
        let o = obs_space.len();
        check_probability_vector(&init_hidden, m, "mu")?;
        check_probability_vector(&init_obs, o, "init_obs")?;
        if let HiddenDynamics::Chain(g) = &hidden {
            if g.dim() != m {
                return Err(Error::Domain(format!(
                    "hidden generator is {}x{} but the hidden space has {m} states",
                    g.dim(),
                    g.dim()
                )));
            }
        }
        match &observation {
            ObservationModel::Cmom { reference, rates } => {
                if reference.dim() != o || rates.dim() != o {
                    return Err(Error::Domain(
                        "observation rate matrices must match the observation space".into(),
                    ));
                }
                if !rates.is_state_dependent() {
                    return Err(Error::Domain(
                        "CMOM observation rates must be hidden-state dependent".into(),
                    ));
                }
            }
            ObservationModel::Cthmm {
                reference_emission,
                update_rate,
                emission,
                ..
            } => {
                check_probability_vector(reference_emission, o, "q_bar")?;
                if update_rate.len() != m || emission.len() != m {
                    return Err(Error::Domain(
                        "need one update rate and emission row per hidden state".into(),
                    ));
                }
                for (x, row) in emission.iter().enumerate() {
                    check_probability_vector(row, o, &format!("q(x={x})"))?;
                }
            }
        }
        Ok(Self {
            hidden_space,
            hidden,
            obs_space,
            observation,
            init_hidden,
            init_obs,
        })
    }

    pub fn hidden_space(&self) -> &StateSpace {
        &self.hidden_space
    }

    pub fn hidden(&self) -> &HiddenDynamics {
        &self.hidden
    }

    pub fn obs_space(&self) -> &StateSpace {
        &self.obs_space
    }

    pub fn observation(&self) -> &ObservationModel {
        &self.observation
    }

    pub fn init_hidden(&self) -> &[f64] {
        &self.init_hidden
    }

    pub fn init_obs(&self) -> &[f64] {
        &self.init_obs
    }

    /// Checks (C1)-(C3) and dominance; CTHMM-kind models are checked through
    /// (A1)-(A3) plus emission dominance.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        match &self.observation {
            ObservationModel::Cmom { reference, rates } => {
                violations.extend(chain::validate(reference, rates).violations().to_vec());
            }
            ObservationModel::Cthmm {
                reference_update,
                reference_emission,
                update_rate,
                emission,
            } => {
                if update_rate.iter().any(|g| !g.is_finite()) {
                    violations.push((
                        ConditionId::A2,
                        "update rates gamma(x) must be finite".into(),
                    ));
                }
                if *reference_update <= 0.0 {
                    violations.push((
                        ConditionId::A3,
                        format!("reference update rate must be positive, got {reference_update}"),
                    ));
                }
                for (x, &g) in update_rate.iter().enumerate() {
                    if g <= 0.0 {
                        violations.push((
                            ConditionId::A3,
                            format!("update rate gamma({x}) = {g} must be positive"),
                        ));
                    }
                }
                for (x, row) in emission.iter().enumerate() {
                    for (j, &q) in row.iter().enumerate() {
                        if q > 0.0 && reference_emission[j] == 0.0 {
                            violations.push((
                                ConditionId::Dominance,
                                format!(
                                    "emission q_{j}({x}) = {q} but the reference emission qbar_{j} is 0"
                                ),
                            ));
                        }
                    }
                }
            }
        }
        ValidationReport::from_violations(violations)
    }

    /// Fingerprint of the observation space and reference rates; Bayes
    /// factors are comparable only across models that share it.
    pub fn reference_fingerprint(&self) -> String {
        let mut s = String::new();
        for l in self.obs_space.labels() {
            s.push_str(l);
            s.push(';');
        }
        match &self.observation {
            ObservationModel::Cmom { reference, .. } => {
                for row in reference.rows() {
                    for v in row {
                        s.push_str(&format!("{v:.17e},"));
                    }
                }
            }
            ObservationModel::Cthmm {
                reference_update,
                reference_emission,
                ..
            } => {
                s.push_str(&format!("cthmm:{reference_update:.17e}:"));
                for v in reference_emission {
                    s.push_str(&format!("{v:.17e},"));
                }
            }
        }
        s
    }

    /// Upper bound on the target event rate, used by the thinning simulator.
    fn target_event_rate_bound(&self) -> Result<f64> {
        match &self.observation {
            ObservationModel::Cmom { reference, rates } => {
                let sup_ref = (0..reference.dim())
                    .map(|i| reference.leave(i))
                    .fold(0.0, f64::max);
                Ok(sup_ref * rates.ratio_bound())
            }
            ObservationModel::Cthmm { update_rate, .. } => {
                Ok(update_rate.iter().copied().fold(0.0, f64::max))
            }
        }
    }
}

/// CTHMM parameterization: updates arrive at rate `gamma(x)` and emit symbol
/// `j` with probability `q_j(x)`; the reference chain updates at `gammabar`
/// and emits from `qbar`.
#[derive(Debug, Clone)]
pub struct CthmmModel {
    pub hidden_space: StateSpace,
    pub hidden: HiddenDynamics,
    pub obs_space: StateSpace,
    pub update_rate: Vec<f64>,
    pub emission: Vec<Vec<f64>>,
    pub reference_update: f64,
    pub reference_emission: Vec<f64>,
    pub init_hidden: Vec<f64>,
    pub init_obs: Vec<f64>,
}

/// Wraps a CTHMM as a CMOM with `gamma_{i->j}(x) = gamma(x) q_j(x)` and
/// `gammabar_{i->j} = gammabar qbar_j` for every `j`, including `j == i`
/// (update events are observable even when the symbol repeats). Errors when
/// the result fails validation.
pub fn cthmm_to_cmom(m: &CthmmModel) -> Result<CmomModel> {
    let model = CmomModel::new(
        m.hidden_space.clone(),
        m.hidden.clone(),
        m.obs_space.clone(),
        ObservationModel::Cthmm {
            reference_update: m.reference_update,
            reference_emission: m.reference_emission.clone(),
            update_rate: m.update_rate.clone(),
            emission: m.emission.clone(),
        },
        m.init_hidden.clone(),
        m.init_obs.clone(),
    )?;
    model.validate().into_result()?;
    Ok(model)
}

/// Simulates the hidden signal from its own law (the signal law is the same
/// under the reference and target measures).
pub fn simulate_hidden(model: &CmomModel, horizon: f64, rng: &mut RngStream) -> Result<ChainPath> {
    let initial = rng.categorical(model.init_hidden())?;
    model.hidden.evolve_segment(initial, 0.0, horizon, rng)
}

/// Joint draw under the reference measure Q: the signal from its generator
/// and the observations independently from the reference rates.
///
/// The two components use disjoint substreams of `rng`, so they are
/// independent and individually reproducible.
pub fn simulate_joint_reference(
    model: &CmomModel,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<(ChainPath, ObsSequence)> {
    let mut x_rng = rng.substream(0);
    let mut y_rng = rng.substream(1);
    let x = simulate_hidden(model, horizon, &mut x_rng)?;
    let y = match &model.observation {
        ObservationModel::Cmom { reference, .. } => {
            let path = sampler::simulate_reference_chain(
                reference,
                model.init_obs(),
                horizon,
                &mut y_rng,
            )?;
            ObsSequence::from(path)
        }
        ObservationModel::Cthmm {
            reference_update,
            reference_emission,
            ..
        } => {
            let initial = y_rng.categorical(model.init_obs())?;
            let mut events = Vec::new();
            let mut t = 0.0;
            loop {
                t += y_rng.exponential(*reference_update);
                if t > horizon {
                    break;
                }
                let sym = y_rng.categorical(reference_emission)?;
                events.push((t, sym));
            }
            ObsSequence::new(initial, events, horizon)?
        }
    };
    Ok((x, y))
}

/// Joint draw under the target measure P: the signal from its generator,
/// then the observations given the whole signal path as a time-inhomogeneous
/// chain with rates `s -> gamma_{y->j}(X_s)`, simulated exactly by thinning
/// against the (C2) bound.
pub fn simulate_joint_target(
    model: &CmomModel,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<(ChainPath, ObsSequence)> {
    let mut x_rng = rng.substream(0);
    let mut y_rng = rng.substream(1);
    let x = simulate_hidden(model, horizon, &mut x_rng)?;
    let bound = model.target_event_rate_bound()?;
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::Domain(format!(
            "thinning bound must be positive and finite, got {bound}"
        )));
    }

    let mut y = y_rng.categorical(model.init_obs())?;
    let initial = y;
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        t += y_rng.exponential(bound);
        if t > horizon {
            break;
        }
        let x_t = x.state_at(t)?;
        let rate = model.observation.target_event_rate(y, x_t)?;
        if rate > bound {
            return Err(Error::BoundViolation {
                observed: rate,
                bound,
            });
        }
        if y_rng.uniform() * bound < rate {
            let next = match &model.observation {
                ObservationModel::Cmom { rates, .. } => {
                    let o = model.obs_space.len();
                    let row: Vec<f64> = (0..o)
                        .map(|j| rates.rate(y, j, chain::DriverValue::Hidden(x_t)))
                        .collect::<Result<_>>()?;
                    y_rng.categorical(&row)?
                }
                ObservationModel::Cthmm { emission, .. } => y_rng.categorical(&emission[x_t])?,
            };
            events.push((t, next));
            y = next;
        }
    }
    Ok((x, ObsSequence::new(initial, events, horizon)?))
}

/// Likelihood weight of the pair `(x_path, y)` up to time `t`:
///
/// `log A_t = int_0^t (gammabar_{Y_s->} - gamma_{Y_s->}(X_s)) ds
///          + sum_{events s <= t} log jump ratio`.
///
/// Genuine CMOM observations delegate to [`sampler::log_weight`] with the
/// hidden path as driver; CTHMM-kind models evaluate the update-rate/emission form with
/// update events (self-emissions included) counting as transitions.
pub fn joint_log_weight(
    x_path: &ChainPath,
    y: &ObsSequence,
    model: &CmomModel,
    t: f64,
) -> Result<LogWeight> {
    if t > y.horizon() || t > x_path.horizon() {
        return Err(Error::Domain(format!(
            "t={t} beyond the simulated horizons ({}, {})",
            x_path.horizon(),
            y.horizon()
        )));
    }
    match &model.observation {
        ObservationModel::Cmom { reference, rates } => {
            let y_path = y.restrict(t)?.to_chain_path()?;
            sampler::log_weight(&y_path, rates, reference, PathDriver::Hidden(x_path))
        }
        ObservationModel::Cthmm {
            reference_update,
            reference_emission,
            update_rate,
            ..
        } => {
            // Integral term: gammabar - gamma(X_s), split exactly at X jumps.
            let mut log_a = 0.0;
            for (lo, hi, xs) in x_path.segments() {
                let hi = hi.min(t);
                if hi <= lo {
                    continue;
                }
                let g = update_rate
                    .get(xs)
                    .ok_or_else(|| Error::Domain(format!("hidden state {xs} out of range")))?;
                log_a += (reference_update - g) * (hi - lo);
            }
            // Event factors gamma(X_s) q_{Y_s}(X_s) / (gammabar qbar_{Y_s}).
            let mut y_prev = y.initial();
            for &(s, sym) in y.events() {
                if s > t {
                    break;
                }
                if reference_emission[sym] <= 0.0 {
                    return Err(Error::AbsoluteContinuity {
                        from: y_prev,
                        to: sym,
                        at: s,
                    });
                }
                let x_s = x_path.state_at(s)?;
                log_a += model.observation.log_jump_ratio(y_prev, sym, x_s, s)?;
                y_prev = sym;
            }
            Ok(LogWeight { log_a, t })
        }
    }
}
