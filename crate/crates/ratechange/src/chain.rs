//! State spaces, cadlag chain paths, rate families and model validation.
//!
//! These are the value types every other module builds on. A chain lives on a
//! finite state space (countable spaces enter as an explicit user-chosen
//! truncation), moves at reference rates collected in a [`RateMatrix`], and is
//! reweighted toward target rates described by a [`TargetRateFamily`] that may
//! depend on time or on a hidden state.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Ordered finite list of distinct state labels with a stable
/// index <-> label bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Domain("state space must be non-empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Domain(format!("duplicate state label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Space `{"1", "2", ..., "n"}`, handy for tests and examples.
    pub fn numbered(n: usize) -> Self {
        Self::new((1..=n).map(|i| i.to_string()).collect()).expect("n >= 1")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// A cadlag piecewise-constant trajectory on `[0, horizon]`: jump times
/// `W_1 < W_2 < ...` with visited states, starting from `initial_state`.
///
/// Self-jumps are rejected at construction; the path value changes at every
/// stored jump and nowhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    initial_state: usize,
    jump_times: Vec<f64>,
    jump_targets: Vec<usize>,
    horizon: f64,
}

impl ChainPath {
    pub fn new(
        initial_state: usize,
        jump_times: Vec<f64>,
        jump_targets: Vec<usize>,
        horizon: f64,
    ) -> Result<Self> {
        if jump_times.len() != jump_targets.len() {
            return Err(Error::Domain(
                "jump_times and jump_targets must have equal length".into(),
            ));
        }
        if !horizon.is_finite() || horizon < 0.0 {
            return Err(Error::Domain(format!(
                "horizon must be finite and >= 0, got {horizon}"
            )));
        }
        let mut prev_t = 0.0;
        let mut prev_state = initial_state;
        for (k, (&t, &s)) in jump_times.iter().zip(&jump_targets).enumerate() {
            if !t.is_finite() || t <= prev_t {
                return Err(Error::Domain(format!(
                    "jump times must be strictly increasing and positive; jump {k} at t={t}"
                )));
            }
            if s == prev_state {
                return Err(Error::Domain(format!(
                    "self-jump at t={t}: state {s} repeats (self-transitions are not stored)"
                )));
            }
            prev_t = t;
            prev_state = s;
        }
        if let Some(&last) = jump_times.last() {
            if last > horizon {
                return Err(Error::Domain(format!(
                    "last jump time {last} exceeds horizon {horizon}"
                )));
            }
        }
        Ok(Self {
            initial_state,
            jump_times,
            jump_targets,
            horizon,
        })
    }

    /// A path that never leaves `state`.
    pub fn constant(state: usize, horizon: f64) -> Result<Self> {
        Self::new(state, Vec::new(), Vec::new(), horizon)
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_targets(&self) -> &[usize] {
        &self.jump_targets
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// State at the end of the horizon.
    pub fn final_state(&self) -> usize {
        self.jump_targets
            .last()
            .copied()
            .unwrap_or(self.initial_state)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(Error::Domain(format!(
                "t={t} outside path domain [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Path value at `t` (right-continuous): `theta_n` for the unique `n`
    /// with `W_n <= t < W_{n+1}`.
    pub fn state_at(&self, t: f64) -> Result<usize> {
        self.check_time(t)?;
        let n = self.jump_times.partition_point(|&w| w <= t);
        Ok(if n == 0 {
            self.initial_state
        } else {
            self.jump_targets[n - 1]
        })
    }

    /// Number of jumps in `[0, t]` (cadlag: a jump exactly at `t` counts).
    pub fn jump_count(&self, t: f64) -> Result<usize> {
        self.check_time(t)?;
        Ok(self.jump_times.partition_point(|&w| w <= t))
    }

    /// Constancy intervals `(start, end, state)` covering `[0, horizon]`,
    /// in order. The last interval ends at the horizon; a jump exactly at
    /// the horizon contributes a final zero-length interval.
    pub fn segments(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut start = 0.0;
        let mut state = self.initial_state;
        for (&w, &s) in self.jump_times.iter().zip(&self.jump_targets) {
            out.push((start, w, state));
            start = w;
            state = s;
        }
        out.push((start, self.horizon, state));
        out
    }

    /// The same path restricted to `[0, t]` (a jump exactly at `t` is kept).
    pub fn restrict(&self, t: f64) -> Result<Self> {
        self.check_time(t)?;
        let keep = self.jump_times.partition_point(|&w| w <= t);
        Self::new(
            self.initial_state,
            self.jump_times[..keep].to_vec(),
            self.jump_targets[..keep].to_vec(),
            t,
        )
    }

    /// Serializes as CSV with header `time,state`; row 0 is the initial
    /// state at time 0, subsequent rows are the jump events.
    pub fn to_csv(&self, space: &StateSpace) -> String {
        let mut s = String::from("time,state\n");
        s.push_str(&format!(
            "{},{}\n",
            fmt_time(0.0),
            space.label(self.initial_state)
        ));
        for (&w, &tgt) in self.jump_times.iter().zip(&self.jump_targets) {
            s.push_str(&format!("{},{}\n", fmt_time(w), space.label(tgt)));
        }
        s
    }

    /// Parses the CSV produced by [`ChainPath::to_csv`]. The horizon defaults
    /// to the last event time when not supplied.
    pub fn from_csv(text: &str, space: &StateSpace, horizon: Option<f64>) -> Result<Self> {
        let (initial, events) = parse_event_csv(text, space)?;
        let last = events.last().map(|&(t, _)| t).unwrap_or(0.0);
        let horizon = horizon.unwrap_or(last);
        let (times, targets) = events.into_iter().unzip();
        Self::new(initial, times, targets, horizon)
    }
}

/// Event times are written with 13 significant digits so serialized paths
/// are stable and precise enough for downstream weighting.
pub(crate) fn fmt_time(t: f64) -> String {
    format!("{t:.12e}")
}

/// Shared parser for `time,state` event CSVs: returns the initial state and
/// the (time, state) event rows. Self-repeats are allowed here; callers that
/// need a proper [`ChainPath`] reject them in its constructor.
pub(crate) fn parse_event_csv(
    text: &str,
    space: &StateSpace,
) -> Result<(usize, Vec<(f64, usize)>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "time,state" => {}
        other => {
            return Err(Error::Format(format!(
                "expected header `time,state`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let (t_str, label) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("row {k}: expected `time,state`, got {line:?}"))
        })?;
        let t: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {k}: bad time {t_str:?}")))?;
        let state = space
            .index_of(label.trim())
            .ok_or_else(|| Error::Format(format!("row {k}: unknown state label {label:?}")))?;
        rows.push((t, state));
    }
    let Some(&(t0, initial)) = rows.first() else {
        return Err(Error::Format("path CSV has no rows".into()));
    };
    if t0 != 0.0 {
        return Err(Error::Format(format!(
            "first row must be at time 0, got {t0}"
        )));
    }
    Ok((initial, rows[1..].to_vec()))
}

/// Dense nonnegative rate matrix with zero diagonal: entry `(i, j)` is the
/// rate of jumping from `i` to `j`. Row sums are the leave rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    dim: usize,
    rates: Vec<f64>,
    leave: Vec<f64>,
}

impl RateMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Domain("rate matrix must be non-empty".into()));
        }
        let mut rates = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Domain(format!(
                    "rate matrix row {i} has length {} but dimension is {dim}",
                    row.len()
                )));
            }
            for (j, &r) in row.iter().enumerate() {
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::Domain(format!(
                        "rate ({i},{j}) must be finite and >= 0, got {r}"
                    )));
                }
                if i == j && r != 0.0 {
                    return Err(Error::Domain(format!(
                        "diagonal entry ({i},{i}) must be exactly 0, got {r}"
                    )));
                }
                rates.push(r);
            }
        }
        let leave = (0..dim)
            .map(|i| (0..dim).map(|j| rates[i * dim + j]).sum())
            .collect();
        Ok(Self { dim, rates, leave })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.dim + j]
    }

    /// Total rate of leaving state `i`.
    pub fn leave(&self, i: usize) -> f64 {
        self.leave[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.rates[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }
}

/// The argument the target rates depend on: the current time (the
/// time-dependent case) or the current hidden state index (the CMOM case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriverValue {
    Time(f64),
    Hidden(usize),
}

/// What drives the target rates along a whole path: nothing but the clock,
/// or a hidden cadlag trajectory.
#[derive(Debug, Clone, Copy)]
pub enum PathDriver<'a> {
    Time,
    Hidden(&'a ChainPath),
}

impl PathDriver<'_> {
    pub fn value_at(&self, t: f64) -> Result<DriverValue> {
        match self {
            PathDriver::Time => Ok(DriverValue::Time(t)),
            PathDriver::Hidden(x) => Ok(DriverValue::Hidden(x.state_at(t)?)),
        }
    }
}

type RateFn = Arc<dyn Fn(usize, usize, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum TargetKind {
    /// Rates constant in time and independent of any hidden state.
    Constant(RateMatrix),
    /// Piecewise constant in time: `matrices[k]` applies on
    /// `[breakpoints[k], breakpoints[k+1])`, with `breakpoints[0] == 0`.
    PiecewiseTime {
        breakpoints: Vec<f64>,
        matrices: Vec<RateMatrix>,
    },
    /// One rate matrix per hidden state.
    StateDependent(Vec<RateMatrix>),
    /// Arbitrary time-dependent rates; integrals use adaptive quadrature on
    /// the declared grid.
    Callable {
        f: RateFn,
        grid: Vec<f64>,
        dim: usize,
    },
}

/// Target rates `gamma_{i->j}(u)` of the measure change, with the
/// user-declared bound on `sup gamma_{i->}(u) / gammabar_{i->}` that
/// certifies condition (C2).
#[derive(Clone)]
pub struct TargetRateFamily {
    kind: TargetKind,
    ratio_bound: f64,
}

impl fmt::Debug for TargetRateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            TargetKind::Constant(_) => "constant",
            TargetKind::PiecewiseTime { .. } => "piecewise_time",
            TargetKind::StateDependent(_) => "state_dependent",
            TargetKind::Callable { .. } => "callable",
        };
        f.debug_struct("TargetRateFamily")
            .field("kind", &kind)
            .field("ratio_bound", &self.ratio_bound)
            .finish()
    }
}

impl TargetRateFamily {
    pub fn constant(rates: RateMatrix, ratio_bound: f64) -> Self {
        Self {
            kind: TargetKind::Constant(rates),
            ratio_bound,
        }
    }

    pub fn piecewise_time(
        breakpoints: Vec<f64>,
        matrices: Vec<RateMatrix>,
        ratio_bound: f64,
    ) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints[0] != 0.0 {
            return Err(Error::Domain("breakpoints must start at 0".into()));
        }
        if breakpoints.len() != matrices.len() {
            return Err(Error::Domain(
                "need one rate matrix per breakpoint segment".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        let dim = matrices[0].dim();
        if matrices.iter().any(|m| m.dim() != dim) {
            return Err(Error::Domain(
                "all segment matrices must share a dimension".into(),
            ));
        }
        Ok(Self {
            kind: TargetKind::PiecewiseTime {
                breakpoints,
                matrices,
            },
            ratio_bound,
        })
    }

    pub fn state_dependent(per_hidden: Vec<RateMatrix>, ratio_bound: f64) -> Result<Self> {
        if per_hidden.is_empty() {
            return Err(Error::Domain("need at least one hidden state".into()));
        }
        let dim = per_hidden[0].dim();
        if per_hidden.iter().any(|m| m.dim() != dim) {
            return Err(Error::Domain(
                "all per-state matrices must share a dimension".into(),
            ));
        }
        Ok(Self {
            kind: TargetKind::StateDependent(per_hidden),
            ratio_bound,
        })
    }

    /// Time-dependent rates given as a callable `(i, j, s) -> rate`.
    /// Integrals run adaptive Gauss-Legendre quadrature on the cells of
    /// `grid` (which must cover every horizon the family is used with).
    pub fn callable(
        f: impl Fn(usize, usize, f64) -> f64 + Send + Sync + 'static,
        grid: Vec<f64>,
        dim: usize,
        ratio_bound: f64,
    ) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "quadrature grid needs >= 2 strictly increasing points".into(),
            ));
        }
        Ok(Self {
            kind: TargetKind::Callable {
                f: Arc::new(f),
                grid,
                dim,
            },
            ratio_bound,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TargetKind::Constant(m) => m.dim(),
            TargetKind::PiecewiseTime { matrices, .. } => matrices[0].dim(),
            TargetKind::StateDependent(ms) => ms[0].dim(),
            TargetKind::Callable { dim, .. } => *dim,
        }
    }

    pub fn ratio_bound(&self) -> f64 {
        self.ratio_bound
    }

    pub fn is_state_dependent(&self) -> bool {
        matches!(self.kind, TargetKind::StateDependent(_))
    }

    /// `gamma_{i->j}(u)`. Errors when the driver kind does not match the
    /// family (a hidden-state family asked at a time point, or vice versa).
    pub fn rate(&self, i: usize, j: usize, u: DriverValue) -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        match (&self.kind, u) {
            (TargetKind::Constant(m), _) => Ok(m.rate(i, j)),
            (
                TargetKind::PiecewiseTime {
                    breakpoints,
                    matrices,
                },
                DriverValue::Time(s),
            ) => Ok(matrices[segment_index(breakpoints, s)].rate(i, j)),
            (TargetKind::StateDependent(ms), DriverValue::Hidden(x)) => ms
                .get(x)
                .map(|m| m.rate(i, j))
                .ok_or_else(|| Error::Domain(format!("hidden state {x} out of range"))),
            (TargetKind::Callable { f, .. }, DriverValue::Time(s)) => {
                let r = f(i, j, s);
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::Domain(format!(
                        "callable rate ({i},{j}) at s={s} returned {r}"
                    )));
                }
                Ok(r)
            }
            _ => Err(Error::Domain(
                "driver kind does not match the rate family kind".into(),
            )),
        }
    }

    /// Leave rate `gamma_{i->}(u) = sum_{j != i} gamma_{i->j}(u)`.
    pub fn leave_rate(&self, i: usize, u: DriverValue) -> Result<f64> {
        match (&self.kind, u) {
            (TargetKind::Constant(m), _) => Ok(m.leave(i)),
            (
                TargetKind::PiecewiseTime {
                    breakpoints,
                    matrices,
                },
                DriverValue::Time(s),
            ) => Ok(matrices[segment_index(breakpoints, s)].leave(i)),
            (TargetKind::StateDependent(ms), DriverValue::Hidden(x)) => ms
                .get(x)
                .map(|m| m.leave(i))
                .ok_or_else(|| Error::Domain(format!("hidden state {x} out of range"))),
            (TargetKind::Callable { .. }, DriverValue::Time(_)) => {
                let mut sum = 0.0;
                for j in 0..self.dim() {
                    if j != i {
                        sum += self.rate(i, j, u)?;
                    }
                }
                Ok(sum)
            }
            _ => Err(Error::Domain(
                "driver kind does not match the rate family kind".into(),
            )),
        }
    }

    /// `int_a^b gamma_{i->}(u_s) ds`, exact on piecewise-constant segments
    /// (in time, or between hidden jumps), quadrature for callables.
    pub fn integral_leave(&self, i: usize, a: f64, b: f64, driver: PathDriver) -> Result<f64> {
        if b < a {
            return Err(Error::Domain(format!(
                "integral bounds reversed: [{a}, {b}]"
            )));
        }
        if b == a {
            return Ok(0.0);
        }
        match (&self.kind, driver) {
            (TargetKind::Constant(m), _) => Ok(m.leave(i) * (b - a)),
            (
                TargetKind::PiecewiseTime {
                    breakpoints,
                    matrices,
                },
                PathDriver::Time,
            ) => {
                let mut total = 0.0;
                for (lo, hi, k) in split_by_breakpoints(breakpoints, a, b) {
                    total += matrices[k].leave(i) * (hi - lo);
                }
                Ok(total)
            }
            (TargetKind::StateDependent(ms), PathDriver::Hidden(x)) => {
                let mut total = 0.0;
                for (lo, hi, state) in overlap_segments(x, a, b)? {
                    let m = ms.get(state).ok_or_else(|| {
                        Error::Domain(format!("hidden state {state} out of range"))
                    })?;
                    total += m.leave(i) * (hi - lo);
                }
                Ok(total)
            }
            (TargetKind::Callable { grid, .. }, PathDriver::Time) => {
                let mut total = 0.0;
                for (lo, hi, _) in split_by_breakpoints(grid, a, b) {
                    total += adaptive_gl(
                        &|s| self.leave_rate(i, DriverValue::Time(s)).unwrap_or(f64::NAN),
                        lo,
                        hi,
                    )?;
                }
                Ok(total)
            }
            _ => Err(Error::Domain(
                "driver kind does not match the rate family kind".into(),
            )),
        }
    }

    /// Largest `gamma_{i->}(u) / gammabar_{i->}` over the family's checkable
    /// support (segments or hidden states; grid points for callables).
    pub fn observed_ratio_sup(&self, reference: &RateMatrix) -> f64 {
        let ratio = |m: &RateMatrix| -> f64 {
            (0..m.dim())
                .map(|i| {
                    let denom = reference.leave(i);
                    if denom > 0.0 {
                        m.leave(i) / denom
                    } else if m.leave(i) > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        };
        match &self.kind {
            TargetKind::Constant(m) => ratio(m),
            TargetKind::PiecewiseTime { matrices, .. } => {
                matrices.iter().map(ratio).fold(0.0, f64::max)
            }
            TargetKind::StateDependent(ms) => ms.iter().map(ratio).fold(0.0, f64::max),
            TargetKind::Callable { f, grid, dim } => {
                let mut sup: f64 = 0.0;
                for w in grid.windows(2) {
                    for &s in &[w[0], 0.5 * (w[0] + w[1])] {
                        for i in 0..*dim {
                            let leave: f64 =
                                (0..*dim).filter(|&j| j != i).map(|j| f(i, j, s)).sum();
                            let denom = reference.leave(i);
                            sup = sup.max(if denom > 0.0 {
                                leave / denom
                            } else if leave > 0.0 {
                                f64::INFINITY
                            } else {
                                0.0
                            });
                        }
                    }
                }
                sup
            }
        }
    }

    /// Largest positive part of `gammabar_{i->} - gamma_{i->}(u)` over the
    /// family's checkable support. Callables fall back to the worst case
    /// `gamma = 0`.
    pub fn leave_gap_sup(&self, reference: &RateMatrix) -> f64 {
        let dim = self.dim().min(reference.dim());
        match self.enumerable_matrices() {
            Some(matrices) => {
                let mut sup: f64 = 0.0;
                for i in 0..dim {
                    let inf_leave = matrices
                        .iter()
                        .map(|m| m.leave(i))
                        .fold(f64::INFINITY, f64::min);
                    sup = sup.max(reference.leave(i) - inf_leave);
                }
                sup.max(0.0)
            }
            None => (0..dim).map(|i| reference.leave(i)).fold(0.0, f64::max),
        }
    }

    /// Largest entrywise ratio `gamma_{i->j}(u) / gammabar_{i->j}` over the
    /// reference's support, when the family can be enumerated (`None` for
    /// callables).
    pub fn entry_ratio_sup(&self, reference: &RateMatrix) -> Option<f64> {
        let matrices = self.enumerable_matrices()?;
        let mut sup: f64 = 0.0;
        for m in matrices {
            for i in 0..m.dim() {
                for j in 0..m.dim() {
                    if i == j {
                        continue;
                    }
                    let denom = reference.rate(i, j);
                    if denom > 0.0 {
                        sup = sup.max(m.rate(i, j) / denom);
                    } else if m.rate(i, j) > 0.0 {
                        sup = f64::INFINITY;
                    }
                }
            }
        }
        Some(sup)
    }

    /// Per-entry matrices the family can be enumerated as (everything but
    /// callables); used by validation for dominance checks.
    fn enumerable_matrices(&self) -> Option<Vec<&RateMatrix>> {
        match &self.kind {
            TargetKind::Constant(m) => Some(vec![m]),
            TargetKind::PiecewiseTime { matrices, .. } => Some(matrices.iter().collect()),
            TargetKind::StateDependent(ms) => Some(ms.iter().collect()),
            TargetKind::Callable { .. } => None,
        }
    }
}

/// Index of the piecewise segment containing `s` (right-continuous:
/// segment `k` covers `[b_k, b_{k+1})`).
fn segment_index(breakpoints: &[f64], s: f64) -> usize {
    breakpoints.partition_point(|&b| b <= s).saturating_sub(1)
}

/// Splits `[a, b]` at interior breakpoints, yielding `(lo, hi, segment)`.
fn split_by_breakpoints(breakpoints: &[f64], a: f64, b: f64) -> Vec<(f64, f64, usize)> {
    let mut cuts = vec![a];
    for &bp in breakpoints {
        if bp > a && bp < b {
            cuts.push(bp);
        }
    }
    cuts.push(b);
    cuts.windows(2)
        .map(|w| (w[0], w[1], segment_index(breakpoints, w[0])))
        .collect()
}

/// Constancy pieces of `x` intersected with `[a, b]`.
fn overlap_segments(x: &ChainPath, a: f64, b: f64) -> Result<Vec<(f64, f64, usize)>> {
    if a < 0.0 || b > x.horizon() {
        return Err(Error::Domain(format!(
            "integration window [{a}, {b}] outside driver path domain [0, {}]",
            x.horizon()
        )));
    }
    Ok(x.segments()
        .into_iter()
        .filter_map(|(lo, hi, s)| {
            let lo = lo.max(a);
            let hi = hi.min(b);
            (hi > lo).then_some((lo, hi, s))
        })
        .collect())
}

// 16-point Gauss-Legendre nodes/weights on [-1, 1] (positive half; mirrored).
const GL16_NODES: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

fn gl16(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut sum = 0.0;
    for k in 0..8 {
        sum += GL16_WEIGHTS[k] * (f(c + h * GL16_NODES[k]) + f(c - h * GL16_NODES[k]));
    }
    sum * h
}

/// Adaptive composite Gauss-Legendre to relative tolerance 1e-10.
fn adaptive_gl(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, depth: u32) -> Result<f64> {
        let mid = 0.5 * (a + b);
        let left = gl16(f, a, mid);
        let right = gl16(f, mid, b);
        let refined = left + right;
        if !refined.is_finite() {
            return Err(Error::Numerical(format!(
                "quadrature diverged on [{a}, {b}]"
            )));
        }
        if (refined - whole).abs() <= 1e-10 * refined.abs().max(1e-300) || depth >= 40 {
            Ok(refined)
        } else {
            Ok(recurse(f, a, mid, left, depth + 1)? + recurse(f, mid, b, right, depth + 1)?)
        }
    }
    recurse(f, a, b, gl16(f, a, b), 0)
}

/// Conditions a model can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionId {
    C1,
    C2,
    C3,
    A1,
    A2,
    A3,
    U,
    Dominance,
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConditionId::C1 => "C1",
            ConditionId::C2 => "C2",
            ConditionId::C3 => "C3",
            ConditionId::A1 => "A1",
            ConditionId::A2 => "A2",
            ConditionId::A3 => "A3",
            ConditionId::U => "U",
            ConditionId::Dominance => "dominance",
        };
        f.write_str(s)
    }
}

/// Outcome of [`validate`]: `ok` exactly when no condition is violated.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    violations: Vec<(ConditionId, String)>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<(ConditionId, String)>) -> Self {
        Self { violations }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[(ConditionId, String)] {
        &self.violations
    }

    pub fn violates(&self, id: ConditionId) -> bool {
        self.violations.iter().any(|(c, _)| *c == id)
    }

    /// Turns a failed report into an error, for call sites that require a
    /// valid model.
    pub fn into_result(self) -> Result<()> {
        if self.ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return f.write_str("ok");
        }
        let items: Vec<String> = self
            .violations
            .iter()
            .map(|(c, d)| format!("[{c}] {d}"))
            .collect();
        f.write_str(&items.join("; "))
    }
}

/// Checks conditions (C1)-(C3) and entrywise dominance for a
/// reference/target rate pair. Violations are data, not errors.
pub fn validate(reference: &RateMatrix, target: &TargetRateFamily) -> ValidationReport {
    let mut violations = Vec::new();
    let dim = reference.dim();

    if target.dim() != dim {
        violations.push((
            ConditionId::C1,
            format!(
                "target dimension {} does not match reference dimension {dim}",
                target.dim()
            ),
        ));
        return ValidationReport::from_violations(violations);
    }

    // C1: finite sup of reference leave rates. Finite spaces with finite
    // entries satisfy this by construction; the check still guards NaN.
    if (0..dim).any(|i| !reference.leave(i).is_finite()) {
        violations.push((
            ConditionId::C1,
            "reference leave rates must be finite".into(),
        ));
    }

    // C3 on the reference: no cemetery states.
    for i in 0..dim {
        if reference.leave(i) <= 0.0 {
            violations.push((
                ConditionId::C3,
                format!("reference state {i} is a cemetery (leave rate 0)"),
            ));
        }
    }

    // C2: the declared ratio bound must be finite and no smaller than the
    // ratio actually observed on the checkable part of the family.
    if !target.ratio_bound().is_finite() || target.ratio_bound() <= 0.0 {
        violations.push((
            ConditionId::C2,
            format!(
                "declared ratio bound {} is not a finite positive number",
                target.ratio_bound()
            ),
        ));
    } else {
        let observed = target.observed_ratio_sup(reference);
        if observed > target.ratio_bound() * (1.0 + 1e-12) {
            violations.push((
                ConditionId::C2,
                format!(
                    "observed leave-rate ratio {observed} exceeds declared bound {}",
                    target.ratio_bound()
                ),
            ));
        }
    }

    if let Some(matrices) = target.enumerable_matrices() {
        // C3 on the target: every state can be left under every driver value.
        for (k, m) in matrices.iter().enumerate() {
            for i in 0..dim {
                if m.leave(i) <= 0.0 {
                    violations.push((
                        ConditionId::C3,
                        format!("target state {i} is a cemetery (leave rate 0) in piece {k}"),
                    ));
                }
            }
        }
        // Dominance: target can only move along edges the reference can.
        for (k, m) in matrices.iter().enumerate() {
            for i in 0..dim {
                for j in 0..dim {
                    if i != j && m.rate(i, j) > 0.0 && reference.rate(i, j) == 0.0 {
                        violations.push((
                            ConditionId::Dominance,
                            format!(
                                "target rate {i}->{j} is {} in piece {k} but the reference rate is 0",
                                m.rate(i, j)
                            ),
                        ));
                    }
                }
            }
        }
    }

    ValidationReport::from_violations(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_state_unit() -> RateMatrix {
        RateMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn cemetery_row_violates_c3() {
        let reference = RateMatrix::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let target = TargetRateFamily::constant(two_state_unit(), 2.0);
        let report = validate(&reference, &target);
        assert!(!report.ok());
        assert!(report.violates(ConditionId::C3));
    }

    #[test]
    fn undominated_target_edge_is_flagged() {
        // gamma_{1->2}(x) = 1 while gammabar_{1->2} = 0: the ratio is
        // unbounded, reported as a dominance violation (and C2, since the
        // leave-rate ratio for state 0 is infinite).
        let reference = RateMatrix::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let target = TargetRateFamily::constant(two_state_unit(), 2.0);
        let report = validate(&reference, &target);
        assert!(report.violates(ConditionId::Dominance));
        assert!(report.violates(ConditionId::C2));
    }

    #[test]
    fn reference_equal_target_validates() {
        let reference = two_state_unit();
        let target = TargetRateFamily::constant(two_state_unit(), 1.0);
        let report = validate(&reference, &target);
        assert!(report.ok(), "violations: {report}");
        assert!(!report.violates(ConditionId::C2));
        assert!(!report.violates(ConditionId::Dominance));
    }

    #[test]
    fn state_at_no_jumps_returns_initial() {
        let p = ChainPath::constant(3, 5.0).unwrap();
        assert_eq!(p.state_at(0.0).unwrap(), 3);
        assert_eq!(p.state_at(4.9).unwrap(), 3);
    }

    #[test]
    fn state_at_is_right_continuous() {
        let p = ChainPath::new(0, vec![1.0], vec![1], 2.0).unwrap();
        assert_eq!(
            p.state_at(1.0).unwrap(),
            1,
            "cadlag: value at a jump is the new state"
        );
        assert_eq!(
            p.state_at(1.0 - 1e-12).unwrap(),
            0,
            "left limit keeps the old state"
        );
    }

    #[test]
    fn state_at_rejects_times_outside_domain() {
        let p = ChainPath::constant(0, 1.0).unwrap();
        assert!(p.state_at(-0.1).is_err());
        assert!(p.state_at(1.1).is_err());
    }

    #[test]
    fn jump_count_examples() {
        let none = ChainPath::constant(0, 4.0).unwrap();
        assert_eq!(none.jump_count(4.0).unwrap(), 0);

        let p = ChainPath::new(0, vec![1.0, 2.0], vec![1, 0], 4.0).unwrap();
        assert_eq!(p.jump_count(1.5).unwrap(), 1);
        assert_eq!(
            p.jump_count(2.0).unwrap(),
            2,
            "a jump exactly at t counts (cadlag N)"
        );
    }

    #[test]
    fn self_jumps_are_rejected() {
        assert!(ChainPath::new(0, vec![1.0], vec![0], 2.0).is_err());
        assert!(ChainPath::new(0, vec![1.0, 2.0], vec![1, 1], 3.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let space = StateSpace::new(vec!["up", "down"]).unwrap();
        let p = ChainPath::new(0, vec![0.5, 1.25], vec![1, 0], 2.0).unwrap();
        let csv = p.to_csv(&space);
        let q = ChainPath::from_csv(&csv, &space, Some(2.0)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn piecewise_integral_is_exact() {
        let m1 = RateMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let m2 = RateMatrix::new(vec![vec![0.0, 0.5], vec![1.0, 0.0]]).unwrap();
        let fam = TargetRateFamily::piecewise_time(vec![0.0, 1.0], vec![m1, m2], 2.0).unwrap();
        // int_0.5^1.5 gamma_{0->}(s) ds = 2 * 0.5 + 0.5 * 0.5
        let v = fam.integral_leave(0, 0.5, 1.5, PathDriver::Time).unwrap();
        assert!((v - 1.25).abs() < 1e-14);
    }

    #[test]
    fn callable_integral_matches_closed_form() {
        // gamma_{0->1}(s) = 1 + s on a two-state space.
        let fam = TargetRateFamily::callable(
            |i, j, s| {
                if i != j && i == 0 {
                    1.0 + s
                } else if i != j {
                    1.0
                } else {
                    0.0
                }
            },
            vec![0.0, 1.0, 2.0],
            2,
            4.0,
        )
        .unwrap();
        let v = fam.integral_leave(0, 0.0, 2.0, PathDriver::Time).unwrap();
        assert!((v - 4.0).abs() < 1e-9, "int_0^2 (1+s) ds = 4, got {v}");
    }

    #[test]
    fn hidden_driver_integral_splits_at_hidden_jumps() {
        let g0 = RateMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let g1 = RateMatrix::new(vec![vec![0.0, 0.5], vec![1.0, 0.0]]).unwrap();
        let fam = TargetRateFamily::state_dependent(vec![g0, g1], 2.0).unwrap();
        let x = ChainPath::new(0, vec![1.0], vec![1], 3.0).unwrap();
        // X = 0 on [0,1), X = 1 on [1,3]: int_0^2 gamma_{0->}(X_s) ds = 2*1 + 0.5*1.
        let v = fam
            .integral_leave(0, 0.0, 2.0, PathDriver::Hidden(&x))
            .unwrap();
        assert!((v - 2.5).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn jump_count_window_matches_jump_times(
            times in proptest::collection::vec(0.01f64..10.0, 0..12),
            s in 0.0f64..10.0,
            t in 0.0f64..10.0,
        ) {
            // Build strictly increasing times by cumulative sums, alternate states.
            let mut acc = 0.0;
            let mut jumps = Vec::new();
            for dt in &times {
                acc += dt;
                jumps.push(acc);
            }
            let horizon = acc + 1.0;
            let targets: Vec<usize> = (0..jumps.len()).map(|k| (k + 1) % 2).collect();
            let path = ChainPath::new(0, jumps.clone(), targets, horizon).unwrap();
            let (s, t) = if s <= t { (s, t) } else { (t, s) };
            let s = s.min(horizon);
            let t = t.min(horizon);
            let window = jumps.iter().filter(|&&w| w > s && w <= t).count();
            prop_assert_eq!(
                path.jump_count(t).unwrap() - path.jump_count(s).unwrap(),
                window
            );
        }

        #[test]
        fn state_changes_exactly_at_jump_times(
            times in proptest::collection::vec(0.05f64..5.0, 1..8),
        ) {
            let mut acc = 0.0;
            let mut jumps = Vec::new();
            for dt in &times {
                acc += dt;
                jumps.push(acc);
            }
            let horizon = acc + 0.5;
            let targets: Vec<usize> = (0..jumps.len()).map(|k| (k + 1) % 2).collect();
            let path = ChainPath::new(0, jumps.clone(), targets, horizon).unwrap();
            for &w in &jumps {
                let before = path.state_at((w - 1e-9).max(0.0)).unwrap();
                let at = path.state_at(w).unwrap();
                prop_assert_ne!(before, at, "state must change at a jump time");
            }
            // Between jumps the state is constant.
            for w in path.segments() {
                let (lo, hi, state) = w;
                let mid = 0.5 * (lo + hi);
                if hi > lo {
                    prop_assert_eq!(path.state_at(mid).unwrap(), state);
                }
            }
        }
    }
}
