//! Reference-chain simulation and the rate-change machinery built on it:
//! the log likelihood weight, its jump-time recursion, von Neumann rejection
//! sampling (whole-horizon and segmented) and weighted Monte Carlo.
//!
//! Everything here is driven by owned [`RngStream`] values so that runs are
//! reproducible and trivially parallel: give each sample its own substream
//! and reduce in sample order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain::{ChainPath, PathDriver, RateMatrix, TargetRateFamily};
use crate::error::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream: `(seed, stream_id, draws)` fully determines
/// the next variate, and distinct stream ids give independent streams.
///
/// Substreams are derived by hashing the child index into the stream id, so
/// parallel loops can hand stream `i` to sample `i` and stay bit-reproducible
/// regardless of execution order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            draws: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Independent stream for child `index`, derived from this stream's id
    /// only (not its draw position).
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream::new(
            self.seed,
            splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1))),
        )
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Exponential holding time with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(-self.uniform()).ln_1p() / rate
    }

    /// Index draw proportional to `weights` (not necessarily normalized).
    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(format!(
                "categorical weights must have positive finite sum, got {total}"
            )));
        }
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Ok(k);
            }
        }
        Ok(weights.len() - 1)
    }
}

/// Natural log of the likelihood weight `A_t` together with the time it was
/// accumulated to. `A_0 = 1`, so the initial value has `log_a = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogWeight {
    pub log_a: f64,
    pub t: f64,
}

impl LogWeight {
    /// The `W_0 = 0`, `A_0 = 1` starting point of the jump-time recursion.
    pub fn initial() -> Self {
        Self { log_a: 0.0, t: 0.0 }
    }

    pub fn weight(&self) -> f64 {
        self.log_a.exp()
    }
}

/// Proposal paths with their weights against one fixed (reference, target)
/// pair.
#[derive(Debug, Clone)]
pub struct WeightedSampleSet {
    paths: Vec<ChainPath>,
    log_weights: Vec<LogWeight>,
}

impl WeightedSampleSet {
    pub fn new(paths: Vec<ChainPath>, log_weights: Vec<LogWeight>) -> Result<Self> {
        if paths.len() != log_weights.len() {
            return Err(Error::Domain(
                "paths and log_weights must have equal length".into(),
            ));
        }
        Ok(Self { paths, log_weights })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[ChainPath] {
        &self.paths
    }

    pub fn log_weights(&self) -> &[LogWeight] {
        &self.log_weights
    }
}

fn check_init(init: &[f64], dim: usize) -> Result<()> {
    if init.len() != dim {
        return Err(Error::Domain(format!(
            "initial distribution has length {} but the space has {dim} states",
            init.len()
        )));
    }
    if init.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Domain("initial probabilities must be >= 0".into()));
    }
    let total: f64 = init.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!(
            "initial distribution sums to {total}, expected 1 within 1e-12"
        )));
    }
    Ok(())
}

/// Jumps simulated from `state` starting at time `t0`, stopped at the
/// horizon or after `max_jumps` jumps, whichever comes first.
pub(crate) fn simulate_jumps_from(
    rates: &RateMatrix,
    mut state: usize,
    t0: f64,
    horizon: f64,
    max_jumps: Option<usize>,
    rng: &mut RngStream,
) -> Result<Vec<(f64, usize)>> {
    let mut jumps = Vec::new();
    let mut t = t0;
    loop {
        if let Some(m) = max_jumps {
            if jumps.len() >= m {
                break;
            }
        }
        let leave = rates.leave(state);
        if leave <= 0.0 {
            break; // absorbed; validation normally rules this out
        }
        t += rng.exponential(leave);
        if t > horizon {
            break;
        }
        let row: Vec<f64> = (0..rates.dim()).map(|j| rates.rate(state, j)).collect();
        let next = rng.categorical(&row)?;
        jumps.push((t, next));
        state = next;
    }
    Ok(jumps)
}

/// Exact simulation of the constant-rate reference chain on `[0, horizon]`:
/// exponential holding times with the leave rates, next state proportional
/// to the row of the rate matrix.
pub fn simulate_reference_chain(
    rates: &RateMatrix,
    init: &[f64],
    horizon: f64,
    rng: &mut RngStream,
) -> Result<ChainPath> {
    check_init(init, rates.dim())?;
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::Domain(format!(
            "horizon must be finite and >= 0, got {horizon}"
        )));
    }
    let initial = rng.categorical(init)?;
    let jumps = simulate_jumps_from(rates, initial, 0.0, horizon, None, rng)?;
    let (times, targets) = jumps.into_iter().unzip();
    ChainPath::new(initial, times, targets, horizon)
}

/// Log likelihood weight of a path against a (reference, target) pair:
///
/// `log A_T = int_0^T (gammabar_{Y_s->} - gamma_{Y_s->}(u_s)) ds
///           + sum_{jumps s} log(gamma_{Y_{s-}->Y_s}(u_s) / gammabar_{Y_{s-}->Y_s})`
///
/// where `u_s` is the time `s` itself or the hidden-path value `X_s`. The
/// time integral is exact on piecewise-constant rate segments.
///
/// A jump the target cannot make (target rate 0 at a jump taken) yields
/// `log_a = -inf`, i.e. weight zero; a jump the *reference* cannot make is
/// an absolute-continuity error.
pub fn log_weight(
    path: &ChainPath,
    target: &TargetRateFamily,
    reference: &RateMatrix,
    driver: PathDriver,
) -> Result<LogWeight> {
    let mut log_a = incremental_sum(path, 0.0, path.horizon(), target, reference, driver)?;
    let mut from = path.initial_state();
    for (&w, &to) in path.jump_times().iter().zip(path.jump_targets()) {
        log_a += jump_log_ratio(from, to, w, target, reference, driver)?;
        from = to;
    }
    Ok(LogWeight {
        log_a,
        t: path.horizon(),
    })
}

/// The integral part of the weight over `[a, b]`, following the path's
/// occupied states.
fn incremental_sum(
    path: &ChainPath,
    a: f64,
    b: f64,
    target: &TargetRateFamily,
    reference: &RateMatrix,
    driver: PathDriver,
) -> Result<f64> {
    let mut total = 0.0;
    for (lo, hi, y) in path.segments() {
        let lo = lo.max(a);
        let hi = hi.min(b);
        if hi <= lo {
            continue;
        }
        total += reference.leave(y) * (hi - lo);
        total -= target.integral_leave(y, lo, hi, driver)?;
    }
    Ok(total)
}

fn jump_log_ratio(
    from: usize,
    to: usize,
    at: f64,
    target: &TargetRateFamily,
    reference: &RateMatrix,
    driver: PathDriver,
) -> Result<f64> {
    let gbar = reference.rate(from, to);
    if gbar <= 0.0 {
        return Err(Error::AbsoluteContinuity { from, to, at });
    }
    let g = target.rate(from, to, driver.value_at(at)?)?;
    Ok((g / gbar).ln())
}

/// One step of the jump-time weight recursion:
/// `A_{W_n} = A_{W_{n-1}} * exp(int (gammabar - gamma)) * (jump ratio)`.
///
/// The segment `(prev.t, segment_end]` must contain no interior jump; when
/// `segment_end` is itself a jump time its ratio factor is included, so
/// composing increments over all jumps (plus the final jump-free stretch)
/// reproduces [`log_weight`].
pub fn incremental_log_weight(
    prev: LogWeight,
    path: &ChainPath,
    segment_end: f64,
    target: &TargetRateFamily,
    reference: &RateMatrix,
    driver: PathDriver,
) -> Result<LogWeight> {
    if !(segment_end > prev.t) || segment_end > path.horizon() {
        return Err(Error::Usage(format!(
            "segment end {segment_end} must lie in ({}, {}]",
            prev.t,
            path.horizon()
        )));
    }
    let interior = path
        .jump_times()
        .iter()
        .filter(|&&w| w > prev.t && w < segment_end)
        .count();
    if interior > 0 {
        return Err(Error::Usage(format!(
            "segment ({}, {segment_end}] contains {interior} interior jumps; advance one jump at a time",
            prev.t
        )));
    }
    let mut log_a =
        prev.log_a + incremental_sum(path, prev.t, segment_end, target, reference, driver)?;
    if let Some(k) = path.jump_times().iter().position(|&w| w == segment_end) {
        let from = if k == 0 {
            path.initial_state()
        } else {
            path.jump_targets()[k - 1]
        };
        log_a += jump_log_ratio(
            from,
            path.jump_targets()[k],
            segment_end,
            target,
            reference,
            driver,
        )?;
    }
    Ok(LogWeight {
        log_a,
        t: segment_end,
    })
}

/// Von Neumann acceptance-rejection: draw proposal paths and independent
/// `U ~ Uniform[0, C]` until `U <= A_T(Y)`. The accepted path has the target
/// law; the attempt count is returned alongside.
///
/// The caller certifies `bound_c` (condition Good A); an observed weight
/// above it invalidates correctness and aborts with an error rather than
/// being clipped.
pub fn rejection_sample(
    proposal: &RateMatrix,
    target: &TargetRateFamily,
    bound_c: f64,
    init: &[f64],
    horizon: f64,
    rng: &mut RngStream,
    max_attempts: u64,
) -> Result<(ChainPath, u64)> {
    if !(bound_c > 1.0) {
        return Err(Error::Domain(format!(
            "rejection bound C must exceed 1, got {bound_c}"
        )));
    }
    let mut weight_sum = 0.0;
    for attempt in 1..=max_attempts {
        let path = simulate_reference_chain(proposal, init, horizon, rng)?;
        let a = log_weight(&path, target, proposal, PathDriver::Time)?.weight();
        if a > bound_c {
            return Err(Error::BoundViolation {
                observed: a,
                bound: bound_c,
            });
        }
        weight_sum += a;
        let u = rng.uniform_range(0.0, bound_c);
        if u <= a {
            return Ok((path, attempt));
        }
    }
    Err(Error::Budget {
        attempts: max_attempts,
        acceptance_estimate: weight_sum / (max_attempts as f64) / bound_c,
    })
}

/// Outcome bookkeeping for [`segmented_rejection_sample`].
#[derive(Debug, Clone)]
pub struct SegmentedOutcome {
    pub path: ChainPath,
    /// Attempts consumed per accepted block.
    pub block_attempts: Vec<u64>,
    /// The per-block bound actually used, so callers can tune
    /// `jumps_per_segment`.
    pub bound_c: f64,
}

/// Certified bound on a block weight stopped after at most `jumps` jumps
/// within `duration` time units: the integral factor is at most
/// `exp(sup-rate-gap * duration)` and the product of at most `jumps` jump
/// ratios is at most `max(ratio, 1)^jumps`, with `ratio` the entrywise
/// ratio bound (callables fall back to the declared leave-rate ratio bound).
fn segmented_block_bound(
    proposal: &RateMatrix,
    target: &TargetRateFamily,
    duration: f64,
    jumps: usize,
) -> f64 {
    let gap = target.leave_gap_sup(proposal);
    let ratio = target
        .entry_ratio_sup(proposal)
        .unwrap_or(target.ratio_bound())
        .max(1.0);
    ((gap * duration).exp() * ratio.powi(jumps as i32)).max(1.0 + 1e-6)
}

/// Rejection sampling a block of `jumps_per_segment` jumps at a time,
/// stopping each block at the horizon or the block's last jump. Works when
/// the whole-horizon weight is unbounded but each stopped block satisfies
/// (Good A).
///
/// The per-block bound is conservative: `C = exp(c*T) * c^n` with `c` the
/// (Bounded transitions) constant derived from the model, clamped to exceed
/// one.
pub fn segmented_rejection_sample(
    proposal: &RateMatrix,
    target: &TargetRateFamily,
    jumps_per_segment: usize,
    horizon: f64,
    init: &[f64],
    rng: &mut RngStream,
    max_attempts: u64,
) -> Result<SegmentedOutcome> {
    if jumps_per_segment == 0 {
        return Err(Error::Domain("jumps_per_segment must be >= 1".into()));
    }
    check_init(init, proposal.dim())?;
    // The first block sees the whole horizon, so its bound is the largest.
    let bound_c = segmented_block_bound(proposal, target, horizon, jumps_per_segment);
    if !bound_c.is_finite() {
        return Err(Error::Domain(format!(
            "segmented bound overflowed (C={bound_c}); lower jumps_per_segment"
        )));
    }

    if horizon == 0.0 {
        let path = ChainPath::constant(rng.categorical(init)?, 0.0)?;
        return Ok(SegmentedOutcome {
            path,
            block_attempts: Vec::new(),
            bound_c,
        });
    }

    let mut times: Vec<f64> = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    let mut block_attempts = Vec::new();
    let mut t0 = 0.0;
    // None until the first block is accepted; afterwards the next block
    // continues deterministically from its end state.
    let mut initial_state: Option<usize> = None;
    let mut current_state: Option<usize> = None;

    while t0 < horizon {
        let block_bound = segmented_block_bound(proposal, target, horizon - t0, jumps_per_segment);
        let mut accepted = None;
        let mut attempts = 0u64;
        let mut weight_sum = 0.0;
        while attempts < max_attempts {
            attempts += 1;
            // The first block redraws the initial state each attempt; the
            // block weight has conditional mean one from every start, so the
            // accepted initial state keeps the requested law.
            let start = match current_state {
                Some(s) => s,
                None => rng.categorical(init)?,
            };
            let jumps =
                simulate_jumps_from(proposal, start, t0, horizon, Some(jumps_per_segment), rng)?;
            let block_end = if jumps.len() == jumps_per_segment {
                jumps.last().map(|&(w, _)| w).unwrap_or(horizon)
            } else {
                horizon
            };
            let log_a = block_log_weight(start, &jumps, t0, block_end, target, proposal)?;
            let a = log_a.exp();
            if a > block_bound {
                return Err(Error::BoundViolation {
                    observed: a,
                    bound: block_bound,
                });
            }
            weight_sum += a;
            let u = rng.uniform_range(0.0, block_bound);
            if u <= a {
                accepted = Some((start, jumps, block_end));
                break;
            }
        }
        let Some((start, jumps, block_end)) = accepted else {
            return Err(Error::Budget {
                attempts: max_attempts,
                acceptance_estimate: weight_sum / (max_attempts as f64) / block_bound,
            });
        };
        block_attempts.push(attempts);
        initial_state.get_or_insert(start);
        let end_state = jumps.last().map(|&(_, s)| s).unwrap_or(start);
        for (w, s) in jumps {
            times.push(w);
            targets.push(s);
        }
        current_state = Some(end_state);
        t0 = block_end;
    }

    let path = ChainPath::new(
        initial_state.expect("at least one block ran"),
        times,
        targets,
        horizon,
    )?;
    Ok(SegmentedOutcome {
        path,
        block_attempts,
        bound_c,
    })
}

/// Weight of one block: the path holds `start` from `t0` until its first
/// block jump, and so on; integral and jump factors use absolute time.
fn block_log_weight(
    start: usize,
    jumps: &[(f64, usize)],
    t0: f64,
    block_end: f64,
    target: &TargetRateFamily,
    reference: &RateMatrix,
) -> Result<f64> {
    let mut log_a = 0.0;
    let mut state = start;
    let mut seg_start = t0;
    for &(w, next) in jumps {
        log_a += reference.leave(state) * (w - seg_start);
        log_a -= target.integral_leave(state, seg_start, w, PathDriver::Time)?;
        log_a += jump_log_ratio(state, next, w, target, reference, PathDriver::Time)?;
        state = next;
        seg_start = w;
    }
    if block_end > seg_start {
        log_a += reference.leave(state) * (block_end - seg_start);
        log_a -= target.integral_leave(state, seg_start, block_end, PathDriver::Time)?;
    }
    Ok(log_a)
}

/// Independent proposal paths with their weights, sample `m` on substream
/// `m`. Generation is parallel but bit-reproducible.
pub fn sample_weighted_paths(
    proposal: &RateMatrix,
    target: &TargetRateFamily,
    init: &[f64],
    horizon: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<WeightedSampleSet> {
    check_init(init, proposal.dim())?;
    let results: Vec<Result<(ChainPath, LogWeight)>> = (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut stream = rng.substream(m as u64);
            let path = simulate_reference_chain(proposal, init, horizon, &mut stream)?;
            let lw = log_weight(&path, target, proposal, PathDriver::Time)?;
            Ok((path, lw))
        })
        .collect();
    let mut paths = Vec::with_capacity(samples);
    let mut weights = Vec::with_capacity(samples);
    for r in results {
        let (p, w) = r?;
        paths.push(p);
        weights.push(w);
    }
    WeightedSampleSet::new(paths, weights)
}

/// Importance-sampling estimate of a target-law path functional from
/// proposal simulations: `(1/M) sum_m A^m f(Y^m)` with its sample standard
/// error. The reduction order is fixed by sample index, so the result does
/// not depend on the thread count.
pub fn weighted_expectation<F>(
    f: F,
    proposal: &RateMatrix,
    target: &TargetRateFamily,
    init: &[f64],
    horizon: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<(f64, f64)>
where
    F: Fn(&ChainPath) -> f64 + Sync,
{
    if samples < 2 {
        return Err(Error::Domain(
            "need at least 2 samples for a standard error".into(),
        ));
    }
    let set = sample_weighted_paths(proposal, target, init, horizon, samples, rng)?;
    let values: Vec<f64> = set
        .paths()
        .iter()
        .zip(set.log_weights())
        .map(|(p, w)| w.weight() * f(p))
        .collect();
    let m = samples as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok((mean, (var / m).sqrt()))
}
