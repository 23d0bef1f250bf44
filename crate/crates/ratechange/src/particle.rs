//! Weighted and residual-branching particle approximations of the
//! unnormalized filter, the normalized filter, and Bayes factors.
//!
//! Particles evolve independently between observation events and interact
//! only at event times through the residual branching step. All estimates
//! divide by the *initial* particle count, matching the definition
//! `S^N(f) = (1/N) sum_i A^i f(X^i)` even while the population fluctuates.
//!
//! Weights are kept on an absolute scale by default: the smoothing uniforms
//! `V` are added directly to the weights, so their effect grows as the mean
//! weight decays (this is inherent to the additive smoothing; tighten
//! `v_halfwidth`, or rescale with [`Ensemble::rescale_weights`] on long
//! runs, which moves a common factor into `total_log_offset`).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CmomModel, ObsSequence};
use crate::sampler::RngStream;

/// One copy of the signal with its accumulated log weight `log A^i_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: usize,
    pub log_weight: f64,
}

/// Particle population approximating the unnormalized filter at time `t`.
#[derive(Debug, Clone)]
pub struct Ensemble {
    particles: Vec<Particle>,
    n0: usize,
    t: f64,
    total_log_offset: f64,
    generation: u64,
    obs_fingerprint: u64,
}

fn fnv_mix(h: &mut u64, v: u64) {
    *h ^= v;
    *h = h.wrapping_mul(0x0000_0100_0000_01b3);
}

impl Ensemble {
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn initial_count(&self) -> usize {
        self.n0
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn total_log_offset(&self) -> f64 {
        self.total_log_offset
    }

    /// Fingerprint of the observation segments consumed so far; Bayes
    /// factors require it to match between runs.
    pub fn obs_fingerprint(&self) -> u64 {
        self.obs_fingerprint
    }

    /// Moves the largest log weight into `total_log_offset` so stored
    /// weights stay O(1). Estimates are unchanged; the branching band is
    /// evaluated on the stored scale, so rescaling also keeps the smoothing
    /// uniforms proportionate on long runs.
    pub fn rescale_weights(&mut self) {
        let Some(max) = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .max_by(f64::total_cmp)
        else {
            return;
        };
        if !max.is_finite() {
            return;
        }
        for p in &mut self.particles {
            p.log_weight -= max;
        }
        self.total_log_offset += max;
    }

    /// Constructs an ensemble directly from particles; mainly for tests and
    /// restart files.
    pub fn from_parts(particles: Vec<Particle>, n0: usize, t: f64) -> Result<Self> {
        if particles.is_empty() || n0 == 0 {
            return Err(Error::Domain("ensemble must start non-empty".into()));
        }
        Ok(Self {
            particles,
            n0,
            t,
            total_log_offset: 0.0,
            generation: 0,
            obs_fingerprint: 0xcbf2_9ce4_8422_2325,
        })
    }
}

/// Residual-branching parameters: particles with smoothed weight inside
/// `(mean/r, r*mean)` are kept; the rest branch into
/// `floor(w/mean) + Bernoulli(frac(w/mean))` offspring at the mean weight.
///
/// `r = f64::INFINITY` together with `v_halfwidth = 0` disables branching
/// (the pure weighted particle filter).
#[derive(Debug)]
pub struct BranchingConfig {
    pub r: f64,
    pub v_halfwidth: f64,
    pub rng: RngStream,
}

impl BranchingConfig {
    pub fn new(r: f64, v_halfwidth: f64, rng: RngStream) -> Result<Self> {
        if !(r > 1.0) {
            return Err(Error::Domain(format!(
                "branching parameter r must exceed 1, got {r}"
            )));
        }
        if !(v_halfwidth >= 0.0) {
            return Err(Error::Domain(format!(
                "smoothing half-width must be >= 0, got {v_halfwidth}"
            )));
        }
        Ok(Self {
            r,
            v_halfwidth,
            rng,
        })
    }
}

/// `N` independent draws from the initial signal law, all with weight one.
pub fn init_ensemble(model: &CmomModel, n: usize, rng: &mut RngStream) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::Domain("need at least one particle".into()));
    }
    let particles = (0..n)
        .map(|_| {
            Ok(Particle {
                state: rng.categorical(model.init_hidden())?,
                log_weight: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_parts(particles, n, 0.0)
}

/// Advances every particle independently over `(ensemble.t, t_next]` while
/// the observation holds `y_prev`, and applies the event weight factor when
/// `event` carries the symbol observed at `t_next` (`None` advances to a
/// record point with no event, e.g. the horizon).
///
/// Each particle's weight increment is
/// `int (gammabar_{Y->} - gamma_{Y->}(X^i_s)) ds + log jump ratio`,
/// with the integral split exactly at the particle's own jump times.
pub fn evolve(
    ensemble: &Ensemble,
    model: &CmomModel,
    t_next: f64,
    y_prev: usize,
    event: Option<usize>,
    rng: &RngStream,
) -> Result<Ensemble> {
    if !(t_next > ensemble.t) {
        return Err(Error::Usage(format!(
            "t_next={t_next} must exceed the ensemble time {}",
            ensemble.t
        )));
    }
    if let Some(y_new) = event {
        if y_new == y_prev && !model.observation().is_cthmm() {
            return Err(Error::Usage(
                "observation cannot re-enter its own state in a CMOM model".into(),
            ));
        }
    }
    let t0 = ensemble.t;
    let dt = t_next - t0;
    let parent = rng.substream(ensemble.generation);
    let ref_rate = model.observation().reference_event_rate(y_prev);

    let moved: Vec<Result<Particle>> = ensemble
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut stream = parent.substream(i as u64);
            let seg = model
                .hidden()
                .evolve_segment(p.state, t0, dt, &mut stream)?;
            let mut increment = ref_rate * dt;
            for (lo, hi, xs) in seg.segments() {
                if hi > lo {
                    increment -= model.observation().target_event_rate(y_prev, xs)? * (hi - lo);
                }
            }
            let end_state = seg.final_state();
            if let Some(y_new) = event {
                increment += model
                    .observation()
                    .log_jump_ratio(y_prev, y_new, end_state, t_next)?;
            }
            Ok(Particle {
                state: end_state,
                log_weight: p.log_weight + increment,
            })
        })
        .collect();

    let mut particles = Vec::with_capacity(moved.len());
    for p in moved {
        particles.push(p?);
    }
    let mut fp = ensemble.obs_fingerprint;
    fnv_mix(&mut fp, t_next.to_bits());
    fnv_mix(&mut fp, y_prev as u64);
    fnv_mix(&mut fp, event.map(|e| e as u64 + 1).unwrap_or(0));
    Ok(Ensemble {
        particles,
        n0: ensemble.n0,
        t: t_next,
        total_log_offset: ensemble.total_log_offset,
        generation: ensemble.generation + 1,
        obs_fingerprint: fp,
    })
}

/// Residual branching: each particle whose smoothed weight leaves the band
/// `(mean/r, r*mean)` is replaced by `floor(w/mean) + Bernoulli(frac)`
/// copies at the mean weight; in-band particles are kept untouched.
/// Offspring are concatenated in particle-index order, and the conditional
/// expectation of every estimate is preserved.
pub fn resample_residual(ensemble: &Ensemble, config: &mut BranchingConfig) -> Result<Ensemble> {
    let weights: Vec<f64> = ensemble
        .particles
        .iter()
        .map(|p| p.log_weight.exp())
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numerical(
            "particle weights over/underflowed; call rescale_weights between steps".into(),
        ));
    }
    let mean = weights.iter().sum::<f64>() / ensemble.n0 as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateFilter(format!(
            "mean particle weight {mean} at t={}; the model cannot explain the observations",
            ensemble.t
        )));
    }
    let lo = mean / config.r;
    let hi = if config.r.is_infinite() {
        f64::INFINITY
    } else {
        config.r * mean
    };
    let log_mean = mean.ln();

    let mut out = Vec::with_capacity(ensemble.particles.len());
    for (p, &w) in ensemble.particles.iter().zip(&weights) {
        let v = if config.v_halfwidth > 0.0 {
            config
                .rng
                .uniform_range(-config.v_halfwidth, config.v_halfwidth)
        } else {
            0.0
        };
        let smoothed = w + v;
        if smoothed > lo && smoothed < hi {
            out.push(*p);
        } else {
            let ratio = w / mean;
            let mut count = ratio.floor() as usize;
            let frac = ratio.fract();
            if frac > 0.0 && config.rng.uniform() < frac {
                count += 1;
            }
            out.extend(std::iter::repeat_n(
                Particle {
                    state: p.state,
                    log_weight: log_mean,
                },
                count,
            ));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyEnsemble {
            at: ensemble.t,
            weights,
        });
    }
    Ok(Ensemble {
        particles: out,
        n0: ensemble.n0,
        t: ensemble.t,
        total_log_offset: ensemble.total_log_offset,
        generation: ensemble.generation,
        obs_fingerprint: ensemble.obs_fingerprint,
    })
}

fn stabilized_sums<F>(ensemble: &Ensemble, f: F) -> (f64, f64, f64)
where
    F: Fn(usize) -> f64,
{
    let max = ensemble
        .particles
        .iter()
        .map(|p| p.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum_f = 0.0;
    let mut sum_1 = 0.0;
    for p in &ensemble.particles {
        let w = (p.log_weight - max).exp();
        sum_1 += w;
        sum_f += w * f(p.state);
    }
    (max, sum_f, sum_1)
}

/// `S^N(f) = (1/N0) sum_i exp(log A^i) f(X^i)`, computed with log-sum-exp
/// stabilization and the ensemble's common offset applied.
pub fn unnormalized_estimate<F>(ensemble: &Ensemble, f: F) -> Result<f64>
where
    F: Fn(usize) -> f64,
{
    if ensemble.is_empty() {
        return Err(Error::DegenerateFilter("empty ensemble".into()));
    }
    let (max, sum_f, _) = stabilized_sums(ensemble, f);
    Ok((ensemble.total_log_offset + max).exp() * sum_f / ensemble.n0 as f64)
}

/// `log S^N(1)`, exact even when the weight scale would over/underflow a
/// plain sum; this is the quantity Bayes factors are built from.
pub fn log_sigma_one(ensemble: &Ensemble) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::DegenerateFilter("empty ensemble".into()));
    }
    let (max, _, sum_1) = stabilized_sums(ensemble, |_| 1.0);
    if sum_1 <= 0.0 {
        return Err(Error::DegenerateFilter(
            "all particle weights are zero".into(),
        ));
    }
    Ok(ensemble.total_log_offset + max + (sum_1 / ensemble.n0 as f64).ln())
}

/// `S^N(f) / S^N(1)`, the particle filter through Bayes' rule.
pub fn normalized_estimate<F>(ensemble: &Ensemble, f: F) -> Result<f64>
where
    F: Fn(usize) -> f64,
{
    if ensemble.is_empty() {
        return Err(Error::DegenerateFilter("empty ensemble".into()));
    }
    let (_, sum_f, sum_1) = stabilized_sums(ensemble, f);
    if sum_1 <= 0.0 {
        return Err(Error::DegenerateFilter(
            "all particle weights are zero".into(),
        ));
    }
    Ok(sum_f / sum_1)
}

/// Normalized filter over all hidden states.
pub fn filter_distribution(ensemble: &Ensemble, hidden_dim: usize) -> Result<Vec<f64>> {
    (0..hidden_dim)
        .map(|i| normalized_estimate(ensemble, |s| (s == i) as u8 as f64))
        .collect()
}

/// Bayes factor `S^{N,A}(1) / S^{N,B}(1)` between two runs that consumed the
/// identical observation record.
pub fn bayes_factor(run_a: &Ensemble, run_b: &Ensemble) -> Result<f64> {
    if run_a.obs_fingerprint != run_b.obs_fingerprint {
        return Err(Error::Usage(
            "ensembles consumed different observation records; Bayes factors are not comparable"
                .into(),
        ));
    }
    Ok((log_sigma_one(run_a)? - log_sigma_one(run_b)?).exp())
}

/// One output record per observation event (after branching) plus a final
/// record at the horizon.
#[derive(Debug, Clone)]
pub struct ParticleRecord {
    pub t: f64,
    pub particle_count: usize,
    pub log_sigma_one: f64,
    pub pi: Vec<f64>,
}

/// Runs the branching particle filter along a full observation record:
/// evolve to each event, weight, branch, and report; then evolve to the
/// horizon without an event.
pub fn run_particle_filter(
    model: &CmomModel,
    y: &ObsSequence,
    n: usize,
    config: &mut BranchingConfig,
    rng: &RngStream,
) -> Result<(Ensemble, Vec<ParticleRecord>)> {
    let hidden_dim = model.hidden_space().len();
    let mut init_rng = rng.substream(u64::MAX);
    let mut ensemble = init_ensemble(model, n, &mut init_rng)?;
    let mut records = Vec::with_capacity(y.events().len() + 1);
    let mut y_prev = y.initial();
    for &(t_n, sym) in y.events() {
        ensemble = evolve(&ensemble, model, t_n, y_prev, Some(sym), rng)?;
        ensemble = resample_residual(&ensemble, config)?;
        records.push(ParticleRecord {
            t: t_n,
            particle_count: ensemble.len(),
            log_sigma_one: log_sigma_one(&ensemble)?,
            pi: filter_distribution(&ensemble, hidden_dim)?,
        });
        y_prev = sym;
    }
    if ensemble.t < y.horizon() {
        ensemble = evolve(&ensemble, model, y.horizon(), y_prev, None, rng)?;
        records.push(ParticleRecord {
            t: y.horizon(),
            particle_count: ensemble.len(),
            log_sigma_one: log_sigma_one(&ensemble)?,
            pi: filter_distribution(&ensemble, hidden_dim)?,
        });
    } else if records.is_empty() {
        // No events at all: still report the prior state at the horizon.
        records.push(ParticleRecord {
            t: y.horizon(),
            particle_count: ensemble.len(),
            log_sigma_one: log_sigma_one(&ensemble)?,
            pi: filter_distribution(&ensemble, hidden_dim)?,
        });
    }
    Ok((ensemble, records))
}
