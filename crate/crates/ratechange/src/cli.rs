//! Command-line front end: model file I/O, experiment drivers and result
//! emission for the library's capabilities.
//!
//! Subcommands: `validate`, `simulate`, `reject-sample`, `weight`, `filter`,
//! `compare`. Every command is a pure function of its arguments and input
//! files: the seed is mandatory, all randomness flows through documented
//! [`RngStream`] derivations, reductions are order-fixed, and float output
//! uses a fixed format, so identical invocations produce byte-identical
//! output regardless of the thread count.
//!
//! Exit codes: 0 success, 2 model validation failure, 3 sampling budget
//! exhausted, 4 degenerate filter/ensemble, 5 mismatched observation spaces
//! or references, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::chain::{self, ChainPath, RateMatrix, StateSpace, TargetRateFamily};
use crate::direct::{self, DirectConfig};
use crate::error::{Error, Result};
use crate::model::{
    cthmm_to_cmom, joint_log_weight, simulate_joint_reference, simulate_joint_target, CmomModel,
    CthmmModel, HiddenDynamics, ObsSequence, ObservationModel,
};
use crate::particle::{self, BranchingConfig};
use crate::sampler::{self, RngStream};

// ---------------------------------------------------------------------------
// Model file schema.
// ---------------------------------------------------------------------------

/// Reference rates: a full matrix for Markov-chain observations, or the
/// scalar canonical update rate of a CTHMM (paired with `q_bar`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaBar {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

/// Piecewise-constant-in-time target rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaTime {
    pub breakpoints: Vec<f64>,
    pub matrices: Vec<Vec<Vec<f64>>>,
}

/// Versioned model document. Unknown fields are rejected: a typo in a rate
/// name must fail loudly rather than silently reconfigure an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub obs_states: Vec<String>,
    pub gamma_bar: GammaBar,
    /// CTHMM canonical emission probabilities (with scalar `gamma_bar`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bar: Option<Vec<f64>>,
    /// Constant target rates (no hidden state).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_const: Option<Vec<Vec<f64>>>,
    /// Piecewise-constant-in-time target rates (no hidden state).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_time: Option<GammaTime>,
    /// Hidden-state-dependent target rates: one matrix per hidden state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<Vec<f64>>>>,
    /// CTHMM update rates per hidden state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_x: Option<Vec<f64>>,
    /// CTHMM emission rows per hidden state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_states: Option<Vec<String>>,
    /// Hidden-chain generator rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Vec<f64>>>,
    /// Initial hidden distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    pub init_obs: Vec<f64>,
    /// Declared bound for condition (C2); computed from the rates when
    /// omitted and the rates are enumerable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_bound: Option<f64>,
}

/// A plain (no hidden state) rate-change setup.
#[derive(Debug, Clone)]
pub struct PlainModel {
    pub obs_space: StateSpace,
    pub reference: RateMatrix,
    pub target: TargetRateFamily,
    pub init_obs: Vec<f64>,
}

/// What a model file describes.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Plain(PlainModel),
    Joint(CmomModel),
}

impl LoadedModel {
    pub fn obs_space(&self) -> &StateSpace {
        match self {
            LoadedModel::Plain(p) => &p.obs_space,
            LoadedModel::Joint(m) => m.obs_space(),
        }
    }

    fn joint(&self) -> Result<&CmomModel> {
        match self {
            LoadedModel::Joint(m) => Ok(m),
            LoadedModel::Plain(_) => Err(Error::Usage(
                "this command needs a hidden-state model (fields `hidden_states`, `lambda`, `mu`)"
                    .into(),
            )),
        }
    }

    /// Runs the structural condition checks appropriate to the model kind.
    pub fn validation_report(&self) -> chain::ValidationReport {
        match self {
            LoadedModel::Plain(p) => chain::validate(&p.reference, &p.target),
            LoadedModel::Joint(m) => m.validate(),
        }
    }
}

fn rate_matrix(rows: &[Vec<f64>], what: &str) -> Result<RateMatrix> {
    RateMatrix::new(rows.to_vec()).map_err(|e| Error::Format(format!("{what}: {e}")))
}

/// Interprets a parsed model file.
pub fn interpret_model(file: &ModelFile) -> Result<LoadedModel> {
    if file.schema_version != 1 {
        return Err(Error::Format(format!(
            "unsupported schema_version {} (expected 1)",
            file.schema_version
        )));
    }
    let obs_space = StateSpace::new(file.obs_states.clone())?;
    let o = obs_space.len();

    let hidden = match (&file.hidden_states, &file.lambda, &file.mu) {
        (Some(states), Some(lambda), Some(mu)) => {
            let space = StateSpace::new(states.clone())?;
            let generator = rate_matrix(lambda, "lambda")?;
            Some((space, generator, mu.clone()))
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::Format(
                "hidden models need all of `hidden_states`, `lambda`, `mu`".into(),
            ))
        }
    };

    match (&file.gamma_bar, &file.gamma, &file.gamma_x) {
        // CTHMM: scalar reference update + emissions.
        (GammaBar::Scalar(gbar), None, Some(gamma_x)) => {
            let q_bar = file
                .q_bar
                .clone()
                .ok_or_else(|| Error::Format("CTHMM models need `q_bar`".into()))?;
            let q_x = file
                .q_x
                .clone()
                .ok_or_else(|| Error::Format("CTHMM models need `q_x`".into()))?;
            let (space, generator, mu) = hidden
                .ok_or_else(|| Error::Format("CTHMM models need a hidden chain".into()))?;
            let model = cthmm_to_cmom(&CthmmModel {
                hidden_space: space,
                hidden: HiddenDynamics::Chain(generator),
                obs_space,
                update_rate: gamma_x.clone(),
                emission: q_x,
                reference_update: *gbar,
                reference_emission: q_bar,
                init_hidden: mu,
                init_obs: file.init_obs.clone(),
            })?;
            Ok(LoadedModel::Joint(model))
        }
        // CMOM: matrix reference + per-hidden-state matrices.
        (GammaBar::Matrix(gbar), Some(gamma), None) => {
            let reference = rate_matrix(gbar, "gamma_bar")?;
            let (space, generator, mu) = hidden
                .ok_or_else(|| Error::Format("state-dependent `gamma` needs a hidden chain".into()))?;
            let per_hidden: Vec<RateMatrix> = gamma
                .iter()
                .enumerate()
                .map(|(x, rows)| rate_matrix(rows, &format!("gamma[{x}]")))
                .collect::<Result<_>>()?;
            let ratio_bound = match file.ratio_bound {
                Some(b) => b,
                None => {
                    let fam = TargetRateFamily::state_dependent(per_hidden.clone(), 1.0)?;
                    fam.observed_ratio_sup(&reference)
                }
            };
            let rates = TargetRateFamily::state_dependent(per_hidden, ratio_bound)?;
            let model = CmomModel::new(
                space,
                HiddenDynamics::Chain(generator),
                obs_space,
                ObservationModel::Cmom { reference, rates },
                mu,
                file.init_obs.clone(),
            )?;
            Ok(LoadedModel::Joint(model))
        }
        // Plain rate change: matrix reference + constant or time-dependent target.
        (GammaBar::Matrix(gbar), None, None) => {
            let reference = rate_matrix(gbar, "gamma_bar")?;
            let target = match (&file.gamma_const, &file.gamma_time) {
                (Some(rows), None) => {
                    let m = rate_matrix(rows, "gamma_const")?;
                    let bound = file.ratio_bound.unwrap_or_else(|| {
                        TargetRateFamily::constant(m.clone(), 1.0).observed_ratio_sup(&reference)
                    });
                    TargetRateFamily::constant(m, bound)
                }
                (None, Some(gt)) => {
                    let matrices: Vec<RateMatrix> = gt
                        .matrices
                        .iter()
                        .enumerate()
                        .map(|(k, rows)| rate_matrix(rows, &format!("gamma_time[{k}]")))
                        .collect::<Result<_>>()?;
                    let bound = match file.ratio_bound {
                        Some(b) => b,
                        None => TargetRateFamily::piecewise_time(
                            gt.breakpoints.clone(),
                            matrices.clone(),
                            1.0,
                        )?
                        .observed_ratio_sup(&reference),
                    };
                    TargetRateFamily::piecewise_time(gt.breakpoints.clone(), matrices, bound)?
                }
                (None, None) => {
                    return Err(Error::Format(
                        "model has no target rates (`gamma_const`, `gamma_time`, `gamma`, or `gamma_x`)"
                            .into(),
                    ))
                }
                _ => {
                    return Err(Error::Format(
                        "give exactly one of `gamma_const` and `gamma_time`".into(),
                    ))
                }
            };
            if file.init_obs.len() != o {
                return Err(Error::Format("init_obs length mismatch".into()));
            }
            Ok(LoadedModel::Plain(PlainModel {
                obs_space,
                reference,
                target,
                init_obs: file.init_obs.clone(),
            }))
        }
        _ => Err(Error::Format(
            "unrecognized combination of rate fields; use gamma_bar matrix with gamma_const/gamma_time/gamma, or scalar gamma_bar with q_bar/gamma_x/q_x"
                .into(),
        )),
    }
}

/// Loads and interprets a model file, returning the raw bytes' hash too.
pub fn load_model(path: &Path) -> Result<(LoadedModel, String)> {
    let bytes = fs::read(path)?;
    let file: ModelFile = serde_json::from_slice(&bytes)?;
    let model = interpret_model(&file)?;
    Ok((model, fnv_hex(&bytes)))
}

fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn fmt_float(v: f64) -> String {
    format!("{v:.12e}")
}

// ---------------------------------------------------------------------------
// Argument structure.
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "ratechange",
    about = "Simulate, reweight, rejection-sample and filter continuous-time Markov chains",
    version
)]
pub struct Cli {
    /// Worker thread cap (output is identical for any value).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimulateLaw {
    /// Constant-rate reference chain.
    Reference,
    /// Target chain via whole-horizon rejection sampling.
    TargetRejection,
    /// Hidden signal and independent reference observations.
    JointReference,
    /// Hidden signal and observations with state-dependent rates.
    JointTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Particle,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

fn parse_attempts(s: &str) -> std::result::Result<u64, String> {
    // Accept scientific notation like 1e6.
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("bad attempt count {s:?}"))?;
    if !f.is_finite() || !(1.0..=1e18).contains(&f) {
        return Err(format!("attempt count {s:?} out of range"));
    }
    Ok(f as u64)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub law: SimulateLaw,
    /// Time horizon.
    #[arg(long = "T")]
    pub horizon: f64,
    #[arg(long)]
    pub seed: u64,
    /// Number of independent paths.
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
    /// Certified weight bound for rejection sampling.
    #[arg(long = "C")]
    pub bound_c: Option<f64>,
    #[arg(long, value_parser = parse_attempts, default_value = "1000000")]
    pub max_attempts: u64,
    /// Output CSV path (joint laws add `_hidden` / `_obs` suffixes).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RejectSampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "T")]
    pub horizon: f64,
    #[arg(long)]
    pub seed: u64,
    /// Certified whole-horizon bound; omit when using --segment-jumps.
    #[arg(long = "C")]
    pub bound_c: Option<f64>,
    /// Rejection block length in jumps (segmented mode).
    #[arg(long)]
    pub segment_jumps: Option<usize>,
    #[arg(long, value_parser = parse_attempts, default_value = "1000000")]
    pub max_attempts: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observation path CSV.
    #[arg(long)]
    pub path: PathBuf,
    /// Hidden path CSV (hidden-state-dependent models).
    #[arg(long)]
    pub hidden: Option<PathBuf>,
    /// Evaluation time; defaults to the last event time.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observation CSV.
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, value_enum)]
    pub engine: Engine,
    /// Horizon; defaults to the last observation event.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Particle count (particle engine).
    #[arg(long = "N", default_value_t = 10_000)]
    pub particles: usize,
    /// Branching band parameter r > 1; `inf` disables branching.
    #[arg(long, default_value_t = 1.5)]
    pub r: f64,
    /// Smoothing uniform half-width.
    #[arg(long, default_value_t = 0.1)]
    pub v_halfwidth: f64,
    /// Trotter step hint (direct engine).
    #[arg(long = "h", default_value_t = 1e-2)]
    pub step: f64,
    /// Emit extra records every this many time units (direct engine).
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Two or more model files sharing observation space and reference rates.
    #[arg(long, num_args = 2.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, value_enum, default_value_t = Engine::Direct)]
    pub engine: Engine,
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long = "N", default_value_t = 10_000)]
    pub particles: usize,
    #[arg(long, default_value_t = 1.5)]
    pub r: f64,
    #[arg(long, default_value_t = 0.1)]
    pub v_halfwidth: f64,
    #[arg(long = "h", default_value_t = 1e-2)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model file against the structural conditions.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Simulate chains under the reference or target law.
    Simulate(SimulateArgs),
    /// Draw a target-law path by acceptance-rejection.
    RejectSample(RejectSampleArgs),
    /// Evaluate the likelihood weight of a stored path.
    Weight(WeightArgs),
    /// Run the particle or direct filter along stored observations.
    Filter(FilterArgs),
    /// Bayes-factor comparison of models on shared observations.
    Compare(CompareArgs),
}

// ---------------------------------------------------------------------------
// Command implementations.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    seed: u64,
    model_hash: &'a str,
    law: Option<&'a str>,
    horizon: f64,
    paths: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    attempts: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound_c: Option<f64>,
    outputs: Vec<String>,
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    let mut path = out.as_os_str().to_owned();
    path.push(".manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(PathBuf::from(path), text)?;
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

fn require_valid(model: &LoadedModel) -> Result<()> {
    model.validation_report().into_result()
}

fn law_name(law: SimulateLaw) -> &'static str {
    match law {
        SimulateLaw::Reference => "reference",
        SimulateLaw::TargetRejection => "target-rejection",
        SimulateLaw::JointReference => "joint-reference",
        SimulateLaw::JointTarget => "joint-target",
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (model, hash) = load_model(&args.model)?;
    require_valid(&model)?;
    let base_rng = RngStream::new(args.seed, 0);
    let mut outputs = Vec::new();
    let mut attempts_log = Vec::new();

    match args.law {
        SimulateLaw::Reference | SimulateLaw::TargetRejection => {
            let plain = match &model {
                LoadedModel::Plain(p) => p.clone(),
                LoadedModel::Joint(_) => {
                    return Err(Error::Usage(
                        "reference/target-rejection laws need a plain observation model".into(),
                    ))
                }
            };
            for k in 0..args.paths {
                let mut rng = base_rng.substream(k as u64);
                let path = match args.law {
                    SimulateLaw::Reference => sampler::simulate_reference_chain(
                        &plain.reference,
                        &plain.init_obs,
                        args.horizon,
                        &mut rng,
                    )?,
                    _ => {
                        let bound = args.bound_c.ok_or_else(|| {
                            Error::Usage("target-rejection needs --C (certified bound)".into())
                        })?;
                        let (path, attempts) = sampler::rejection_sample(
                            &plain.reference,
                            &plain.target,
                            bound,
                            &plain.init_obs,
                            args.horizon,
                            &mut rng,
                            args.max_attempts,
                        )?;
                        attempts_log.push(attempts);
                        path
                    }
                };
                let out = if args.paths == 1 {
                    args.out.clone()
                } else {
                    suffixed(&args.out, &format!("_{k}"))
                };
                fs::write(&out, path.to_csv(&plain.obs_space))?;
                outputs.push(out.display().to_string());
            }
        }
        SimulateLaw::JointReference | SimulateLaw::JointTarget => {
            let joint = model.joint()?;
            for k in 0..args.paths {
                let mut rng = base_rng.substream(k as u64);
                let (x, y) = match args.law {
                    SimulateLaw::JointReference => {
                        simulate_joint_reference(joint, args.horizon, &mut rng)?
                    }
                    _ => simulate_joint_target(joint, args.horizon, &mut rng)?,
                };
                let tag = if args.paths == 1 {
                    String::new()
                } else {
                    format!("_{k}")
                };
                let hidden_out = suffixed(&args.out, &format!("{tag}_hidden"));
                let obs_out = suffixed(&args.out, &format!("{tag}_obs"));
                fs::write(&hidden_out, x.to_csv(joint.hidden_space()))?;
                fs::write(&obs_out, y.to_csv(joint.obs_space()))?;
                outputs.push(hidden_out.display().to_string());
                outputs.push(obs_out.display().to_string());
            }
        }
    }

    write_manifest(
        &args.out,
        &Manifest {
            schema_version: 1,
            command: "simulate",
            seed: args.seed,
            model_hash: &hash,
            law: Some(law_name(args.law)),
            horizon: args.horizon,
            paths: args.paths,
            attempts: (!attempts_log.is_empty()).then_some(attempts_log),
            bound_c: args.bound_c,
            outputs,
        },
    )
}

fn cmd_reject_sample(args: &RejectSampleArgs) -> Result<()> {
    let (model, hash) = load_model(&args.model)?;
    require_valid(&model)?;
    let plain = match &model {
        LoadedModel::Plain(p) => p.clone(),
        LoadedModel::Joint(_) => {
            return Err(Error::Usage(
                "rejection sampling applies to plain observation models".into(),
            ))
        }
    };
    let mut rng = RngStream::new(args.seed, 0);
    let (path, attempts, bound) = match (args.bound_c, args.segment_jumps) {
        (Some(c), None) => {
            let (path, attempts) = sampler::rejection_sample(
                &plain.reference,
                &plain.target,
                c,
                &plain.init_obs,
                args.horizon,
                &mut rng,
                args.max_attempts,
            )?;
            (path, vec![attempts], c)
        }
        (None, Some(n)) => {
            let out = sampler::segmented_rejection_sample(
                &plain.reference,
                &plain.target,
                n,
                args.horizon,
                &plain.init_obs,
                &mut rng,
                args.max_attempts,
            )?;
            (out.path, out.block_attempts, out.bound_c)
        }
        _ => {
            return Err(Error::Usage(
                "give exactly one of --C (whole-horizon) or --segment-jumps (segmented)".into(),
            ))
        }
    };
    fs::write(&args.out, path.to_csv(&plain.obs_space))?;
    write_manifest(
        &args.out,
        &Manifest {
            schema_version: 1,
            command: "reject-sample",
            seed: args.seed,
            model_hash: &hash,
            law: Some("target-rejection"),
            horizon: args.horizon,
            paths: 1,
            attempts: Some(attempts),
            bound_c: Some(bound),
            outputs: vec![args.out.display().to_string()],
        },
    )
}

fn cmd_weight(args: &WeightArgs) -> Result<()> {
    let (model, _) = load_model(&args.model)?;
    require_valid(&model)?;
    let lw = match &model {
        LoadedModel::Plain(plain) => {
            let text = fs::read_to_string(&args.path)?;
            let path = ChainPath::from_csv(&text, &plain.obs_space, args.horizon)?;
            sampler::log_weight(
                &path,
                &plain.target,
                &plain.reference,
                chain::PathDriver::Time,
            )?
        }
        LoadedModel::Joint(joint) => {
            let hidden_path = args.hidden.as_ref().ok_or_else(|| {
                Error::Usage("hidden-state models need --hidden (the signal path CSV)".into())
            })?;
            let y_text = fs::read_to_string(&args.path)?;
            let x_text = fs::read_to_string(hidden_path)?;
            let y = ObsSequence::from_csv(&y_text, joint.obs_space(), args.horizon)?;
            let x = ChainPath::from_csv(&x_text, joint.hidden_space(), Some(y.horizon()))?;
            joint_log_weight(&x, &y, joint, y.horizon())?
        }
    };
    let mut text = String::from("t,log_a,a\n");
    text.push_str(&format!(
        "{},{},{}\n",
        fmt_float(lw.t),
        fmt_float(lw.log_a),
        fmt_float(lw.weight())
    ));
    fs::write(&args.out, text)?;
    Ok(())
}

/// Direct-engine trajectories: `t,event,sigma_1..sigma_m,log_sigma_total,pi_1..pi_m`.
fn direct_records_csv(hidden_dim: usize, records: &[FilterOutRecord]) -> String {
    let mut out = String::from("t,event");
    for i in 1..=hidden_dim {
        out.push_str(&format!(",sigma_{i}"));
    }
    out.push_str(",log_sigma_total");
    for i in 1..=hidden_dim {
        out.push_str(&format!(",pi_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", fmt_float(r.t), r.event));
        for v in &r.sigma {
            out.push_str(&format!(",{}", fmt_float(*v)));
        }
        out.push_str(&format!(",{}", fmt_float(r.log_sigma_total)));
        for v in &r.pi {
            out.push_str(&format!(",{}", fmt_float(*v)));
        }
        out.push('\n');
    }
    out
}

/// Particle-engine records: `t,particle_count,sigma_total,log_sigma_total,pi_1..pi_m`.
fn particle_records_csv(hidden_dim: usize, records: &[FilterOutRecord]) -> String {
    let mut out = String::from("t,particle_count,sigma_total,log_sigma_total");
    for i in 1..=hidden_dim {
        out.push_str(&format!(",pi_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            fmt_float(r.t),
            r.particle_count.unwrap_or(0),
            fmt_float(r.log_sigma_total.exp()),
            fmt_float(r.log_sigma_total)
        ));
        for v in &r.pi {
            out.push_str(&format!(",{}", fmt_float(*v)));
        }
        out.push('\n');
    }
    out
}

fn filter_records_jsonl(records: &[FilterOutRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Engine-independent trajectory record emitted by `filter`.
#[derive(Debug, Serialize)]
struct FilterOutRecord {
    t: f64,
    event: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    particle_count: Option<usize>,
    log_sigma_total: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sigma: Vec<f64>,
    pi: Vec<f64>,
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let (model, _) = load_model(&args.model)?;
    require_valid(&model)?;
    let joint = model.joint()?;
    let y_text = fs::read_to_string(&args.obs)?;
    let y = ObsSequence::from_csv(&y_text, joint.obs_space(), args.horizon)?;
    let hidden_dim = joint.hidden_space().len();

    let records: Vec<FilterOutRecord> = match args.engine {
        Engine::Direct => {
            let grid: Vec<f64> = match args.grid_step {
                Some(dt) if dt > 0.0 => {
                    let mut g = Vec::new();
                    let mut k = 1u64;
                    loop {
                        let t = k as f64 * dt;
                        if t >= y.horizon() {
                            break;
                        }
                        g.push(t);
                        k += 1;
                    }
                    g
                }
                Some(bad) => {
                    return Err(Error::Usage(format!(
                        "--grid-step must be positive, got {bad}"
                    )))
                }
                None => Vec::new(),
            };
            let config = DirectConfig {
                step_hint: args.step,
                transition: direct::TransitionSource::Generator,
            };
            let run = direct::run_direct_filter(joint, &y, &grid, &config)?;
            run.records
                .iter()
                .map(|r| FilterOutRecord {
                    t: r.t,
                    event: match r.event {
                        direct::RecordEvent::Jump => "jump",
                        direct::RecordEvent::Grid => "grid",
                    },
                    particle_count: None,
                    log_sigma_total: r.log_sigma_one,
                    sigma: r.sigma.clone(),
                    pi: r.pi.clone(),
                })
                .collect()
        }
        Engine::Particle => {
            let mut config =
                BranchingConfig::new(args.r, args.v_halfwidth, RngStream::new(args.seed, 1))?;
            let (_, records) = particle::run_particle_filter(
                joint,
                &y,
                args.particles,
                &mut config,
                &RngStream::new(args.seed, 0),
            )?;
            records
                .iter()
                .map(|r| FilterOutRecord {
                    t: r.t,
                    event: if y.events().iter().any(|&(t_n, _)| t_n == r.t) {
                        "jump"
                    } else {
                        "grid"
                    },
                    particle_count: Some(r.particle_count),
                    log_sigma_total: r.log_sigma_one,
                    sigma: Vec::new(),
                    pi: r.pi.clone(),
                })
                .collect()
        }
    };

    let text = match args.format {
        OutputFormat::Csv => match args.engine {
            Engine::Direct => direct_records_csv(hidden_dim, &records),
            Engine::Particle => particle_records_csv(hidden_dim, &records),
        },
        OutputFormat::Jsonl => filter_records_jsonl(&records)?,
    };
    fs::write(&args.out, text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareOutput {
    models: Vec<String>,
    log_sigma_one: Vec<f64>,
    bayes: Vec<Vec<f64>>,
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut models = Vec::new();
    for path in &args.models {
        let (m, _) = load_model(path)?;
        require_valid(&m)?;
        match m {
            LoadedModel::Joint(j) => models.push(j),
            LoadedModel::Plain(_) => {
                return Err(Error::Usage(
                    "compare needs hidden-state models (Bayes factors rate hidden structure)"
                        .into(),
                ))
            }
        }
    }
    let first = &models[0];
    let y_text = fs::read_to_string(&args.obs)?;
    let y = ObsSequence::from_csv(&y_text, first.obs_space(), args.horizon)?;

    let log_sigma_one: Vec<f64> = match args.engine {
        Engine::Direct => {
            let refs: Vec<&CmomModel> = models.iter().collect();
            let config = DirectConfig {
                step_hint: args.step,
                transition: direct::TransitionSource::Generator,
            };
            direct::compare_models(&refs, &y, &config)?.log_sigma_one
        }
        Engine::Particle => {
            let fp = first.reference_fingerprint();
            for (k, m) in models.iter().enumerate().skip(1) {
                if m.reference_fingerprint() != fp {
                    return Err(Error::Mismatch(format!(
                        "model {k} does not share the observation space and reference rates of model 0"
                    )));
                }
            }
            models
                .iter()
                .map(|m| {
                    let mut config = BranchingConfig::new(
                        args.r,
                        args.v_halfwidth,
                        RngStream::new(args.seed, 1),
                    )?;
                    let (ensemble, _) = particle::run_particle_filter(
                        m,
                        &y,
                        args.particles,
                        &mut config,
                        &RngStream::new(args.seed, 0),
                    )?;
                    particle::log_sigma_one(&ensemble)
                })
                .collect::<Result<_>>()?
        }
    };
    let bayes: Vec<Vec<f64>> = log_sigma_one
        .iter()
        .map(|&a| log_sigma_one.iter().map(|&b| (a - b).exp()).collect())
        .collect();
    let output = CompareOutput {
        models: args
            .models
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        log_sigma_one,
        bayes,
    };
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    fs::write(&args.out, text)?;
    Ok(())
}

fn cmd_validate(model_path: &Path) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let report = model.validation_report();
    if report.ok() {
        println!("ok");
        Ok(())
    } else {
        for (cond, detail) in report.violations() {
            println!("[{cond}] {detail}");
        }
        Err(Error::Validation(report))
    }
}

/// Maps an error to the documented process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) => 2,
        Error::Budget { .. } => 3,
        Error::DegenerateFilter(_) | Error::EmptyEnsemble { .. } => 4,
        Error::Mismatch(_) => 5,
        _ => 1,
    }
}

/// Runs a parsed command; `main` turns the error into an exit code.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Ignore failures: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Validate { model } => cmd_validate(model),
        Command::Simulate(args) => cmd_simulate(args),
        Command::RejectSample(args) => cmd_reject_sample(args),
        Command::Weight(args) => cmd_weight(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Compare(args) => cmd_compare(args),
    }
}
