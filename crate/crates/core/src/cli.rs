//! Experiment runner behind the `grpo-dynamics` binary.
//!
//! Every subcommand builds its full output in memory, then writes it to a
//! temporary file next to the target and renames it into place, so a failed
//! run never leaves a partial file behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calibration::{Normalization, WeightScheme, DEFAULT_EPSILON};
use crate::dynamics::{
    beta_lower_bound_curve, find_fixed_points, iterate, pos_map, Anchor,
    FixedPointReport, PoSTrajectory, Termination, VariantSpec, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::oracle::{self, ObjectiveSpec};
use crate::par::{with_jobs, Execution};
use crate::policy_update;
use crate::trainer::{self, DriftCheck, FaultInjection, InnerOptimizer, TrainConfig, TrainRecord};
use crate::verify::{self, Suite, VerifyConfig, VerifyReport};
use crate::world::{random, success_mass, ConditionalPolicy, FiniteWorld};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_BETAS: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0];
pub const DEFAULT_PREFS: [f64; 7] = [0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9];

const FIXED_POINT_GRID: usize = 1024;

#[derive(Debug, Parser)]
#[command(name = "grpo-dynamics", version, about = "PoS dynamics of GRPO with verifiable rewards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Iterate the scalar PoS map on every (β, p_ref, ε) cell.
    Trajectory(TrajectoryArgs),
    /// Locate fixed points and their stability on every grid cell.
    FixedPoints(FixedPointArgs),
    /// Policy-level iterations on a world file, logged per step and prompt.
    PolicyEvolve(EvolveArgs),
    /// Tabular softmax training loop with drift diagnostics.
    Train(TrainArgs),
    /// Run the verification suites and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Ref,
    Mirror,
    Twokl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Meanvar,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Natural,
    Gradient,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, value_enum, default_value = "ref")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "meanvar")]
    pub norm: NormArg,
    /// Two-KL weight on the reference anchor, in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = DEFAULT_BETAS.to_vec())]
    pub beta: Vec<f64>,
    #[arg(long = "pref", value_delimiter = ',', num_args = 1.., default_values_t = DEFAULT_PREFS.to_vec())]
    pub pref: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = vec![DEFAULT_EPSILON])]
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Maximum number of steps per trajectory.
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args)]
pub struct FixedPointArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Also write the curve `(p, B(p))` for the first ε to this file.
    #[arg(long)]
    pub bound_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    /// World JSON; prompt `policy` rows, when present, give π_ref.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Random world size when no file is given: prompts.
    #[arg(long, default_value_t = 3)]
    pub prompts: usize,
    /// Largest outcome count of a random world.
    #[arg(long, default_value_t = 8)]
    pub outcomes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Tolerance of the `--check` comparisons.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Cross-check every step against the scalar map and the numerical maximizer.
    #[arg(long)]
    pub check: bool,
    /// World file whose policy rows give the starting iterate; π_ref otherwise.
    #[arg(long, requires = "world")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    /// Outer iterations M.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Inner optimizer steps μ per outer iteration.
    #[arg(long, default_value_t = 200)]
    pub inner: usize,
    #[arg(long, value_enum, default_value = "natural")]
    pub optimizer: OptimizerArg,
    /// Defaults to `1/(2β)` for natural steps and `2/β` for plain gradient.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Estimate PoS from groups of this many rollouts instead of exactly.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Slack added to the final drift bound.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Largest TV increment allowed per outer iteration.
    #[arg(long)]
    pub delta_budget: Option<f64>,
    /// Outer iteration after which mass is moved off the trained policy.
    #[arg(long, requires = "fault_tv")]
    pub fault_step: Option<usize>,
    /// Total variation of the injected perturbation.
    #[arg(long, requires = "fault_step")]
    pub fault_tv: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Smaller suite sizes.
    #[arg(long)]
    pub quick: bool,
    /// Suites to run; all by default.
    #[arg(long, value_delimiter = ',')]
    pub suite: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(outcome) => {
            if let Some(msg) = &outcome.message {
                eprintln!("{msg}");
            }
            if outcome.passed {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub message: Option<String>,
}

impl Outcome {
    fn ok() -> Self {
        Outcome {
            passed: true,
            message: None,
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Trajectory(a) => cmd_trajectory(&a),
        Command::FixedPoints(a) => cmd_fixed_points(&a),
        Command::PolicyEvolve(a) => cmd_policy_evolve(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Verify(a) => cmd_verify(&a),
    }
}

fn scheme(norm: NormArg, eps: f64) -> Result<WeightScheme> {
    match norm {
        NormArg::Meanvar => WeightScheme::new(Normalization::MeanVar, eps),
        NormArg::Mean => Ok(WeightScheme::mean_only()),
    }
}

fn variant(c: &Common, eps: f64, beta: f64) -> Result<VariantSpec> {
    let anchor = match c.variant {
        VariantArg::Ref => Anchor::Reference,
        VariantArg::Mirror => Anchor::Mirror,
        VariantArg::Twokl => {
            if !(c.alpha > 0.0 && c.alpha < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "two-KL needs alpha in (0, 1), got {}",
                    c.alpha
                )));
            }
            Anchor::TwoKl { alpha: c.alpha }
        }
    };
    VariantSpec::new(anchor, scheme(c.norm, eps)?, beta)
}

fn check_grid(name: &str, values: &[f64], ok: impl Fn(f64) -> bool, rule: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} grid is empty")));
    }
    if let Some(v) = values.iter().find(|&&v| !ok(v)) {
        return Err(Error::InvalidParameter(format!("{name} = {v}: {rule}")));
    }
    Ok(())
}

/// Every (β, p_ref, ε) cell, validated.
fn cells(c: &Common, g: &GridArgs) -> Result<Vec<(VariantSpec, f64)>> {
    check_grid("beta", &g.beta, |b| b > 0.0 && b.is_finite(), "must be positive and finite")?;
    check_grid("pref", &g.pref, |p| (0.0..=1.0).contains(&p), "must lie in [0, 1]")?;
    check_grid("eps", &g.eps, |e| e > 0.0 && e <= 1.0, "must lie in (0, 1]")?;
    // Mean-only weights ignore ε; one pass is enough.
    let eps: &[f64] = if c.norm == NormArg::Mean { &g.eps[..1] } else { &g.eps };
    let mut out = Vec::new();
    for &e in eps {
        for &b in &g.beta {
            let v = variant(c, e, b)?;
            for &p in &g.pref {
                out.push((v, p));
            }
        }
    }
    Ok(out)
}

fn exec(jobs: Option<usize>) -> Result<Execution> {
    match jobs {
        Some(0) => Err(Error::InvalidParameter("--jobs must be at least 1".into())),
        Some(1) => Ok(Execution::Sequential),
        _ => Ok(Execution::Parallel),
    }
}

/// Writes `text` to `path` atomically, or to stdout.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::InvalidParameter(format!("writing stdout: {e}")))
        }
        Some(path) => write_atomic(path, text),
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidParameter(format!("{}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = std::fs::write(&tmp, text).and_then(|_| std::fs::rename(&tmp, path));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidParameter(format!("serializing output: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn termination_label(t: &Termination) -> &'static str {
    match t {
        Termination::MaxIters => "max-iters",
        Termination::Converged { .. } => "converged",
        Termination::AbsorbedAtBoundary => "absorbed",
        Termination::PeriodTwo { .. } => "period-two",
    }
}

#[derive(Debug, Serialize)]
struct TrajectoryCell<'a> {
    beta: f64,
    p_ref: f64,
    epsilon: f64,
    variant: String,
    terminated_by: &'a Termination,
    values: &'a [f64],
    logits: &'a [f64],
}

pub fn cmd_trajectory(a: &TrajectoryArgs) -> Result<Outcome> {
    if !(a.tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be non-negative, got {}", a.tol)));
    }
    let cells = cells(&a.common, &a.grid)?;
    let ex = exec(a.common.jobs)?;
    let runs: Vec<PoSTrajectory> = with_jobs(a.common.jobs, || {
        ex.map(&cells, |(v, p)| iterate(v, *p, a.steps, a.tol))
            .into_iter()
            .collect::<Result<_>>()
    })?;
    let text = match a.common.format {
        Format::Csv => {
            let mut s = String::from("beta,p_ref,epsilon,variant,step,p,logit,terminated_by\n");
            for ((v, p), t) in cells.iter().zip(&runs) {
                for (n, (x, l)) in t.values.iter().zip(&t.logits).enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{}",
                        v.beta(),
                        p,
                        v.epsilon(),
                        v.label(),
                        n,
                        x,
                        l,
                        termination_label(&t.terminated_by)
                    );
                }
            }
            s
        }
        Format::Json => json(
            &cells
                .iter()
                .zip(&runs)
                .map(|((v, p), t)| TrajectoryCell {
                    beta: v.beta(),
                    p_ref: *p,
                    epsilon: v.epsilon(),
                    variant: v.label(),
                    terminated_by: &t.terminated_by,
                    values: &t.values,
                    logits: &t.logits,
                })
                .collect::<Vec<_>>(),
        )?,
    };
    emit(a.common.out.as_deref(), &text)?;
    let stalled = runs
        .iter()
        .filter(|t| matches!(t.terminated_by, Termination::MaxIters | Termination::PeriodTwo { .. }))
        .count();
    Ok(Outcome {
        passed: true,
        message: (stalled > 0).then(|| format!("{stalled} of {} trajectories did not converge", runs.len())),
    })
}

pub fn cmd_fixed_points(a: &FixedPointArgs) -> Result<Outcome> {
    let cells = cells(&a.common, &a.grid)?;
    let ex = exec(a.common.jobs)?;
    let reports: Vec<FixedPointReport> = with_jobs(a.common.jobs, || {
        ex.map(&cells, |(v, p)| find_fixed_points(v, *p, FIXED_POINT_GRID))
            .into_iter()
            .collect::<Result<_>>()
    })?;
    let curve = a.bound_curve.as_ref().map(|_| {
        let mut s = String::from("p,b_threshold\n");
        for (p, b) in beta_lower_bound_curve(a.grid.eps[0], 1000) {
            let _ = writeln!(s, "{p},{b}");
        }
        s
    });
    let text = match a.common.format {
        Format::Csv => {
            let mut s = String::from(
                "beta,p_ref,epsilon,variant,p_star,h_prime,stable,b_threshold,amplification,kind\n",
            );
            for r in &reports {
                for f in &r.fixed_points {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{},{}",
                        r.beta,
                        r.p_ref,
                        r.epsilon,
                        r.variant,
                        f.p_star,
                        f.derivative,
                        f.locally_stable,
                        f.beta_threshold,
                        f.amplifies,
                        serde_json::to_value(f.kind)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string))
                            .unwrap_or_default()
                    );
                }
            }
            s
        }
        Format::Json => json(&reports)?,
    };
    emit(a.common.out.as_deref(), &text)?;
    if let (Some(path), Some(curve)) = (&a.bound_curve, curve) {
        write_atomic(path, &curve)?;
    }
    Ok(Outcome::ok())
}

fn read_world(path: &Path) -> Result<(FiniteWorld, Option<ConditionalPolicy>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    FiniteWorld::from_json(&text)
}

fn load_world(w: &WorldArgs, seed: u64) -> Result<(FiniteWorld, ConditionalPolicy)> {
    match &w.world {
        Some(path) => {
            let (world, policy) = read_world(path)?;
            let policy = policy.unwrap_or_else(|| ConditionalPolicy::uniform(&world));
            Ok((world, policy))
        }
        None => {
            if w.prompts == 0 || w.outcomes < 2 {
                return Err(Error::InvalidParameter(
                    "random worlds need at least one prompt and two outcomes".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let world = random::world(&mut rng, w.prompts, 2, w.outcomes);
            let policy = random::policy(&mut rng, &world);
            Ok((world, policy))
        }
    }
}

/// One failed cross-check of a policy-level step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMismatch {
    pub step: usize,
    pub prompt: String,
    pub check: &'static str,
    pub error: f64,
}

/// Compares every step of `evolution` with the scalar map and with the
/// numerical maximizer of that step's objective.
pub fn check_evolution(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    variant: &VariantSpec,
    evolution: &policy_update::Evolution,
    tol: f64,
) -> Result<Vec<StepMismatch>> {
    let mut bad = Vec::new();
    for n in 1..evolution.policies.len() {
        let prev = &evolution.policies[n - 1];
        let next = &evolution.policies[n];
        let spec = ObjectiveSpec::new(world, *variant, pi_ref.clone(), prev.clone(), None)?;
        for (i, prompt) in world.prompts().iter().enumerate() {
            let s = prompt.success();
            let p_ref = success_mass(pi_ref.row(i), s);
            let p_prev = success_mass(prev.row(i), s);
            let delta = match variant.alpha() {
                Some(alpha) => policy_update::renyi_report_rows(pi_ref.row(i), prev.row(i), s, alpha)
                    .ok()
                    .map(|r| r.delta_r),
                None => None,
            };
            if variant.alpha().is_none() || delta.is_some() {
                let predicted = pos_map(variant, p_ref, p_prev, delta)?;
                let err = (success_mass(next.row(i), s) - predicted).abs();
                if !(err <= tol) {
                    bad.push(StepMismatch {
                        step: n,
                        prompt: prompt.id().to_string(),
                        check: "scalar-map",
                        error: err,
                    });
                }
            }
            let numeric = match oracle::maximize_numerically(
                world,
                &spec,
                prompt.id(),
                oracle::DEFAULT_MAXIMIZER_ITERS,
                None,
            ) {
                Ok(m) => m.objective,
                Err(Error::NonConvergence { best, .. }) => {
                    let mut rows = next.rows().to_vec();
                    rows[i] = best;
                    oracle::objective_value(world, &spec, &ConditionalPolicy::new(world, rows)?, prompt.id())?
                }
                Err(e) => return Err(e),
            };
            let closed = oracle::objective_value(world, &spec, next, prompt.id())?;
            let gap = numeric - closed;
            if !(gap <= tol) {
                bad.push(StepMismatch {
                    step: n,
                    prompt: prompt.id().to_string(),
                    check: "maximizer-gap",
                    error: gap,
                });
            }
        }
    }
    Ok(bad)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_policy_evolve(a: &EvolveArgs) -> Result<Outcome> {
    let v = variant(&a.common, a.eps, a.beta)?;
    let (world, pi_ref) = load_world(&a.world, a.common.seed)?;
    exec(a.common.jobs)?;
    let pi_0 = match &a.init {
        Some(path) => match read_world(path)? {
            (w, Some(p)) if w == world => p,
            (w, _) if w != world => {
                return Err(Error::InvalidWorld(format!("{} describes a different world", path.display())))
            }
            _ => return Err(Error::InvalidWorld(format!("{} carries no policy rows", path.display()))),
        },
        None => pi_ref.clone(),
    };
    let ev = policy_update::evolve_from(&world, &pi_ref, &pi_0, &v, a.steps)?;
    let mismatches = if a.check {
        Some(with_jobs(a.common.jobs, || check_evolution(&world, &pi_ref, &v, &ev, a.tol))?)
    } else {
        None
    };
    let text = match a.common.format {
        // One JSON object per line, with a trailing summary line under --check.
        Format::Json => {
            let mut s = String::new();
            for r in &ev.records {
                s.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidParameter(e.to_string()))?);
                s.push('\n');
            }
            if let Some(m) = &mismatches {
                let summary = serde_json::json!({ "check": { "mismatches": m } });
                s.push_str(&summary.to_string());
                s.push('\n');
            }
            s
        }
        Format::Csv => {
            let mut s = String::from("step,prompt,pos,logit,delta_r,z\n");
            for r in &ev.records {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.prompt, r.pos, r.logit, opt(r.delta_r), opt(r.z));
            }
            s
        }
    };
    emit(a.common.out.as_deref(), &text)?;
    Ok(match mismatches {
        Some(m) if !m.is_empty() => Outcome {
            passed: false,
            message: Some(format!(
                "{} step checks failed; first: step {} prompt `{}` {} error {:e}",
                m.len(),
                m[0].step,
                m[0].prompt,
                m[0].check,
                m[0].error
            )),
        },
        Some(_) => Outcome {
            passed: true,
            message: Some(format!("all {} steps verified", a.steps)),
        },
        None => Outcome::ok(),
    })
}

#[derive(Debug, Serialize)]
struct TrainOutput<'a> {
    variant: String,
    log: &'a [TrainRecord],
    check: &'a DriftCheck,
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let v = variant(&a.common, a.eps, a.beta)?;
    let (world, pi_ref) = load_world(&a.world, a.common.seed)?;
    let mut c = TrainConfig::new(v, a.steps, a.inner);
    c.optimizer = match a.optimizer {
        OptimizerArg::Natural => InnerOptimizer::Natural,
        OptimizerArg::Gradient => InnerOptimizer::Gradient,
    };
    c.learning_rate = a.lr.unwrap_or_else(|| trainer::default_learning_rate(c.optimizer, a.beta));
    c.seed = a.common.seed;
    if let Some(g) = a.group_size {
        c.use_exact_p = false;
        c.group_size = g;
    }
    c.fault = match (a.fault_step, a.fault_tv) {
        (Some(step), Some(tv)) => Some(FaultInjection { step, tv }),
        _ => None,
    };
    c.execution = exec(a.common.jobs)?;
    if !(a.tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be non-negative, got {}", a.tol)));
    }
    c.validate()?;
    let out = with_jobs(a.common.jobs, || trainer::train(&world, &pi_ref, &c))?;
    // The exact iterate after M steps stands in for its limit p*.
    let star: Vec<f64> = out.drift.prompts.iter().map(|d| *d.pos_exact.last().unwrap()).collect();
    let check = trainer::drift_bound_check(&out.drift, &star, a.tol, a.delta_budget)?;
    let text = match a.common.format {
        Format::Json => json(&TrainOutput {
            variant: v.label(),
            log: &out.log,
            check: &check,
        })?,
        Format::Csv => {
            let mut s = String::from("iter,prompt,pos_exact,pos_param,tv,delta,objective\n");
            for r in &out.log {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.iter,
                    r.prompt,
                    r.pos_exact,
                    r.pos_param,
                    r.tv,
                    r.delta,
                    opt(r.objective)
                );
            }
            s
        }
    };
    emit(a.common.out.as_deref(), &text)?;
    let mut msg = String::new();
    for p in &check.prompts {
        let _ = write!(
            msg,
            "{}: final gap {:e} bound {:e}{}{}; ",
            p.prompt,
            p.final_gap,
            p.final_bound,
            if p.pos_tv_violations.is_empty() { "" } else { ", pos/tv violations" },
            if p.envelope_violations.is_empty() { "" } else { ", drift budget exceeded" },
        );
    }
    Ok(Outcome {
        passed: check.passed,
        message: Some(format!(
            "drift check {}: {}",
            if check.passed { "passed" } else { "FAILED" },
            msg.trim_end_matches("; ")
        )),
    })
}

pub fn verify_table(report: &VerifyReport) -> String {
    let mut s = String::new();
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<5} {:<14} {:<36} cases {:>6}  failures {:>4}  worst {:.3e}  tol {:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.check,
            r.cases,
            r.failures,
            r.worst,
            r.tolerance
        );
    }
    s
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    let mut config = if a.quick {
        VerifyConfig::quick(a.seed)
    } else {
        VerifyConfig::full(a.seed)
    };
    if !(a.eps > 0.0 && a.eps <= 1.0) {
        return Err(Error::InvalidParameter(format!("eps must lie in (0, 1], got {}", a.eps)));
    }
    config.epsilon = a.eps;
    config.execution = exec(a.jobs)?;
    let suites: Vec<Suite> = if a.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suite.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let report = with_jobs(a.jobs, || verify::run(&config, &suites))?;
    let text = match a.format {
        Format::Csv => report.to_csv(),
        Format::Json => json(&report)?,
    };
    emit(a.out.as_deref(), &text)?;
    if a.out.is_some() {
        print!("{}", verify_table(&report));
    } else {
        eprint!("{}", verify_table(&report));
    }
    Ok(Outcome {
        passed: report.passed(),
        message: Some(format!(
            "{} of {} checks passed",
            report.rows.iter().filter(|r| r.passed).count(),
            report.rows.len()
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("grpo-dynamics").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn default_grids() {
        let Command::FixedPoints(a) = parse(&["fixed-points"]).command else {
            panic!()
        };
        assert_eq!(a.grid.beta, DEFAULT_BETAS);
        assert_eq!(a.grid.pref, DEFAULT_PREFS);
        assert_eq!(a.grid.eps, [1e-5]);
    }

    #[test]
    fn comma_lists() {
        let Command::Trajectory(a) = parse(&["trajectory", "--beta", "1,2", "--pref", "0.2"]).command else {
            panic!()
        };
        assert_eq!(a.grid.beta, [1.0, 2.0]);
        assert_eq!(cells(&a.common, &a.grid).unwrap().len(), 2);
    }

    #[test]
    fn bad_grid_values_are_rejected() {
        for args in [
            &["trajectory", "--beta=-1"][..],
            &["trajectory", "--pref", "1.5"],
            &["trajectory", "--eps", "0"],
            &["trajectory", "--variant", "twokl", "--alpha", "1"],
        ] {
            let Command::Trajectory(a) = parse(args).command else {
                panic!()
            };
            assert!(cmd_trajectory(&a).is_err(), "{args:?}");
        }
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["grpo-dynamics", "trajectory", "--beta", ""]), EXIT_USAGE);
        assert_eq!(main_with_args(["grpo-dynamics", "nope"]), EXIT_USAGE);
        assert_eq!(main_with_args(["grpo-dynamics", "trajectory", "--variant", "x"]), EXIT_USAGE);
    }

    #[test]
    fn mean_only_collapses_epsilon_axis() {
        let Command::FixedPoints(a) = parse(&["fixed-points", "--norm", "mean", "--eps", "1e-5,1e-3"]).command else {
            panic!()
        };
        assert_eq!(cells(&a.common, &a.grid).unwrap().len(), 42);
    }

    #[test]
    fn check_evolution_flags_a_wrong_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random::world(&mut rng, 2, 3, 5);
        let pi = random::policy(&mut rng, &w);
        let v = VariantSpec::reference(WeightScheme::stabilized(1e-5).unwrap(), 1.0).unwrap();
        let mut ev = policy_update::evolve(&w, &pi, &v, 3).unwrap();
        assert!(check_evolution(&w, &pi, &v, &ev, 1e-9).unwrap().is_empty());
        ev.policies[2] = pi.clone();
        assert!(!check_evolution(&w, &pi, &v, &ev, 1e-9).unwrap().is_empty());
    }
}
