//! End-to-end verification suites.
//!
//! Each suite runs a family of checks on seeded random worlds or parameter
//! grids and returns one [`CheckRow`] per check: how many cases ran, how many
//! failed, and the worst measured error against its tolerance. Output depends
//! only on the [`VerifyConfig`], never on timing or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{effective_beta, WeightScheme};
use crate::dynamics::{
    beta_threshold, find_fixed_points, h, h_derivative, iterate, pos_map, FixedPointKind,
    Termination, VariantSpec,
};
use crate::oracle::{self, ObjectiveSpec};
use crate::par::Execution;
use crate::policy_update::{self, logodds_contraction_check, renyi_divergence, step_row};
use crate::trainer::{self, TrainConfig};
use crate::world::{logit, random, sigmoid, split_row, success_mass, tv_rows, ConditionalPolicy, FiniteWorld};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen; for boolean checks, the failure count.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn suite(&self, name: &str) -> impl Iterator<Item = &CheckRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.suite == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,check,cases,failures,worst,tolerance,status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{}\n",
                r.suite,
                r.check,
                r.cases,
                r.failures,
                r.worst,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Optimality,
    Consistency,
    Amplification,
    Monotonicity,
    DrGrpo,
    Derivative,
    Renyi,
    Drift,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Optimality,
        Suite::Consistency,
        Suite::Amplification,
        Suite::Monotonicity,
        Suite::DrGrpo,
        Suite::Derivative,
        Suite::Renyi,
        Suite::Drift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Optimality => "optimality",
            Suite::Consistency => "consistency",
            Suite::Amplification => "amplification",
            Suite::Monotonicity => "monotonicity",
            Suite::DrGrpo => "dr-grpo",
            Suite::Derivative => "derivative",
            Suite::Renyi => "renyi",
            Suite::Drift => "drift",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite `{s}`")))
    }
}

/// Sizes of every suite. [`VerifyConfig::full`] matches the acceptance
/// targets; [`VerifyConfig::quick`] is a smoke run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub epsilon: f64,
    pub optimality_worlds: usize,
    pub consistency_worlds: usize,
    pub consistency_steps: usize,
    /// Cells per axis of the amplification grid; `β × p_ref × ε` with three ε.
    pub amplification_betas: usize,
    pub amplification_prefs: usize,
    pub derivative_points: usize,
    pub stability_points: usize,
    pub renyi_pairs: usize,
    pub drift_worlds: usize,
    pub drift_seeds: usize,
    pub execution: Execution,
}

impl VerifyConfig {
    pub fn full(seed: u64) -> Self {
        VerifyConfig {
            seed,
            epsilon: crate::calibration::DEFAULT_EPSILON,
            optimality_worlds: 200,
            consistency_worlds: 50,
            consistency_steps: 50,
            amplification_betas: 12,
            amplification_prefs: 15,
            derivative_points: 1000,
            stability_points: 100,
            renyi_pairs: 100,
            drift_worlds: 10,
            drift_seeds: 100,
            execution: Execution::default(),
        }
    }

    pub fn quick(seed: u64) -> Self {
        VerifyConfig {
            optimality_worlds: 20,
            consistency_worlds: 5,
            amplification_betas: 6,
            amplification_prefs: 8,
            derivative_points: 200,
            stability_points: 30,
            renyi_pairs: 20,
            drift_worlds: 2,
            drift_seeds: 20,
            ..VerifyConfig::full(seed)
        }
    }
}

/// Accumulates cases of one check.
struct Tally {
    suite: &'static str,
    check: &'static str,
    tolerance: f64,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(suite: Suite, check: &'static str, tolerance: f64) -> Self {
        Tally {
            suite: suite.name(),
            check,
            tolerance,
            cases: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    /// Records an error that passes when `error <= tolerance`.
    fn error(&mut self, error: f64) {
        self.cases += 1;
        if !(error <= self.tolerance) {
            self.failures += 1;
        }
        if error > self.worst || error.is_nan() {
            self.worst = error;
        }
    }

    fn flag(&mut self, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            self.worst = self.failures as f64;
        }
    }

    fn row(self) -> CheckRow {
        CheckRow {
            suite: self.suite.to_string(),
            check: self.check.to_string(),
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
            passed: self.failures == 0 && self.cases > 0,
        }
    }
}

fn rng_for(config: &VerifyConfig, suite: Suite, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trainer::group_seed(config.seed, suite as usize + 1, case))
}

fn stabilized(config: &VerifyConfig) -> Result<WeightScheme> {
    WeightScheme::stabilized(config.epsilon)
}

pub fn run(config: &VerifyConfig, suites: &[Suite]) -> Result<VerifyReport> {
    let mut rows = Vec::new();
    for &s in suites {
        rows.extend(match s {
            Suite::Optimality => optimality(config)?,
            Suite::Consistency => consistency(config)?,
            Suite::Amplification => amplification(config)?,
            Suite::Monotonicity => monotonicity(config)?,
            Suite::DrGrpo => dr_grpo(config)?,
            Suite::Derivative => derivative(config)?,
            Suite::Renyi => renyi(config)?,
            Suite::Drift => drift(config)?,
        });
    }
    Ok(VerifyReport { rows })
}

pub fn run_all(config: &VerifyConfig) -> Result<VerifyReport> {
    run(config, &Suite::ALL)
}

struct OptimalityCase {
    gap: f64,
    tv: f64,
}

/// Closed-form updates against the numerical simplex maximizer.
pub fn optimality(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let cases: Vec<Result<Vec<OptimalityCase>>> = config.execution.map_range(config.optimality_worlds, |k| {
        let mut rng = rng_for(config, Suite::Optimality, k);
        let prompts = rng.gen_range(1..=2);
        let w = random::world(&mut rng, prompts, 2, 8);
        let pi_ref = random::policy(&mut rng, &w);
        let pi_prev = random::policy(&mut rng, &w);
        let beta = rng.gen_range(0.05..5.0);
        let alpha = rng.gen_range(0.05..0.95);
        let scheme = if rng.gen_bool(0.5) {
            stabilized(config)?
        } else {
            WeightScheme::mean_only()
        };
        let mut out = Vec::new();
        for v in [
            VariantSpec::reference(scheme, beta)?,
            VariantSpec::mirror(scheme, beta)?,
            VariantSpec::two_kl(alpha, scheme, beta)?,
        ] {
            let spec = ObjectiveSpec::new(&w, v, pi_ref.clone(), pi_prev.clone(), None)?;
            let mut rows = Vec::new();
            for (i, p) in w.prompts().iter().enumerate() {
                rows.push(step_row(pi_ref.row(i), pi_prev.row(i), p.success(), &v)?.0.row);
            }
            let closed = ConditionalPolicy::new(&w, rows)?;
            for (i, p) in w.prompts().iter().enumerate() {
                let numeric = oracle::maximize_numerically(&w, &spec, p.id(), oracle::DEFAULT_MAXIMIZER_ITERS, None)?;
                let best = oracle::objective_value(&w, &spec, &closed, p.id())?;
                out.push(OptimalityCase {
                    gap: numeric.objective - best,
                    tv: tv_rows(&numeric.row, closed.row(i))?,
                });
            }
        }
        Ok(out)
    });
    let mut gap = Tally::new(Suite::Optimality, "objective-gap", 1e-9);
    let mut tv = Tally::new(Suite::Optimality, "tv-to-maximizer", 1e-7);
    for c in cases {
        for c in c? {
            gap.error(c.gap);
            tv.error(c.tv);
        }
    }
    Ok(vec![gap.row(), tv.row()])
}

/// Per-step errors of policy-level iterations against the scalar maps.
fn consistency_errors(w: &FiniteWorld, pi_ref: &ConditionalPolicy, v: &VariantSpec, steps: usize) -> Result<Vec<f64>> {
    let ev = policy_update::evolve(w, pi_ref, v, steps)?;
    let mut errors = Vec::new();
    for (i, prompt) in w.prompts().iter().enumerate() {
        let s = prompt.success();
        let p_ref = success_mass(pi_ref.row(i), s);
        for n in 1..ev.policies.len() {
            let prev = ev.policies[n - 1].row(i);
            let p_prev = success_mass(prev, s);
            let delta = match v.alpha() {
                Some(alpha) => match policy_update::renyi_report_rows(pi_ref.row(i), prev, s, alpha) {
                    Ok(r) => Some(r.delta_r),
                    Err(_) => continue,
                },
                None => None,
            };
            let predicted = pos_map(v, p_ref, p_prev, delta)?;
            errors.push((success_mass(ev.policies[n].row(i), s) - predicted).abs());
        }
    }
    Ok(errors)
}

pub fn consistency(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let per_world = config.execution.map_range(config.consistency_worlds, |k| -> Result<[Vec<f64>; 3]> {
        let mut rng = rng_for(config, Suite::Consistency, k);
        let w = random::world(&mut rng, 2, 2, 8);
        let pi_ref = random::policy(&mut rng, &w);
        let beta = rng.gen_range(0.1..5.0);
        let alpha = rng.gen_range(0.05..0.95);
        let s = stabilized(config)?;
        Ok([
            consistency_errors(&w, &pi_ref, &VariantSpec::reference(s, beta)?, config.consistency_steps)?,
            consistency_errors(&w, &pi_ref, &VariantSpec::mirror(s, beta)?, config.consistency_steps)?,
            consistency_errors(&w, &pi_ref, &VariantSpec::two_kl(alpha, s, beta)?, config.consistency_steps)?,
        ])
    });
    let mut tallies = [
        Tally::new(Suite::Consistency, "reference-pos", 1e-10),
        Tally::new(Suite::Consistency, "mirror-pos", 1e-10),
        Tally::new(Suite::Consistency, "two-kl-pos", 1e-10),
    ];
    for errors in per_world {
        for (t, e) in tallies.iter_mut().zip(errors?) {
            e.into_iter().for_each(|x| t.error(x));
        }
    }
    Ok(tallies.into_iter().map(Tally::row).collect())
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn open_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Every located fixed point sits strictly above `p_ref`.
pub fn amplification(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let betas = log_grid(0.01, 10.0, config.amplification_betas);
    let mut prefs = open_grid(config.amplification_prefs);
    prefs.extend([0.001, 0.999]);
    let mut cells = Vec::new();
    for &eps in &[1e-5, 1e-3, 1e-1] {
        for &b in &betas {
            for &p in &prefs {
                cells.push((eps, b, p));
            }
        }
    }
    let reports = config.execution.map(&cells, |&(eps, beta, p_ref)| {
        let v = VariantSpec::reference(WeightScheme::stabilized(eps)?, beta)?;
        find_fixed_points(&v, p_ref, 512)
    });
    let mut amp = Tally::new(Suite::Amplification, "p-star-above-p-ref", 0.0);
    let mut residual = Tally::new(Suite::Amplification, "fixed-point-residual", crate::dynamics::FIXED_POINT_RESIDUAL);
    let mut cells_checked = Tally::new(Suite::Amplification, "cells-with-fixed-point", 0.0);
    for r in reports {
        let r = r?;
        cells_checked.flag(!r.fixed_points.is_empty());
        for f in &r.fixed_points {
            amp.flag(f.p_star > r.p_ref);
            residual.error(f.residual.abs());
        }
    }
    Ok(vec![cells_checked.row(), amp.row(), residual.row()])
}

/// Mirror trajectories rise strictly and reach `1 - 1e-6`.
pub fn monotonicity(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = stabilized(config)?;
    let mut rising = Tally::new(Suite::Monotonicity, "mirror-strictly-increasing", 0.0);
    let mut limit = Tally::new(Suite::Monotonicity, "mirror-reaches-one", 1e-6);
    let mut zero = Tally::new(Suite::Monotonicity, "zero-stays-zero", 0.0);
    for &beta in &[0.1, 1.0, 5.0] {
        let v = VariantSpec::mirror(s, beta)?;
        for &p_ref in &[0.001, 0.01, 0.1, 0.5, 0.9] {
            let t = iterate(&v, p_ref, crate::dynamics::DEFAULT_MAX_ITERS, crate::dynamics::DEFAULT_TOL)?;
            // Strict increase in log-odds; PoS itself may round to 1.0.
            rising.flag(t.logits.windows(2).all(|w| w[1] > w[0]));
            limit.error(1.0 - t.last());
        }
        let t = iterate(&v, 0.0, 100, crate::dynamics::DEFAULT_TOL)?;
        zero.flag(t.values.iter().all(|&p| p == 0.0));
    }
    Ok(vec![rising.row(), limit.row(), zero.row()])
}

/// Mean-only closed forms and the effective-β identity.
pub fn dr_grpo(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let mean = WeightScheme::mean_only();
    let mut progression = Tally::new(Suite::DrGrpo, "mirror-arithmetic-logits", 1e-12);
    let mut one_step = Tally::new(Suite::DrGrpo, "reference-fixed-point", 1e-12);
    let mut eff = Tally::new(Suite::DrGrpo, "effective-beta", 1e-12);
    for &beta in &[0.1, 0.5, 1.0, 5.0] {
        for &p_ref in &[0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9] {
            let t = iterate(&VariantSpec::mirror(mean, beta)?, p_ref, 1000, 0.0)?;
            for (n, l) in t.logits.iter().enumerate() {
                let closed = logit(p_ref) + n as f64 / beta;
                progression.error((l - closed).abs() / closed.abs().max(1.0));
            }
            let v = VariantSpec::reference(mean, beta)?;
            let expected = sigmoid(logit(p_ref) + 1.0 / beta);
            let r = find_fixed_points(&v, p_ref, 256)?;
            let interior: Vec<f64> = r
                .fixed_points
                .iter()
                .filter(|f| f.kind != FixedPointKind::Boundary)
                .map(|f| f.p_star)
                .collect();
            one_step.error(if interior.len() == 1 {
                (interior[0] - expected).abs()
            } else {
                f64::INFINITY
            });
            // Constant in p_prev, so one step reaches it from anywhere.
            one_step.error((h(&v, p_ref, 0.123) - expected).abs());
        }
    }
    for i in 0..1000 {
        let p = i as f64 / 999.0;
        for &beta in &[0.05, 1.0, 7.0] {
            let lhs = 1.0 / effective_beta(beta, p, config.epsilon)?;
            let rhs = stabilized(config)?.omega(p)? / beta;
            eff.error((lhs - rhs).abs() / rhs);
        }
    }
    Ok(vec![progression.row(), one_step.row(), eff.row()])
}

/// `h(p)` near 1 loses its distance to 1 in f64; difference the tail that
/// carries the information instead.
fn central_difference(v: &VariantSpec, p_ref: f64, p: f64, step: f64) -> f64 {
    let x = |q: f64| logit(p_ref) + v.drive(q);
    let (a, b) = (x(p + step), x(p - step));
    if a + b > 0.0 {
        -(sigmoid(-a) - sigmoid(-b)) / (2.0 * step)
    } else {
        (sigmoid(a) - sigmoid(b)) / (2.0 * step)
    }
}

pub fn derivative(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = stabilized(config)?;
    let mut fd = Tally::new(Suite::Derivative, "finite-difference", 1e-6);
    let v = VariantSpec::reference(s, 1.0)?;
    let n = config.derivative_points;
    for i in 0..n {
        // Uniform grid on [0.01, 0.99]; closer to the boundary the 1e-6 step
        // is no longer small against the ε-scale curvature of Ω.
        let p = 0.01 + 0.98 * i as f64 / (n - 1) as f64;
        let an = h_derivative(&v, 0.3, p)?;
        let num = central_difference(&v, 0.3, p, 1e-6);
        if an == 0.0 {
            fd.error(num.abs());
        } else {
            fd.error(((num - an) / an).abs());
        }
    }

    let mut agree = Tally::new(Suite::Derivative, "stability-iff-beta-above-threshold", 0.0);
    let betas = log_grid(0.05, 20.0, 25);
    let prefs = [0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
    let mut collected = 0;
    'outer: for &beta in &betas {
        for &p_ref in &prefs {
            let v = VariantSpec::reference(s, beta)?;
            for f in find_fixed_points(&v, p_ref, 512)?.fixed_points {
                if collected == config.stability_points {
                    break 'outer;
                }
                collected += 1;
                let slope = h_derivative(&v, p_ref, f.p_star)?.abs();
                let threshold = beta_threshold(f.p_star, config.epsilon);
                if (slope - 1.0).abs() < 1e-9 {
                    continue;
                }
                agree.flag((slope < 1.0) == (beta > threshold));
            }
        }
    }

    let mut flagged = Tally::new(Suite::Derivative, "divergent-regime-flagged", 0.0);
    let t = iterate(&VariantSpec::reference(s, 5.0)?, 0.001, crate::dynamics::DEFAULT_MAX_ITERS, crate::dynamics::DEFAULT_TOL)?;
    flagged.flag(matches!(t.terminated_by, Termination::PeriodTwo { .. } | Termination::MaxIters));
    Ok(vec![fd.row(), agree.row(), flagged.row()])
}

pub fn renyi(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = stabilized(config)?;
    let mut brute = Tally::new(Suite::Renyi, "power-sum", 1e-12);
    let mut same = Tally::new(Suite::Renyi, "zero-on-equal-policies", 1e-15);
    let mut limits = Tally::new(Suite::Renyi, "alpha-limits-tv", 1e-8);
    let mut affine = Tally::new(Suite::Renyi, "log-odds-contraction", 1e-10);
    for k in 0..config.renyi_pairs {
        let mut rng = rng_for(config, Suite::Renyi, k);
        let n = rng.gen_range(2..=8);
        let p = random::row(&mut rng, n);
        let q = random::row(&mut rng, n);
        let alpha = rng.gen_range(0.01..0.99);
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a.powf(alpha) * b.powf(1.0 - alpha)).sum();
        brute.error((renyi_divergence(&p, &q, alpha) - direct.ln() / (alpha - 1.0)).abs());

        let w = random::world(&mut rng, 1, 2, 8);
        let pi_ref = random::policy(&mut rng, &w);
        let pi_prev = random::policy(&mut rng, &w);
        let succ = w.prompts()[0].success();
        let r = policy_update::renyi_report_rows(pi_ref.row(0), pi_ref.row(0), succ, alpha)?;
        same.error(r.delta_r.abs().max(r.d_success).max(r.d_failure));

        let beta = rng.gen_range(0.1..3.0);
        let pairs = [
            (VariantSpec::two_kl(1.0 - 1e-12, s, beta)?, VariantSpec::reference(s, beta)?),
            (VariantSpec::two_kl(1e-12, s, beta)?, VariantSpec::mirror(s, beta)?),
        ];
        for (near, exact) in pairs {
            let a = step_row(pi_ref.row(0), pi_prev.row(0), succ, &near)?.0.row;
            let b = step_row(pi_ref.row(0), pi_prev.row(0), succ, &exact)?.0.row;
            limits.error(tv_rows(&a, &b)?);
        }

        let v = VariantSpec::two_kl(alpha.clamp(0.05, 0.95), s, beta)?;
        let ev = policy_update::evolve(&w, &pi_ref, &v, 20)?;
        let logits: Vec<f64> = ev.records.iter().map(|r| r.logit).collect();
        let mut drives = Vec::new();
        let mut complete = true;
        for n in 1..ev.policies.len() {
            let prev = ev.policies[n - 1].row(0);
            match ev.records[n].delta_r {
                Some(d) => drives.push(d + v.drive(success_mass(prev, succ))),
                None => complete = false,
            }
        }
        if complete {
            let l_ref = split_row(pi_ref.row(0), succ).p;
            let report = logodds_contraction_check(&logits, &drives, logit(l_ref), v.alpha().unwrap(), 1e-10)?;
            for r in report.residuals.iter().flatten() {
                affine.error(r.abs());
            }
        }
    }
    Ok(vec![brute.row(), same.row(), limits.row(), affine.row()])
}

/// Mean over seeds and steps of `|p̃_n - p_n|` with sampled PoS at group size `g`.
pub fn sampled_deviation(
    w: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    variant: VariantSpec,
    group_size: usize,
    seeds: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<f64> {
    let runs = exec.map_range(seeds, |k| -> Result<(f64, usize)> {
        let mut c = TrainConfig::new(variant, 8, 50);
        c.use_exact_p = false;
        c.group_size = group_size;
        c.seed = trainer::group_seed(base_seed, group_size, k);
        c.execution = Execution::Sequential;
        let out = trainer::train(w, pi_ref, &c)?;
        let mut total = 0.0;
        let mut count = 0;
        for d in &out.drift.prompts {
            for n in 1..d.tv.len() {
                total += d.pos_gap(n);
                count += 1;
            }
        }
        Ok((total, count))
    });
    let mut total = 0.0;
    let mut count = 0;
    for r in runs {
        let (t, c) = r?;
        total += t;
        count += c;
    }
    Ok(total / count as f64)
}

pub fn drift(config: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = stabilized(config)?;
    let mut tracking = Tally::new(Suite::Drift, "exact-p-tracking", 1e-3);
    let mut inequality = Tally::new(Suite::Drift, "pos-gap-within-2tv", 0.0);
    let mut final_bound = Tally::new(Suite::Drift, "final-drift-bound", 0.0);
    for k in 0..config.drift_worlds {
        let mut rng = rng_for(config, Suite::Drift, k);
        let w = random::world(&mut rng, 3, 2, 10);
        let pi_ref = random::policy(&mut rng, &w);
        let beta = rng.gen_range(0.5..2.0);
        for v in [
            VariantSpec::reference(s, beta)?,
            VariantSpec::mirror(s, beta)?,
            VariantSpec::two_kl(0.5, s, beta)?,
        ] {
            for inner in [200, 1] {
                let mut c = TrainConfig::new(v, 10, inner);
                c.execution = config.execution;
                let out = trainer::train(&w, &pi_ref, &c)?;
                for d in &out.drift.prompts {
                    for n in 0..d.tv.len() {
                        if inner == 200 {
                            tracking.error(d.pos_gap(n));
                        }
                        inequality.flag(d.pos_gap(n) <= 2.0 * d.tv[n] + 1e-14);
                    }
                }
                let star: Vec<f64> = out.drift.prompts.iter().map(|d| *d.pos_exact.last().unwrap()).collect();
                let check = trainer::drift_bound_check(&out.drift, &star, 1e-12, None)?;
                for p in &check.prompts {
                    final_bound.flag(p.final_holds);
                }
            }
        }
    }

    // Sampled PoS: deviation shrinks as the group grows.
    let mut rng = rng_for(config, Suite::Drift, usize::MAX);
    let w = random::world(&mut rng, 2, 3, 8);
    let pi_ref = random::policy(&mut rng, &w);
    let v = VariantSpec::reference(s, 1.0)?;
    let devs: Vec<f64> = [4, 16, 64]
        .iter()
        .map(|&g| sampled_deviation(&w, &pi_ref, v, g, config.drift_seeds, config.seed, config.execution))
        .collect::<Result<_>>()?;
    let mut monotone = Tally::new(Suite::Drift, "sampled-deviation-monotone-in-g", 0.0);
    monotone.flag(devs.windows(2).all(|p| p[1] <= p[0]));
    Ok(vec![tracking.row(), inequality.row(), final_bound.row(), monotone.row()])
}
