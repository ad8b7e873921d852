//! A tabular softmax realization of iterative GRPO.
//!
//! Each outer iteration freezes `π_old`, computes its PoS exactly or from a
//! group of `G` sampled outcomes, and then runs `μ` ascent steps on the logits
//! of the unclipped objective, either along the plain gradient or along the
//! natural gradient of the softmax. The exact closed-form iterate is
//! run in lockstep so the total-variation drift between the two can be
//! measured at every step.
//!
//! Gradients always enumerate outcomes; only the advantage weights carry
//! sampling noise when `p̂` is used.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Anchor, PoSTrajectory, Termination, VariantSpec};
use crate::oracle::estimate_row;
use crate::par::Execution;
use crate::policy_update;
use crate::world::{log_odds, success_mass, tv_rows, ConditionalPolicy, FiniteWorld};
use crate::{Error, Result};

/// Consecutive objective decreases tolerated in one inner loop.
pub const DIVERGENCE_STREAK: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSoftmaxPolicy {
    /// One row of logits per prompt; `-inf` marks outcomes with no mass.
    pub logits: Vec<Vec<f64>>,
}

impl TabularSoftmaxPolicy {
    pub fn from_policy(policy: &ConditionalPolicy) -> Self {
        TabularSoftmaxPolicy {
            logits: policy
                .rows()
                .iter()
                .map(|r| r.iter().map(|x| x.ln()).collect())
                .collect(),
        }
    }

    pub fn row(&self, index: usize) -> Vec<f64> {
        softmax(&self.logits[index])
    }

    pub fn policy(&self) -> ConditionalPolicy {
        ConditionalPolicy::from_rows_unchecked(self.logits.iter().map(|l| softmax(l)).collect())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Mixes the trained policy toward one outcome right after outer iteration
/// `step`, moving `tv` of mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub step: usize,
    pub tv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerOptimizer {
    /// Gradient preconditioned by the softmax Fisher metric: the step on
    /// logit `j` is the centered per-outcome gradient `g_j - Σ π g`, so every
    /// outcome converges at the same rate regardless of its mass.
    #[default]
    Natural,
    /// Plain gradient on the logits, `π_j (g_j - Σ π g)`. Stable for
    /// learning rates below `4/β`; outcomes with little mass move slowly.
    Gradient,
}

impl std::str::FromStr for InnerOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(InnerOptimizer::Natural),
            "gradient" | "plain" => Ok(InnerOptimizer::Gradient),
            other => Err(Error::InvalidParameter(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub group_size: usize,
    pub optimizer: InnerOptimizer,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_exact_p: bool,
    pub fault: Option<FaultInjection>,
    pub execution: Execution,
}

impl TrainConfig {
    /// Exact PoS, natural-gradient steps of size `1/(2β)`, and a group size
    /// of 16 for when sampling is switched on.
    pub fn new(variant: VariantSpec, outer_iters: usize, inner_steps: usize) -> Self {
        TrainConfig {
            variant,
            outer_iters,
            inner_steps,
            group_size: 16,
            optimizer: InnerOptimizer::Natural,
            learning_rate: default_learning_rate(InnerOptimizer::Natural, variant.beta()),
            seed: 0,
            use_exact_p: true,
            fault: None,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidParameter("outer and inner iteration counts must be at least 1".into()));
        }
        if !self.use_exact_p && self.group_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidParameter("group size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(f) = self.fault {
            if !(f.tv > 0.0 && f.tv < 1.0) || f.step == 0 {
                return Err(Error::InvalidParameter("fault needs a step >= 1 and tv in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// `1/(2β)` for natural steps, which halves the log-ratio error to the inner
/// optimum per step; `2/β` for plain steps, i.e. `1/L` with `L = β/2` bounding
/// the curvature of the KL term in logit space.
pub fn default_learning_rate(optimizer: InnerOptimizer, beta: f64) -> f64 {
    match optimizer {
        InnerOptimizer::Natural => 0.5 / beta,
        InnerOptimizer::Gradient => 2.0 / beta,
    }
}

/// `(coefficient, anchor row)` pairs of the KL penalty at one prompt.
fn anchors<'a>(variant: &VariantSpec, ref_row: &'a [f64], old_row: &'a [f64]) -> Vec<(f64, &'a [f64])> {
    match variant.anchor() {
        Anchor::Reference => vec![(1.0, ref_row)],
        Anchor::Mirror => vec![(1.0, old_row)],
        Anchor::TwoKl { alpha } => vec![(alpha, ref_row), (1.0 - alpha, old_row)],
    }
}

fn advantages(success: &[bool], weights: (f64, f64)) -> Vec<f64> {
    success
        .iter()
        .map(|&s| if s { weights.0 } else { -weights.1 })
        .collect()
}

/// Unclipped objective `Σ π A - β Σ_k c_k KL(π‖a_k)` at one prompt.
fn objective_at(
    logits: &[f64],
    success: &[bool],
    ref_row: &[f64],
    old_row: &[f64],
    weights: (f64, f64),
    variant: &VariantSpec,
) -> f64 {
    let pi = softmax(logits);
    let adv = advantages(success, weights);
    let anchors = anchors(variant, ref_row, old_row);
    let mut total = 0.0;
    for o in 0..pi.len() {
        if pi[o] == 0.0 {
            continue;
        }
        let kl: f64 = anchors.iter().map(|(c, a)| c * (pi[o].ln() - a[o].ln())).sum();
        total += pi[o] * (adv[o] - variant.beta() * kl);
    }
    total
}

fn gradient_at(
    logits: &[f64],
    success: &[bool],
    ref_row: &[f64],
    old_row: &[f64],
    weights: (f64, f64),
    variant: &VariantSpec,
) -> Result<Vec<f64>> {
    let (pi, centered) = centered_gradient(logits, success, ref_row, old_row, weights, variant)?;
    Ok(pi.iter().zip(&centered).map(|(p, c)| p * c).collect())
}

/// `(π, g - Σ π g)` with `g_j` the derivative of the objective in `π_j`;
/// entries without mass are zero.
fn centered_gradient(
    logits: &[f64],
    success: &[bool],
    ref_row: &[f64],
    old_row: &[f64],
    weights: (f64, f64),
    variant: &VariantSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pi = softmax(logits);
    let adv = advantages(success, weights);
    let anchors = anchors(variant, ref_row, old_row);
    let mut g = vec![0.0; pi.len()];
    for o in 0..pi.len() {
        if pi[o] == 0.0 {
            continue;
        }
        if anchors.iter().any(|(_, a)| a[o] <= 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "outcome {o} has mass outside the KL anchor's support"
            )));
        }
        let log_ratio: f64 = anchors.iter().map(|(c, a)| c * (pi[o].ln() - a[o].ln())).sum();
        g[o] = adv[o] - variant.beta() * log_ratio;
    }
    let mean: f64 = pi.iter().zip(&g).map(|(p, x)| p * x).sum();
    let centered = pi
        .iter()
        .zip(&g)
        .map(|(&p, x)| if p == 0.0 { 0.0 } else { x - mean })
        .collect();
    Ok((pi, centered))
}

/// Exact gradient of the unclipped objective with respect to the logits of
/// prompt `q`. Outcomes without mass get a zero entry.
///
/// The reward term `Σ π_old·(π/π_old)·A` is enumerated, so it reduces to
/// `Σ π·A`; the KL anchors are `pi_ref`, `pi_old` or both per the variant.
pub fn surrogate_gradient(
    world: &FiniteWorld,
    policy: &TabularSoftmaxPolicy,
    pi_ref: &ConditionalPolicy,
    pi_old: &ConditionalPolicy,
    weights: (f64, f64),
    variant: &VariantSpec,
    q: &str,
) -> Result<Vec<f64>> {
    pi_ref.check_fits(world)?;
    pi_old.check_fits(world)?;
    let i = world.index_of(q)?;
    gradient_at(
        &policy.logits[i],
        world.prompts()[i].success(),
        pi_ref.row(i),
        pi_old.row(i),
        weights,
        variant,
    )
}

pub fn surrogate_objective(
    world: &FiniteWorld,
    policy: &TabularSoftmaxPolicy,
    pi_ref: &ConditionalPolicy,
    pi_old: &ConditionalPolicy,
    weights: (f64, f64),
    variant: &VariantSpec,
    q: &str,
) -> Result<f64> {
    let i = world.index_of(q)?;
    Ok(objective_at(
        &policy.logits[i],
        world.prompts()[i].success(),
        pi_ref.row(i),
        pi_old.row(i),
        weights,
        variant,
    ))
}

/// Per-prompt drift between the trained and the exact iterates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDrift {
    pub prompt: String,
    /// `TV(π̃_n, π_n)` for `n = 0..=M`.
    pub tv: Vec<f64>,
    /// `δ_n = max(0, TV_n - TV_{n-1})`, with `δ_0 = 0`.
    pub delta: Vec<f64>,
    /// Running `Σ δ`.
    pub cumulative: Vec<f64>,
    pub pos_exact: Vec<f64>,
    pub pos_param: Vec<f64>,
}

impl PromptDrift {
    pub fn pos_gap(&self, n: usize) -> f64 {
        (self.pos_param[n] - self.pos_exact[n]).abs()
    }

    pub fn total_drift(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub prompts: Vec<PromptDrift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub prompt: String,
    pub pos_exact: f64,
    pub pos_param: f64,
    pub tv: f64,
    pub delta: f64,
    /// Objective after the inner loop; absent for the initial row.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ConditionalPolicy,
    pub exact: ConditionalPolicy,
    pub drift: DriftReport,
    pub trajectories: Vec<PoSTrajectory>,
    pub log: Vec<TrainRecord>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the group drawn for prompt `prompt` at outer iteration `iter`.
pub fn group_seed(base: u64, iter: usize, prompt: usize) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(iter as u64)) ^ prompt as u64)
}

struct InnerResult {
    logits: Vec<f64>,
    objective: f64,
}

#[allow(clippy::too_many_arguments)]
fn inner_loop(
    outer: usize,
    prompt: &str,
    start: &[f64],
    success: &[bool],
    ref_row: &[f64],
    old_row: &[f64],
    weights: (f64, f64),
    config: &TrainConfig,
) -> Result<InnerResult> {
    let variant = &config.variant;
    let mut logits = start.to_vec();
    let mut objective = objective_at(&logits, success, ref_row, old_row, weights, variant);
    let mut streak = 0;
    for _ in 0..config.inner_steps {
        let g = match config.optimizer {
            InnerOptimizer::Gradient => gradient_at(&logits, success, ref_row, old_row, weights, variant)?,
            InnerOptimizer::Natural => centered_gradient(&logits, success, ref_row, old_row, weights, variant)?.1,
        };
        for (l, gi) in logits.iter_mut().zip(&g) {
            if l.is_finite() {
                *l += config.learning_rate * gi;
            }
        }
        let next = objective_at(&logits, success, ref_row, old_row, weights, variant);
        // Once converged the objective only jitters at rounding level.
        let slack = 1e-12 * objective.abs().max(variant.beta()).max(1.0);
        if next < objective - slack {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::Divergence {
                    outer,
                    prompt: prompt.to_string(),
                    streak,
                    objective: next,
                });
            }
        } else {
            streak = 0;
        }
        objective = next;
    }
    Ok(InnerResult { logits, objective })
}

/// Moves `tv` of mass onto the least likely supported outcome.
fn inject(row: &[f64], tv: f64) -> Vec<f64> {
    let target = (0..row.len())
        .filter(|&o| row[o] > 0.0)
        .min_by(|&a, &b| row[a].total_cmp(&row[b]))
        .expect("rows carry mass");
    let t = (tv / (1.0 - row[target])).min(1.0);
    row.iter()
        .enumerate()
        .map(|(o, &x)| (1.0 - t) * x + if o == target { t } else { 0.0 })
        .collect()
}

/// Runs `M` outer iterations from `π̃_0 = π_0 = pi_ref`.
pub fn train(world: &FiniteWorld, pi_ref: &ConditionalPolicy, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    pi_ref.check_fits(world)?;
    let variant = config.variant;
    let mut theta = TabularSoftmaxPolicy::from_policy(pi_ref);
    let mut exact = pi_ref.clone();
    let n_prompts = world.len();

    let mut drift: Vec<PromptDrift> = world
        .prompts()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = success_mass(pi_ref.row(i), p.success());
            PromptDrift {
                prompt: p.id().to_string(),
                tv: vec![0.0],
                delta: vec![0.0],
                cumulative: vec![0.0],
                pos_exact: vec![s],
                pos_param: vec![s],
            }
        })
        .collect();
    let mut param_logits: Vec<Vec<f64>> = world
        .prompts()
        .iter()
        .enumerate()
        .map(|(i, p)| vec![log_odds(pi_ref.row(i), p.success())])
        .collect();
    let mut log: Vec<TrainRecord> = drift
        .iter()
        .map(|d| TrainRecord {
            iter: 0,
            prompt: d.prompt.clone(),
            pos_exact: d.pos_exact[0],
            pos_param: d.pos_param[0],
            tv: 0.0,
            delta: 0.0,
            objective: None,
        })
        .collect();

    for n in 1..=config.outer_iters {
        let old = theta.policy();
        let results = config.execution.map_range(n_prompts, |i| {
            let prompt = &world.prompts()[i];
            let old_row = old.row(i);
            let p = if config.use_exact_p {
                success_mass(old_row, prompt.success())
            } else {
                estimate_row(old_row, prompt.success(), config.group_size, group_seed(config.seed, n, i))?.p_hat
            };
            inner_loop(
                n,
                prompt.id(),
                &theta.logits[i],
                prompt.success(),
                pi_ref.row(i),
                old_row,
                variant.weights(p),
                config,
            )
        });
        let mut objectives = Vec::with_capacity(n_prompts);
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            theta.logits[i] = r.logits;
            objectives.push(r.objective);
        }
        if let Some(f) = config.fault.filter(|f| f.step == n) {
            for i in 0..n_prompts {
                let row = inject(&theta.row(i), f.tv);
                theta.logits[i] = row.iter().map(|x| x.ln()).collect();
            }
        }
        exact = policy_update::step(world, pi_ref, &exact, &variant)?.policy;

        for (i, prompt) in world.prompts().iter().enumerate() {
            let row = theta.row(i);
            let tv = tv_rows(&row, exact.row(i))?;
            let d = &mut drift[i];
            let delta = (tv - d.tv[n - 1]).max(0.0);
            d.tv.push(tv);
            d.delta.push(delta);
            d.cumulative.push(d.cumulative[n - 1] + delta);
            d.pos_exact.push(success_mass(exact.row(i), prompt.success()));
            d.pos_param.push(success_mass(&row, prompt.success()));
            param_logits[i].push(log_odds(&row, prompt.success()));
            log.push(TrainRecord {
                iter: n,
                prompt: prompt.id().to_string(),
                pos_exact: d.pos_exact[n],
                pos_param: d.pos_param[n],
                tv,
                delta,
                objective: Some(objectives[i]),
            });
        }
    }

    let trajectories = drift
        .iter()
        .zip(param_logits)
        .map(|(d, logits)| PoSTrajectory {
            prompt: Some(d.prompt.clone()),
            values: d.pos_param.clone(),
            logit_increments: logits.windows(2).map(|w| w[1] - w[0]).collect(),
            logits,
            terminated_by: Termination::MaxIters,
            conditionals_matched: false,
        })
        .collect();

    Ok(TrainOutcome {
        policy: theta.policy(),
        exact,
        drift: DriftReport { prompts: drift },
        trajectories,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepViolation {
    pub step: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDriftCheck {
    pub prompt: String,
    /// Steps where `|p̃_n - p_n| > 2·TV_n`.
    pub pos_tv_violations: Vec<StepViolation>,
    pub checked_steps: usize,
    pub final_gap: f64,
    /// `2·Σδ + |p_N - p*| + tol`.
    pub final_bound: f64,
    pub final_holds: bool,
    /// Steps whose drift increment exceeds the declared per-step budget.
    pub envelope_violations: Vec<StepViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub prompts: Vec<PromptDriftCheck>,
    pub passed: bool,
}

/// Checks the PoS/TV inequality per step and the final drift bound
/// `|p̃_N - p*| ≤ 2·Σδ + tol` per prompt.
///
/// The exact iterate's own distance `|p_N - p*|` is added to the bound, since
/// a finite run only approximates its limit. With `delta_budget` set, any step
/// whose measured increment exceeds it is listed as an envelope violation and
/// fails the check.
pub fn drift_bound_check(
    report: &DriftReport,
    p_star: &[f64],
    tol: f64,
    delta_budget: Option<f64>,
) -> Result<DriftCheck> {
    if p_star.len() != report.prompts.len() {
        return Err(Error::ShapeMismatch("one fixed point per prompt".into()));
    }
    let mut prompts = Vec::with_capacity(p_star.len());
    for (d, &star) in report.prompts.iter().zip(p_star) {
        let len = d.tv.len();
        if d.pos_exact.len() != len || d.pos_param.len() != len || d.delta.len() != len {
            return Err(Error::ShapeMismatch(format!("drift series of `{}` differ in length", d.prompt)));
        }
        let mut pos_tv_violations = Vec::new();
        for n in 0..len {
            let gap = d.pos_gap(n);
            let bound = 2.0 * d.tv[n];
            // Both sides are sums of the same rows; allow their rounding.
            if gap > bound + 1e-14 {
                pos_tv_violations.push(StepViolation { step: n, value: gap, bound });
            }
        }
        let mut envelope_violations = Vec::new();
        if let Some(budget) = delta_budget {
            for n in 1..len {
                if d.delta[n] > budget {
                    envelope_violations.push(StepViolation {
                        step: n,
                        value: d.delta[n],
                        bound: budget,
                    });
                }
            }
        }
        let final_gap = (d.pos_param[len - 1] - star).abs();
        let final_bound = 2.0 * d.total_drift() + (d.pos_exact[len - 1] - star).abs() + tol;
        prompts.push(PromptDriftCheck {
            prompt: d.prompt.clone(),
            checked_steps: len,
            final_holds: final_gap <= final_bound,
            pos_tv_violations,
            final_gap,
            final_bound,
            envelope_violations,
        });
    }
    let passed = prompts
        .iter()
        .all(|p| p.pos_tv_violations.is_empty() && p.final_holds && p.envelope_violations.is_empty());
    Ok(DriftCheck { prompts, passed })
}
