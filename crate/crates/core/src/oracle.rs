//! Independent checks on the closed forms.
//!
//! Nothing in this module calls into [`crate::policy_update`]: objectives are
//! evaluated by direct enumeration, the maximizer is a plain entropic mirror
//! ascent, and group estimates draw outcomes from a seeded generator.
//!
//! Group estimates use `ChaCha8Rng::seed_from_u64(seed)` from `rand_chacha`,
//! one `f64` per draw via `rand`'s standard 53-bit uniform, and inverse-CDF
//! lookup in outcome order. That pins the outcome of every `(policy, G, seed)`
//! on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Anchor, VariantSpec};
use crate::par::Execution;
use crate::world::{log_sum_exp, success_mass, ConditionalPolicy, FiniteWorld};
use crate::{Error, Result};

pub const MAXIMIZER_RESIDUAL: f64 = 1e-10;
pub const DEFAULT_MAXIMIZER_ITERS: usize = 10_000;

/// Frozen inputs of one regularized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    variant: VariantSpec,
    pi_ref: ConditionalPolicy,
    pi_prev: ConditionalPolicy,
    weight_plus: Vec<f64>,
    weight_minus: Vec<f64>,
    clip_epsilon: Option<f64>,
}

impl ObjectiveSpec {
    /// Weights come from `pos(pi_prev)` under the variant's scheme.
    pub fn new(
        world: &FiniteWorld,
        variant: VariantSpec,
        pi_ref: ConditionalPolicy,
        pi_prev: ConditionalPolicy,
        clip_epsilon: Option<f64>,
    ) -> Result<Self> {
        pi_prev.check_fits(world)?;
        let (weight_plus, weight_minus) = world
            .prompts()
            .iter()
            .enumerate()
            .map(|(i, p)| variant.weights(success_mass(pi_prev.row(i), p.success())))
            .unzip();
        ObjectiveSpec::with_weights(world, variant, pi_ref, pi_prev, weight_plus, weight_minus, clip_epsilon)
    }

    /// Arbitrary nonnegative weights, as in the general-anchor update.
    pub fn with_weights(
        world: &FiniteWorld,
        variant: VariantSpec,
        pi_ref: ConditionalPolicy,
        pi_prev: ConditionalPolicy,
        weight_plus: Vec<f64>,
        weight_minus: Vec<f64>,
        clip_epsilon: Option<f64>,
    ) -> Result<Self> {
        pi_ref.check_fits(world)?;
        pi_prev.check_fits(world)?;
        if weight_plus.len() != world.len() || weight_minus.len() != world.len() {
            return Err(Error::ShapeMismatch("one weight pair per prompt".into()));
        }
        if weight_plus
            .iter()
            .chain(&weight_minus)
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
        }
        if let Some(c) = clip_epsilon {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!("clip epsilon must be positive, got {c}")));
            }
        }
        Ok(ObjectiveSpec {
            variant,
            pi_ref,
            pi_prev,
            weight_plus,
            weight_minus,
            clip_epsilon,
        })
    }

    pub fn variant(&self) -> &VariantSpec {
        &self.variant
    }

    pub fn pi_ref(&self) -> &ConditionalPolicy {
        &self.pi_ref
    }

    pub fn pi_prev(&self) -> &ConditionalPolicy {
        &self.pi_prev
    }

    pub fn weights(&self, index: usize) -> (f64, f64) {
        (self.weight_plus[index], self.weight_minus[index])
    }

    pub fn clip_epsilon(&self) -> Option<f64> {
        self.clip_epsilon
    }

    /// `(coefficient, anchor row)` pairs making up the KL penalty.
    fn anchors(&self, index: usize) -> Vec<(f64, &[f64])> {
        match self.variant.anchor() {
            Anchor::Reference => vec![(1.0, self.pi_ref.row(index))],
            Anchor::Mirror => vec![(1.0, self.pi_prev.row(index))],
            Anchor::TwoKl { alpha } => vec![
                (alpha, self.pi_ref.row(index)),
                (1.0 - alpha, self.pi_prev.row(index)),
            ],
        }
    }

    fn advantages(&self, index: usize, success: &[bool]) -> Vec<f64> {
        let (plus, minus) = self.weights(index);
        success.iter().map(|&s| if s { plus } else { -minus }).collect()
    }
}

fn kl_row(x: &[f64], anchor: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&xo, &ao) in x.iter().zip(anchor) {
        if xo > 0.0 {
            if ao <= 0.0 {
                return f64::INFINITY;
            }
            total += xo * (xo.ln() - ao.ln());
        }
    }
    total
}

fn check_candidate(world: &FiniteWorld, candidate: &ConditionalPolicy) -> Result<()> {
    candidate.check_fits(world)
}

/// Reward term minus β times the variant's KL penalty, by enumeration.
///
/// Returns `-inf` when the candidate puts mass where an anchor has none.
pub fn objective_value(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    candidate: &ConditionalPolicy,
    q: &str,
) -> Result<f64> {
    check_candidate(world, candidate)?;
    let i = world.index_of(q)?;
    Ok(objective_row(spec, i, world.prompts()[i].success(), candidate.row(i)))
}

pub fn reward_term(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    candidate: &ConditionalPolicy,
    q: &str,
) -> Result<f64> {
    check_candidate(world, candidate)?;
    let i = world.index_of(q)?;
    let adv = spec.advantages(i, world.prompts()[i].success());
    Ok(candidate.row(i).iter().zip(&adv).map(|(x, a)| x * a).sum())
}

fn objective_row(spec: &ObjectiveSpec, index: usize, success: &[bool], x: &[f64]) -> f64 {
    let adv = spec.advantages(index, success);
    let reward: f64 = x.iter().zip(&adv).map(|(x, a)| x * a).sum();
    let kl: f64 = spec
        .anchors(index)
        .iter()
        .map(|(c, a)| c * kl_row(x, a))
        .sum();
    if kl.is_infinite() {
        return f64::NEG_INFINITY;
    }
    reward - spec.variant.beta() * kl
}

/// `min(x·y, clip(x, 1-ε, 1+ε)·y)`.
pub fn clip_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Importance-weighted clipped reward `Σ π_old(o)·f(π(o)/π_old(o), A(o))`
/// with `π_old = pi_prev`. Without a clip range this is the unclipped reward
/// term.
pub fn clipped_surrogate(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    candidate: &ConditionalPolicy,
    q: &str,
) -> Result<f64> {
    check_candidate(world, candidate)?;
    let i = world.index_of(q)?;
    let adv = spec.advantages(i, world.prompts()[i].success());
    let eps = spec.clip_epsilon.unwrap_or(f64::INFINITY);
    let old = spec.pi_prev.row(i);
    let mut total = 0.0;
    for (o, (&x, &a)) in candidate.row(i).iter().zip(&adv).enumerate() {
        if old[o] == 0.0 {
            if x > 0.0 {
                return Err(Error::InvalidPolicy(format!(
                    "candidate puts mass {x} on outcome {o} of `{q}` where the old policy has none"
                )));
            }
            continue;
        }
        total += old[o] * clip_term(x / old[o], a, eps);
    }
    Ok(total)
}

/// Clipped surrogate minus the variant's KL penalty.
pub fn clipped_objective(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    candidate: &ConditionalPolicy,
    q: &str,
) -> Result<f64> {
    let surrogate = clipped_surrogate(world, spec, candidate, q)?;
    let i = world.index_of(q)?;
    let kl: f64 = spec
        .anchors(i)
        .iter()
        .map(|(c, a)| c * kl_row(candidate.row(i), a))
        .sum();
    Ok(surrogate - spec.variant.beta() * kl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximizerOutcome {
    pub row: Vec<f64>,
    pub objective: f64,
    /// Spread `max - min` of the objective gradient over the support,
    /// divided by `max(β, 1)`.
    pub residual: f64,
    pub iterations: usize,
}

/// Entropic mirror ascent on the simplex restricted to the anchors' common
/// support, starting from the uniform row there.
///
/// The default step is `1/(2β)`; the KL penalty is β-smooth relative to the
/// entropy, so this is half the largest safe step. It is halved whenever an
/// iterate lowers the objective.
pub fn maximize_numerically(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    q: &str,
    iters: usize,
    step: Option<f64>,
) -> Result<MaximizerOutcome> {
    let i = world.index_of(q)?;
    let support = common_support(spec, i);
    if support.is_empty() {
        return Err(Error::DegenerateAnchor);
    }
    let n = world.prompts()[i].len();
    let start: Vec<f64> = (0..n)
        .map(|o| if support.contains(&o) { 1.0 / support.len() as f64 } else { 0.0 })
        .collect();
    maximize_from(world, spec, q, &start, iters, step)
}

/// Mirror ascent from an explicit starting row; its support must lie inside
/// the anchors' common support.
pub fn maximize_from(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    q: &str,
    start: &[f64],
    iters: usize,
    step: Option<f64>,
) -> Result<MaximizerOutcome> {
    let i = world.index_of(q)?;
    let success = world.prompts()[i].success();
    if start.len() != success.len() {
        return Err(Error::ShapeMismatch("starting row length".into()));
    }
    let beta = spec.variant.beta();
    let mut eta = step.unwrap_or(0.5 / beta);
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {eta}")));
    }
    let adv = spec.advantages(i, success);
    let anchors = spec.anchors(i);
    let support: Vec<usize> = (0..start.len()).filter(|&o| start[o] > 0.0).collect();
    if support.iter().any(|&o| anchors.iter().any(|(_, a)| a[o] <= 0.0)) {
        return Err(Error::InvalidPolicy("starting row leaves the anchors' support".into()));
    }
    // Log-weights on the support; rows are only materialized at the end.
    let mut log_x: Vec<f64> = support.iter().map(|&o| start[o].ln()).collect();
    let log_anchor: Vec<f64> = support
        .iter()
        .map(|&o| anchors.iter().map(|(c, a)| c * a[o].ln()).sum())
        .collect();
    let a_s: Vec<f64> = support.iter().map(|&o| adv[o]).collect();

    let objective = |lx: &[f64]| -> f64 {
        lx.iter()
            .zip(&log_anchor)
            .zip(&a_s)
            .map(|((l, la), a)| {
                let x = l.exp();
                if x == 0.0 {
                    0.0
                } else {
                    x * (a - beta * (l - la))
                }
            })
            .sum()
    };
    let gradient = |lx: &[f64]| -> Vec<f64> {
        lx.iter()
            .zip(&log_anchor)
            .zip(&a_s)
            .map(|((l, la), a)| a - beta * (l - la))
            .collect()
    };
    // The gradient carries a factor β, which f64 cannot resolve below
    // β·1e-16 per unit of log-mass; measure it on the objective scaled by
    // 1/max(β, 1) instead.
    let scale = beta.max(1.0);
    let spread = |g: &[f64]| {
        let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        (max - min) / scale
    };

    let mut value = objective(&log_x);
    let mut grad = gradient(&log_x);
    let mut residual = spread(&grad);
    let mut iterations = 0;
    while residual >= MAXIMIZER_RESIDUAL && iterations < iters {
        iterations += 1;
        let proposal: Vec<f64> = log_x.iter().zip(&grad).map(|(l, g)| l + eta * g).collect();
        let norm = log_sum_exp(proposal.iter().copied());
        let proposal: Vec<f64> = proposal.iter().map(|l| l - norm).collect();
        let next_value = objective(&proposal);
        // Near the optimum the gain is quadratic in the residual and drowns in
        // rounding, so only a clear decrease counts as overshooting.
        if next_value < value - 1e-12 * value.abs().max(scale) {
            eta *= 0.5;
            continue;
        }
        log_x = proposal;
        value = next_value;
        grad = gradient(&log_x);
        residual = spread(&grad);
    }

    let mut row = vec![0.0; start.len()];
    for (k, &o) in support.iter().enumerate() {
        row[o] = log_x[k].exp();
    }
    if residual >= MAXIMIZER_RESIDUAL {
        return Err(Error::NonConvergence {
            best: row,
            residual,
            iterations,
        });
    }
    Ok(MaximizerOutcome {
        row,
        objective: value,
        residual,
        iterations,
    })
}

fn common_support(spec: &ObjectiveSpec, index: usize) -> Vec<usize> {
    let anchors = spec.anchors(index);
    (0..anchors[0].1.len())
        .filter(|&o| anchors.iter().all(|(_, a)| a[o] > 0.0))
        .collect()
}

/// Largest objective gain available from one mirror-ascent step of size `eta`
/// at `row`. Near zero certifies first-order optimality.
pub fn ascent_gain(
    world: &FiniteWorld,
    spec: &ObjectiveSpec,
    q: &str,
    row: &[f64],
    eta: f64,
) -> Result<f64> {
    let i = world.index_of(q)?;
    let success = world.prompts()[i].success();
    let beta = spec.variant.beta();
    let adv = spec.advantages(i, success);
    let anchors = spec.anchors(i);
    let base = objective_row(spec, i, success, row);
    let log_next: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(o, &x)| {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let la: f64 = anchors.iter().map(|(c, a)| c * a[o].ln()).sum();
            x.ln() + eta * (adv[o] - beta * (x.ln() - la))
        })
        .collect();
    let norm = log_sum_exp(log_next.iter().copied());
    let next: Vec<f64> = log_next.iter().map(|l| (l - norm).exp()).collect();
    Ok(objective_row(spec, i, success, &next) - base)
}

/// PoS estimated from `G` sampled outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub group_size: usize,
    pub p_hat: f64,
    pub seed: u64,
}

pub fn estimate_pos(
    world: &FiniteWorld,
    policy: &ConditionalPolicy,
    q: &str,
    group_size: usize,
    seed: u64,
) -> Result<GroupEstimate> {
    policy.check_fits(world)?;
    let i = world.index_of(q)?;
    estimate_row(policy.row(i), world.prompts()[i].success(), group_size, seed)
}

pub fn estimate_row(
    row: &[f64],
    success: &[bool],
    group_size: usize,
    seed: u64,
) -> Result<GroupEstimate> {
    if group_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "group size must be at least 2, got {group_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = row
        .iter()
        .rposition(|&x| x > 0.0)
        .ok_or_else(|| Error::InvalidPolicy("row has no mass".into()))?;
    let mut hits = 0usize;
    for _ in 0..group_size {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut drawn = last;
        for (o, &x) in row.iter().enumerate() {
            cum += x;
            if u < cum {
                drawn = o;
                break;
            }
        }
        if success[drawn] {
            hits += 1;
        }
    }
    Ok(GroupEstimate {
        group_size,
        p_hat: hits as f64 / group_size as f64,
        seed,
    })
}

/// One estimate per seed, returned in seed order.
pub fn estimate_batch(
    world: &FiniteWorld,
    policy: &ConditionalPolicy,
    q: &str,
    group_size: usize,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<GroupEstimate>> {
    policy.check_fits(world)?;
    let i = world.index_of(q)?;
    let (row, success) = (policy.row(i), world.prompts()[i].success());
    exec.map(seeds, |&s| estimate_row(row, success, group_size, s))
        .into_iter()
        .collect()
}
