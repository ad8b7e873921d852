//! Closed-form policy recursions.
//!
//! Every update here is an exponential tilt of an anchor row,
//!
//! ```text
//! π_n(o) = anchor(o) · exp((ω⁺·1{r=1} - ω⁻·1{r=0}) / β) / Z
//! ```
//!
//! with the anchor chosen by the variant: the reference policy, the previous
//! iterate, or their normalized geometric mean `π_ref^α π_{n-1}^{1-α}`. The tilt
//! is constant on the success class and on the failure class, so it only moves
//! mass between the two and never changes either class conditional.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Anchor, VariantSpec};
use crate::world::{
    failure_mass, log_add_exp, log_odds, log_sum_exp, split_row, success_mass, ConditionalPolicy,
    FiniteWorld,
};
use crate::{Error, Result, Side};

/// Anchor policy plus per-prompt weights for a general tilt.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsUpdateInputs {
    anchor: ConditionalPolicy,
    weight_plus: Vec<f64>,
    weight_minus: Vec<f64>,
    beta: f64,
}

impl GibbsUpdateInputs {
    pub fn new(
        world: &FiniteWorld,
        anchor: ConditionalPolicy,
        weight_plus: Vec<f64>,
        weight_minus: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        anchor.check_fits(world)?;
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
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        Ok(GibbsUpdateInputs {
            anchor,
            weight_plus,
            weight_minus,
            beta,
        })
    }

    pub fn anchor(&self) -> &ConditionalPolicy {
        &self.anchor
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn weights(&self, index: usize) -> (f64, f64) {
        (self.weight_plus[index], self.weight_minus[index])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltedRow {
    pub row: Vec<f64>,
    pub log_z: f64,
}

impl TiltedRow {
    /// Partition function; may overflow to infinity for tiny β, use `log_z`.
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// Tilts `anchor` by `exp(+ω⁺/β)` on successes and `exp(-ω⁻/β)` on failures.
///
/// `log Z = log(p_a·e^{ω⁺/β} + (1-p_a)·e^{-ω⁻/β})` with `p_a` the anchor's
/// success mass; in debug builds it is cross-checked against a full sum over
/// outcomes.
pub fn tilt_row(anchor: &[f64], success: &[bool], plus: f64, minus: f64, beta: f64) -> TiltedRow {
    let up = plus / beta;
    let down = -minus / beta;
    let p_a = success_mass(anchor, success);
    let f_a = failure_mass(anchor, success);
    let log_z = log_add_exp(p_a.ln() + up, f_a.ln() + down);

    #[cfg(debug_assertions)]
    {
        let full = log_sum_exp(
            anchor
                .iter()
                .zip(success)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, &s)| a.ln() + if s { up } else { down }),
        );
        assert!(
            (full - log_z).abs() <= 1e-10 * log_z.abs().max(1.0),
            "partition function mismatch: closed {log_z} vs summed {full}"
        );
    }

    let scale_up = (up - log_z).exp();
    let scale_down = (down - log_z).exp();
    let row = anchor
        .iter()
        .zip(success)
        .map(|(&a, &s)| {
            if a == 0.0 {
                0.0
            } else if s {
                a * scale_up
            } else {
                a * scale_down
            }
        })
        .collect();
    TiltedRow { row, log_z }
}

pub fn gibbs_update(world: &FiniteWorld, inputs: &GibbsUpdateInputs, q: &str) -> Result<TiltedRow> {
    inputs.anchor.check_fits(world)?;
    let i = world.index_of(q)?;
    let (plus, minus) = inputs.weights(i);
    Ok(tilt_row(
        inputs.anchor.row(i),
        world.prompts()[i].success(),
        plus,
        minus,
        inputs.beta,
    ))
}

fn expect_anchor(variant: &VariantSpec, want: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{want} step called with variant {}",
            variant.label()
        )))
    }
}

/// Reference-anchored step: weights from `pos(pi_prev)`, anchor `pi_ref`.
pub fn grpo_step(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    pi_prev: &ConditionalPolicy,
    variant: &VariantSpec,
    q: &str,
) -> Result<TiltedRow> {
    expect_anchor(variant, "reference", variant.anchor() == Anchor::Reference)?;
    pi_ref.check_fits(world)?;
    pi_prev.check_fits(world)?;
    let i = world.index_of(q)?;
    let success = world.prompts()[i].success();
    let (plus, minus) = variant.weights(success_mass(pi_prev.row(i), success));
    Ok(tilt_row(pi_ref.row(i), success, plus, minus, variant.beta()))
}

/// Mirror step: the previous iterate is its own anchor.
pub fn mirror_step(
    world: &FiniteWorld,
    pi_prev: &ConditionalPolicy,
    variant: &VariantSpec,
    q: &str,
) -> Result<TiltedRow> {
    expect_anchor(variant, "mirror", variant.anchor() == Anchor::Mirror)?;
    pi_prev.check_fits(world)?;
    let i = world.index_of(q)?;
    let success = world.prompts()[i].success();
    let (plus, minus) = variant.weights(success_mass(pi_prev.row(i), success));
    Ok(tilt_row(pi_prev.row(i), success, plus, minus, variant.beta()))
}

/// Normalized `ref^α · prev^(1-α)`, computed in log space.
pub fn geometric_mean(ref_row: &[f64], prev_row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if ref_row.len() != prev_row.len() {
        return Err(Error::ShapeMismatch("geometric mean of rows with different lengths".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let logs: Vec<f64> = ref_row
        .iter()
        .zip(prev_row)
        .map(|(&r, &p)| {
            if r > 0.0 && p > 0.0 {
                alpha * r.ln() + (1.0 - alpha) * p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let norm = log_sum_exp(logs.iter().copied());
    if norm == f64::NEG_INFINITY {
        return Err(Error::DegenerateAnchor);
    }
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

/// Order-α Rényi divergence `D_α(P‖Q) = log(Σ p^α q^{1-α}) / (α - 1)` for
/// `α ∈ (0, 1)`. Infinite when P and Q share no support.
pub fn renyi_divergence(p: &[f64], q: &[f64], alpha: f64) -> f64 {
    let log_h = log_sum_exp(
        p.iter()
            .zip(q)
            .filter(|(a, b)| **a > 0.0 && **b > 0.0)
            .map(|(a, b)| b.ln() + alpha * (a.ln() - b.ln())),
    );
    // Divide out the rows' own rounding error in their sums; near α = 1 it
    // would otherwise be amplified by 1/(1-α).
    let log_p = log_sum_exp(p.iter().filter(|a| **a > 0.0).map(|a| a.ln()));
    let log_q = log_sum_exp(q.iter().filter(|b| **b > 0.0).map(|b| b.ln()));
    let log_h = log_h - (alpha * log_p + (1.0 - alpha) * log_q);
    (log_h / (alpha - 1.0)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiReport {
    pub alpha: f64,
    /// `D_α(p_ref,S ‖ p_prev,S)`
    pub d_success: f64,
    /// `D_α(p_ref,F ‖ p_prev,F)`
    pub d_failure: f64,
    /// `(1-α)(d_failure - d_success)`
    pub delta_r: f64,
}

impl RenyiReport {
    /// Success conditionals at least as close as failure conditionals; under
    /// this condition the two-KL iterates stay amplified over the reference.
    pub fn successes_closer(&self) -> bool {
        self.d_success <= self.d_failure
    }
}

pub fn renyi_report_rows(
    ref_row: &[f64],
    prev_row: &[f64],
    success: &[bool],
    alpha: f64,
) -> Result<RenyiReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let r = split_row(ref_row, success);
    let p = split_row(prev_row, success);
    let d_success = renyi_divergence(
        r.conditional(Side::Success)?,
        p.conditional(Side::Success)?,
        alpha,
    );
    let d_failure = renyi_divergence(
        r.conditional(Side::Failure)?,
        p.conditional(Side::Failure)?,
        alpha,
    );
    Ok(RenyiReport {
        alpha,
        d_success,
        d_failure,
        delta_r: (1.0 - alpha) * (d_failure - d_success),
    })
}

pub fn renyi_correction(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    pi_prev: &ConditionalPolicy,
    alpha: f64,
    q: &str,
) -> Result<RenyiReport> {
    pi_ref.check_fits(world)?;
    pi_prev.check_fits(world)?;
    let i = world.index_of(q)?;
    renyi_report_rows(pi_ref.row(i), pi_prev.row(i), world.prompts()[i].success(), alpha)
}

/// Two-KL step: tilt the geometric-mean anchor. The Rényi report is `None`
/// when a class conditional is undefined or the correction is not a number;
/// the policy update itself is still exact.
pub fn two_kl_step(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    pi_prev: &ConditionalPolicy,
    variant: &VariantSpec,
    q: &str,
) -> Result<(TiltedRow, Option<RenyiReport>)> {
    let alpha = variant.alpha();
    expect_anchor(variant, "two-KL", alpha.is_some())?;
    pi_ref.check_fits(world)?;
    pi_prev.check_fits(world)?;
    let i = world.index_of(q)?;
    step_row(
        pi_ref.row(i),
        pi_prev.row(i),
        world.prompts()[i].success(),
        variant,
    )
}

/// Variant-dispatched update of one prompt row.
pub fn step_row(
    ref_row: &[f64],
    prev_row: &[f64],
    success: &[bool],
    variant: &VariantSpec,
) -> Result<(TiltedRow, Option<RenyiReport>)> {
    let (plus, minus) = variant.weights(success_mass(prev_row, success));
    let beta = variant.beta();
    match variant.anchor() {
        Anchor::Reference => Ok((tilt_row(ref_row, success, plus, minus, beta), None)),
        Anchor::Mirror => Ok((tilt_row(prev_row, success, plus, minus, beta), None)),
        Anchor::TwoKl { alpha } => {
            let anchor = geometric_mean(ref_row, prev_row, alpha)?;
            let report = renyi_report_rows(ref_row, prev_row, success, alpha)
                .ok()
                .filter(|r| !r.delta_r.is_nan());
            Ok((tilt_row(&anchor, success, plus, minus, beta), report))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptStep {
    pub log_z: f64,
    pub renyi: Option<RenyiReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub policy: ConditionalPolicy,
    pub prompts: Vec<PromptStep>,
}

/// Applies one update of `variant` to every prompt.
pub fn step(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    pi_prev: &ConditionalPolicy,
    variant: &VariantSpec,
) -> Result<PolicyStep> {
    pi_ref.check_fits(world)?;
    pi_prev.check_fits(world)?;
    let mut rows = Vec::with_capacity(world.len());
    let mut prompts = Vec::with_capacity(world.len());
    for (i, prompt) in world.prompts().iter().enumerate() {
        let (tilted, renyi) = step_row(pi_ref.row(i), pi_prev.row(i), prompt.success(), variant)?;
        rows.push(tilted.row);
        prompts.push(PromptStep {
            log_z: tilted.log_z,
            renyi,
        });
    }
    Ok(PolicyStep {
        policy: ConditionalPolicy::from_rows_unchecked(rows),
        prompts,
    })
}

/// One line of a policy-evolution log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveRecord {
    pub step: usize,
    pub prompt: String,
    pub pos: f64,
    pub logit: f64,
    pub delta_r: Option<f64>,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    /// `π_0 = π_ref, π_1, ..., π_N`.
    pub policies: Vec<ConditionalPolicy>,
    pub records: Vec<EvolveRecord>,
}

/// Runs `steps` policy-level iterations from `π_0 = π_ref`.
pub fn evolve(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    variant: &VariantSpec,
    steps: usize,
) -> Result<Evolution> {
    evolve_from(world, pi_ref, pi_ref, variant, steps)
}

/// Runs `steps` policy-level iterations from an arbitrary `π_0`.
///
/// Updates tilt whole success and failure sides, so the conditionals of every
/// iterate are fixed by `π_ref` and `π_0`; starting at `π_ref` keeps `Δ_R = 0`.
pub fn evolve_from(
    world: &FiniteWorld,
    pi_ref: &ConditionalPolicy,
    pi_0: &ConditionalPolicy,
    variant: &VariantSpec,
    steps: usize,
) -> Result<Evolution> {
    pi_ref.check_fits(world)?;
    pi_0.check_fits(world)?;
    let mut policies = vec![pi_0.clone()];
    let mut records = Vec::new();
    let log = |records: &mut Vec<EvolveRecord>, n: usize, pi: &ConditionalPolicy, info: Option<&PolicyStep>| {
        for (i, prompt) in world.prompts().iter().enumerate() {
            let row = pi.row(i);
            records.push(EvolveRecord {
                step: n,
                prompt: prompt.id().to_string(),
                pos: success_mass(row, prompt.success()),
                logit: log_odds(row, prompt.success()),
                delta_r: info.and_then(|s| s.prompts[i].renyi.map(|r| r.delta_r)),
                z: info.map(|s| s.prompts[i].log_z.exp()),
            });
        }
    };
    log(&mut records, 0, pi_0, None);
    for n in 1..=steps {
        let next = step(world, pi_ref, &policies[n - 1], variant)?;
        log(&mut records, n, &next.policy, Some(&next));
        policies.push(next.policy);
    }
    Ok(Evolution { policies, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// Coefficient `1 - α` on the homogeneous part.
    pub factor: f64,
    /// Residual of `L_n - L_ref = (1-α)(L_{n-1} - L_ref) + drive_n` per step;
    /// `None` where a boundary or subnormal-side log-odds made the identity
    /// meaningless.
    pub residuals: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
    pub max_residual: f64,
    pub holds: bool,
}

/// Beyond this log-odds magnitude the smaller side's mass is subnormal and
/// log-odds read back from a probability row lose their precision.
pub const NORMAL_LOGIT_LIMIT: f64 = 708.0;

/// Checks the affine log-odds recursion of the two-KL iterates.
///
/// `logits` holds `L_0..L_N`; `drives[n-1]` is the additive term of step `n`,
/// i.e. `Δ_R + Ω(p_{n-1})/β`. Steps touching a log-odds beyond
/// [`NORMAL_LOGIT_LIMIT`] are skipped.
pub fn logodds_contraction_check(
    logits: &[f64],
    drives: &[f64],
    logit_ref: f64,
    alpha: f64,
    tol: f64,
) -> Result<ContractionReport> {
    if logits.len() != drives.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} log-odds need {} drives, got {}",
            logits.len(),
            logits.len().saturating_sub(1),
            drives.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let factor = 1.0 - alpha;
    let mut residuals = Vec::with_capacity(drives.len());
    let mut skipped = Vec::new();
    let mut max_residual = 0.0f64;
    for n in 1..logits.len() {
        let (prev, cur, d) = (logits[n - 1], logits[n], drives[n - 1]);
        let representable = |l: f64| l.abs() <= NORMAL_LOGIT_LIMIT;
        if !(representable(prev) && representable(cur) && d.is_finite() && representable(logit_ref)) {
            residuals.push(None);
            skipped.push(n);
            continue;
        }
        let r = (cur - logit_ref) - (factor * (prev - logit_ref) + d);
        max_residual = max_residual.max(r.abs());
        residuals.push(Some(r));
    }
    Ok(ContractionReport {
        factor,
        residuals,
        skipped,
        max_residual,
        holds: max_residual <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::WeightScheme;
    use crate::dynamics::pos_map;
    use crate::world::{logit, pos, random, sigmoid, split, tv_rows};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stab() -> WeightScheme {
        WeightScheme::stabilized(1e-5).unwrap()
    }

    fn world5() -> FiniteWorld {
        FiniteWorld::single(&[1, 0, 1, 0, 0]).unwrap()
    }

    #[test]
    fn zero_weights_leave_anchor() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchor = random::policy(&mut rng, &w);
        let inputs = GibbsUpdateInputs::new(&w, anchor.clone(), vec![0.0], vec![0.0], 0.7).unwrap();
        let out = gibbs_update(&w, &inputs, "q0").unwrap();
        assert!(out.log_z.abs() < 1e-15);
        assert!(tv_rows(&out.row, anchor.row(0)).unwrap() < 1e-15);
    }

    #[test]
    fn huge_beta_leaves_anchor() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchor = random::policy(&mut rng, &w);
        let inputs = GibbsUpdateInputs::new(&w, anchor.clone(), vec![3.0], vec![2.0], 1e12).unwrap();
        let out = gibbs_update(&w, &inputs, "q0").unwrap();
        assert!(tv_rows(&out.row, anchor.row(0)).unwrap() < 1e-10);
    }

    #[test]
    fn tilted_pos_matches_partition_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = random::world(&mut rng, 1, 2, 8);
            let anchor = random::policy(&mut rng, &w);
            let (plus, minus, beta) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.1..5.0));
            let inputs = GibbsUpdateInputs::new(&w, anchor.clone(), vec![plus], vec![minus], beta).unwrap();
            let out = gibbs_update(&w, &inputs, "q0").unwrap();
            let p_a = pos(&w, &anchor, "q0").unwrap();
            let z = p_a * (plus / beta).exp() + (1.0 - p_a) * (-minus / beta).exp();
            assert!((out.z() - z).abs() < 1e-12 * z);
            // Enumerate the output row directly.
            let mut p_out = 0.0;
            for (o, &s) in w.prompts()[0].success().iter().enumerate() {
                if s {
                    p_out += out.row[o];
                }
            }
            assert!((p_out - p_a * (plus / beta).exp() / z).abs() < 1e-12);
            assert!((out.row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_inputs_validated() {
        let w = world5();
        let a = ConditionalPolicy::uniform(&w);
        assert!(GibbsUpdateInputs::new(&w, a.clone(), vec![-1.0], vec![0.0], 1.0).is_err());
        assert!(GibbsUpdateInputs::new(&w, a.clone(), vec![1.0], vec![0.0], 0.0).is_err());
        assert!(GibbsUpdateInputs::new(&w, a, vec![1.0, 2.0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn first_grpo_step_is_h_of_reference() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi_ref = random::policy(&mut rng, &w);
        let v = VariantSpec::reference(stab(), 0.8).unwrap();
        let out = grpo_step(&w, &pi_ref, &pi_ref, &v, "q0").unwrap();
        let p_ref = pos(&w, &pi_ref, "q0").unwrap();
        let p1 = success_mass(&out.row, w.prompts()[0].success());
        assert!((p1 - pos_map(&v, p_ref, p_ref, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn policy_and_scalar_iterations_agree() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi_ref = random::policy(&mut rng, &w);
        let p_ref = pos(&w, &pi_ref, "q0").unwrap();
        let v = VariantSpec::reference(stab(), 1.0).unwrap();
        let ev = evolve(&w, &pi_ref, &v, 50).unwrap();
        let scalar = crate::dynamics::iterate(&v, p_ref, 50, 0.0).unwrap();
        for (n, pi) in ev.policies.iter().enumerate().take(scalar.values.len()) {
            assert!((pos(&w, pi, "q0").unwrap() - scalar.values[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_reference_success_never_grows() {
        let w = world5();
        let pi_ref = ConditionalPolicy::new(&w, vec![vec![0.0, 0.5, 0.0, 0.25, 0.25]]).unwrap();
        for v in [
            VariantSpec::reference(stab(), 0.3).unwrap(),
            VariantSpec::mirror(stab(), 0.3).unwrap(),
        ] {
            let ev = evolve(&w, &pi_ref, &v, 20).unwrap();
            assert!(ev.policies.iter().all(|pi| pos(&w, pi, "q0").unwrap() == 0.0));
        }
    }

    #[test]
    fn mirror_improves_and_keeps_conditionals() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prev = random::policy(&mut rng, &w);
        let v = VariantSpec::mirror(stab(), 2.0).unwrap();
        let out = mirror_step(&w, &prev, &v, "q0").unwrap();
        let next = ConditionalPolicy::new(&w, vec![out.row]).unwrap();
        let p0 = pos(&w, &prev, "q0").unwrap();
        let p1 = pos(&w, &next, "q0").unwrap();
        assert!(p1 > p0);
        assert!((p1 - sigmoid(logit(p0) + v.drive(p0))).abs() < 1e-12);
        let (a, b) = (split(&w, &prev, "q0").unwrap(), split(&w, &next, "q0").unwrap());
        assert!(tv_rows(&a.success_conditional.unwrap(), &b.success_conditional.unwrap()).unwrap() < 1e-12);
        assert!(tv_rows(&a.failure_conditional.unwrap(), &b.failure_conditional.unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn mirror_failure_point_mass_is_fixed() {
        let w = world5();
        let prev = ConditionalPolicy::new(&w, vec![vec![0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        let v = VariantSpec::mirror(stab(), 1.0).unwrap();
        let out = mirror_step(&w, &prev, &v, "q0").unwrap();
        assert_eq!(out.row, prev.row(0).to_vec());
    }

    #[test]
    fn step_functions_check_variant() {
        let w = world5();
        let pi = ConditionalPolicy::uniform(&w);
        let m = VariantSpec::mirror(stab(), 1.0).unwrap();
        assert!(grpo_step(&w, &pi, &pi, &m, "q0").is_err());
        let r = VariantSpec::reference(stab(), 1.0).unwrap();
        assert!(mirror_step(&w, &pi, &r, "q0").is_err());
        assert!(two_kl_step(&w, &pi, &pi, &r, "q0").is_err());
    }

    #[test]
    fn geometric_mean_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random::row(&mut rng, 6);
        let b = random::row(&mut rng, 6);
        let same = geometric_mean(&a, &a, 0.3).unwrap();
        assert!(tv_rows(&same, &a).unwrap() < 1e-15);
        let near_ref = geometric_mean(&a, &b, 1.0 - 1e-12).unwrap();
        assert!(tv_rows(&near_ref, &a).unwrap() < 1e-9);

        let alpha = 0.35;
        let g = geometric_mean(&a, &b, alpha).unwrap();
        let norm: f64 = a.iter().zip(&b).map(|(x, y)| x.powf(alpha) * y.powf(1.0 - alpha)).sum();
        for o in 0..6 {
            let expected = alpha * a[o].ln() + (1.0 - alpha) * b[o].ln() - norm.ln();
            assert!((g[o].ln() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_mean_of_disjoint_rows_is_degenerate() {
        assert!(matches!(
            geometric_mean(&[1.0, 0.0], &[0.0, 1.0], 0.5),
            Err(Error::DegenerateAnchor)
        ));
        assert!(geometric_mean(&[0.5, 0.5], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn renyi_vanishes_for_equal_policies() {
        let w = world5();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pi = random::policy(&mut rng, &w);
        let r = renyi_correction(&w, &pi, &pi, 0.4, "q0").unwrap();
        assert!(r.d_success.abs() < 1e-15 && r.d_failure.abs() < 1e-15);
        assert!(r.delta_r.abs() < 1e-15);
    }

    #[test]
    fn mismatched_failures_give_positive_correction() {
        let w = world5();
        // successes at 0 and 2, same conditional in both rows
        let a = ConditionalPolicy::new(&w, vec![vec![0.2, 0.1, 0.2, 0.3, 0.2]]).unwrap();
        let b = ConditionalPolicy::new(&w, vec![vec![0.1, 0.5, 0.1, 0.05, 0.25]]).unwrap();
        let r = renyi_correction(&w, &a, &b, 0.5, "q0").unwrap();
        assert!(r.d_success.abs() < 1e-15);
        assert!(r.delta_r > 0.0);
        assert!(r.successes_closer());
    }

    #[test]
    fn renyi_needs_defined_conditionals() {
        let w = world5();
        let a = ConditionalPolicy::new(&w, vec![vec![0.0, 0.5, 0.0, 0.25, 0.25]]).unwrap();
        let b = ConditionalPolicy::uniform(&w);
        assert!(matches!(
            renyi_correction(&w, &a, &b, 0.5, "q0"),
            Err(Error::ConditionalUndefined(Side::Success))
        ));
        let c = ConditionalPolicy::new(&w, vec![vec![0.5, 0.0, 0.5, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            renyi_correction(&w, &b, &c, 0.5, "q0"),
            Err(Error::ConditionalUndefined(Side::Failure))
        ));
    }

    #[test]
    fn renyi_matches_power_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..9);
            let p = random::row(&mut rng, n);
            let q = random::row(&mut rng, n);
            let alpha = rng.gen_range(0.01..0.99);
            let mut s = 0.0;
            for i in 0..n {
                s += p[i].powf(alpha) * q[i].powf(1.0 - alpha);
            }
            let brute = s.ln() / (alpha - 1.0);
            assert!((renyi_divergence(&p, &q, alpha) - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn two_kl_alpha_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random::world(&mut rng, 1, 3, 8);
        let pi_ref = random::policy(&mut rng, &w);
        let pi_prev = random::policy(&mut rng, &w);
        let near_ref = VariantSpec::two_kl(1.0 - 1e-12, stab(), 0.9).unwrap();
        let near_mirror = VariantSpec::two_kl(1e-12, stab(), 0.9).unwrap();
        let r = VariantSpec::reference(stab(), 0.9).unwrap();
        let m = VariantSpec::mirror(stab(), 0.9).unwrap();
        let (a, _) = two_kl_step(&w, &pi_ref, &pi_prev, &near_ref, "q0").unwrap();
        let b = grpo_step(&w, &pi_ref, &pi_prev, &r, "q0").unwrap();
        assert!(tv_rows(&a.row, &b.row).unwrap() < 1e-8);
        let (c, _) = two_kl_step(&w, &pi_ref, &pi_prev, &near_mirror, "q0").unwrap();
        let d = mirror_step(&w, &pi_prev, &m, "q0").unwrap();
        assert!(tv_rows(&c.row, &d.row).unwrap() < 1e-8);
    }

    #[test]
    fn two_kl_recurrence_with_reported_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random::world(&mut rng, 1, 3, 8);
        let pi_ref = random::policy(&mut rng, &w);
        let v = VariantSpec::two_kl(0.4, stab(), 1.5).unwrap();
        let ev = evolve(&w, &pi_ref, &v, 30).unwrap();
        let p_ref = pos(&w, &pi_ref, "q0").unwrap();
        for n in 1..ev.policies.len() {
            let prev = pos(&w, &ev.policies[n - 1], "q0").unwrap();
            let cur = pos(&w, &ev.policies[n], "q0").unwrap();
            let report = renyi_correction(&w, &pi_ref, &ev.policies[n - 1], 0.4, "q0").unwrap();
            let predicted = pos_map(&v, p_ref, prev, Some(report.delta_r)).unwrap();
            assert!((cur - predicted).abs() < 1e-10, "step {n}: {cur} vs {predicted}");
        }
    }

    #[test]
    fn contraction_half_alpha_one_step() {
        let report = logodds_contraction_check(&[2.0, 1.5], &[0.5], 0.0, 0.5, 1e-12).unwrap();
        assert_eq!(report.factor, 0.5);
        assert_eq!(report.residuals, vec![Some(0.0)]);
        assert!(report.holds);
    }

    #[test]
    fn contraction_geometric_series_for_mean_only() {
        // Matched conditionals and mean-only weights: L_n - L_ref = (1/β)(1 - (1-α)^n)/α.
        let w = world5();
        let pi_ref = ConditionalPolicy::new(&w, vec![vec![0.1, 0.3, 0.2, 0.3, 0.1]]).unwrap();
        let (alpha, beta) = (0.3, 2.0);
        let v = VariantSpec::two_kl(alpha, WeightScheme::mean_only(), beta).unwrap();
        let ev = evolve(&w, &pi_ref, &v, 25).unwrap();
        let l_ref = logit(pos(&w, &pi_ref, "q0").unwrap());
        let logits: Vec<f64> = ev.records.iter().map(|r| r.logit).collect();
        for (n, l) in logits.iter().enumerate() {
            let closed = (1.0 / beta) * (1.0 - (1.0 - alpha).powi(n as i32)) / alpha;
            assert!((l - l_ref - closed).abs() < 1e-10, "n = {n}");
        }
        let drives: Vec<f64> = ev.records[1..]
            .iter()
            .map(|r| r.delta_r.unwrap() + 1.0 / beta)
            .collect();
        let report = logodds_contraction_check(&logits, &drives, l_ref, alpha, 1e-10).unwrap();
        assert!(report.holds, "{report:?}");
        assert!(logits.iter().all(|l| *l >= l_ref - 1e-12));
    }

    #[test]
    fn contraction_skips_boundaries() {
        let report = logodds_contraction_check(
            &[0.0, f64::INFINITY, 1.0],
            &[1.0, 1.0],
            0.0,
            0.5,
            1e-10,
        )
        .unwrap();
        assert_eq!(report.skipped, vec![1, 2]);
        assert!(logodds_contraction_check(&[0.0], &[1.0], 0.0, 0.5, 1e-10).is_err());
    }

    #[test]
    fn mismatched_failure_side_gives_positive_correction_every_step() {
        let w = FiniteWorld::single(&[1, 1, 0, 0]).unwrap();
        let pi_ref = ConditionalPolicy::new(&w, vec![vec![0.1, 0.3, 0.3, 0.3]]).unwrap();
        // Same success conditional (1:3), different failure conditional.
        let pi_0 = ConditionalPolicy::new(&w, vec![vec![0.05, 0.15, 0.7, 0.1]]).unwrap();
        let v = VariantSpec::two_kl(0.5, stab(), 1.0).unwrap();
        let ev = evolve_from(&w, &pi_ref, &pi_0, &v, 20).unwrap();
        for r in ev.records.iter().skip(1) {
            assert!(r.delta_r.unwrap() > 0.0, "{r:?}");
        }
        // Starting from the reference, the correction vanishes.
        let flat = evolve(&w, &pi_ref, &v, 5).unwrap();
        assert!(flat.records.iter().skip(1).all(|r| r.delta_r.unwrap().abs() < 1e-15));
    }

    #[test]
    fn evolve_pins_certain_prompt() {
        let text = r#"{"prompts":[
            {"id":"sure","weight":0.5,"outcomes":["a","b"],"rewards":[1,0],"policy":[1.0,0.0]},
            {"id":"open","weight":0.5,"outcomes":["a","b","c"],"rewards":[1,0,0],"policy":[0.2,0.3,0.5]}
        ]}"#;
        let (w, pi) = FiniteWorld::from_json(text).unwrap();
        let pi = pi.unwrap();
        for v in [
            VariantSpec::reference(stab(), 1.0).unwrap(),
            VariantSpec::mirror(stab(), 1.0).unwrap(),
            VariantSpec::two_kl(0.5, stab(), 1.0).unwrap(),
        ] {
            let ev = evolve(&w, &pi, &v, 10).unwrap();
            assert!(ev.records.iter().filter(|r| r.prompt == "sure").all(|r| r.pos == 1.0));
        }
    }

    proptest! {
        #[test]
        fn tilt_preserves_class_conditionals(seed in any::<u64>(), plus in 0.0f64..5.0, minus in 0.0f64..5.0, beta in 0.05f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random::world(&mut rng, 1, 2, 8);
            let anchor = random::policy(&mut rng, &w);
            let s = w.prompts()[0].success();
            let out = tilt_row(anchor.row(0), s, plus, minus, beta);
            let a = split_row(anchor.row(0), s);
            let b = split_row(&out.row, s);
            prop_assert!(tv_rows(&a.success_conditional.unwrap(), &b.success_conditional.unwrap()).unwrap() < 1e-12);
            prop_assert!(tv_rows(&a.failure_conditional.unwrap(), &b.failure_conditional.unwrap()).unwrap() < 1e-12);
        }

        #[test]
        fn renyi_nonnegative_and_zero_on_diagonal(seed in any::<u64>(), alpha in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..9);
            let p = random::row(&mut rng, n);
            let q = random::row(&mut rng, n);
            prop_assert!(renyi_divergence(&p, &q, alpha) >= 0.0);
            prop_assert!(renyi_divergence(&p, &p, alpha) < 1e-14);
        }

        #[test]
        fn mirror_improves_on_random_worlds(seed in any::<u64>(), beta in 0.05f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random::world(&mut rng, 3, 2, 8);
            let pi = random::policy(&mut rng, &w);
            let v = VariantSpec::mirror(stab(), beta).unwrap();
            let ev = evolve(&w, &pi, &v, 5).unwrap();
            for prompt in w.prompts() {
                // PoS saturates in f64 long before the log-odds do.
                let ls: Vec<f64> = ev.records.iter().filter(|r| r.prompt == prompt.id()).map(|r| r.logit).collect();
                for pair in ls.windows(2) {
                    prop_assert!(pair[1] > pair[0] || pair[1] == f64::INFINITY, "{pair:?}");
                }
            }
        }
    }

    use rand::Rng;
}
