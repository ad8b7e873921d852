//! Finite prompt/outcome worlds and conditional policies over them.
//!
//! Outcome sets are ordered, so every policy row for a prompt indexes the
//! same outcomes in the same order. Prompt ids are opaque strings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row sums further than this from one are rejected at construction.
pub const NORMALIZATION_SLACK: f64 = 1e-9;

/// Prompt weights must sum to one within this tolerance.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// On-disk form of a world. A prompt entry may carry a `policy` row, which
/// is how policy snapshots are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub prompts: Vec<PromptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub id: String,
    pub weight: f64,
    pub outcomes: Vec<String>,
    pub rewards: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    id: String,
    weight: f64,
    outcomes: Vec<String>,
    success: Vec<bool>,
}

impl Prompt {
    pub fn new(
        id: impl Into<String>,
        weight: f64,
        outcomes: Vec<String>,
        rewards: &[u8],
    ) -> Result<Self> {
        let id = id.into();
        if outcomes.is_empty() {
            return Err(Error::InvalidWorld(format!("prompt `{id}` has no outcomes")));
        }
        if outcomes.len() != rewards.len() {
            return Err(Error::InvalidWorld(format!(
                "prompt `{id}`: {} outcomes but {} rewards",
                outcomes.len(),
                rewards.len()
            )));
        }
        let success = rewards
            .iter()
            .map(|&r| match r {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidWorld(format!(
                    "prompt `{id}`: reward {other} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidWorld(format!(
                "prompt `{id}`: weight {weight} must be finite and nonnegative"
            )));
        }
        Ok(Prompt {
            id,
            weight,
            outcomes,
            success,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    /// Reward indicator per outcome (`true` means r(q,o) = 1).
    pub fn success(&self) -> &[bool] {
        &self.success
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteWorld {
    prompts: Vec<Prompt>,
}

impl FiniteWorld {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidWorld("world has no prompts".into()));
        }
        for (i, p) in prompts.iter().enumerate() {
            if prompts[..i].iter().any(|o| o.id == p.id) {
                return Err(Error::InvalidWorld(format!("duplicate prompt id `{}`", p.id)));
            }
        }
        let total: f64 = prompts.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidWorld(format!(
                "prompt weights sum to {total}, expected 1"
            )));
        }
        Ok(FiniteWorld { prompts })
    }

    /// Single-prompt world, handy for scalar experiments.
    pub fn single(rewards: &[u8]) -> Result<Self> {
        let outcomes = (0..rewards.len()).map(|i| format!("o{i}")).collect();
        FiniteWorld::new(vec![Prompt::new("q0", 1.0, outcomes, rewards)?])
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn index_of(&self, q: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p.id == q)
            .ok_or_else(|| Error::UnknownPrompt(q.to_string()))
    }

    pub fn prompt(&self, q: &str) -> Result<&Prompt> {
        Ok(&self.prompts[self.index_of(q)?])
    }

    /// Parses a world file; the second element is the policy assembled from
    /// the per-prompt `policy` rows when every prompt carries one.
    pub fn from_file(file: &WorldFile) -> Result<(Self, Option<ConditionalPolicy>)> {
        let prompts = file
            .prompts
            .iter()
            .map(|e| Prompt::new(e.id.clone(), e.weight, e.outcomes.clone(), &e.rewards))
            .collect::<Result<Vec<_>>>()?;
        let world = FiniteWorld::new(prompts)?;
        let with_policy = file.prompts.iter().filter(|e| e.policy.is_some()).count();
        let policy = match with_policy {
            0 => None,
            n if n == file.prompts.len() => {
                let rows = file
                    .prompts
                    .iter()
                    .map(|e| e.policy.clone().unwrap_or_default())
                    .collect();
                Some(ConditionalPolicy::new(&world, rows)?)
            }
            _ => {
                return Err(Error::InvalidWorld(
                    "either every prompt or no prompt may carry a policy row".into(),
                ))
            }
        };
        Ok((world, policy))
    }

    pub fn to_file(&self, policy: Option<&ConditionalPolicy>) -> WorldFile {
        WorldFile {
            prompts: self
                .prompts
                .iter()
                .enumerate()
                .map(|(i, p)| PromptEntry {
                    id: p.id.clone(),
                    weight: p.weight,
                    outcomes: p.outcomes.clone(),
                    rewards: p.success.iter().map(|&s| u8::from(s)).collect(),
                    policy: policy.map(|pi| pi.rows[i].clone()),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<ConditionalPolicy>)> {
        let file: WorldFile = serde_json::from_str(text)?;
        FiniteWorld::from_file(&file)
    }

    pub fn to_json(&self, policy: Option<&ConditionalPolicy>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(policy))?)
    }
}

/// One probability row per prompt, each over that prompt's outcome set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPolicy {
    rows: Vec<Vec<f64>>,
}

impl ConditionalPolicy {
    /// Validates shape and normalization. Rows within
    /// [`NORMALIZATION_SLACK`] of one are renormalized; others are rejected.
    pub fn new(world: &FiniteWorld, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != world.len() {
            return Err(Error::ShapeMismatch(format!(
                "policy has {} rows, world has {} prompts",
                rows.len(),
                world.len()
            )));
        }
        let rows = rows
            .into_iter()
            .zip(world.prompts())
            .map(|(row, prompt)| normalize_row(row, prompt))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionalPolicy { rows })
    }

    pub fn uniform(world: &FiniteWorld) -> Self {
        let rows = world
            .prompts()
            .iter()
            .map(|p| vec![1.0 / p.len() as f64; p.len()])
            .collect();
        ConditionalPolicy { rows }
    }

    /// Assembles rows that are already normalized (update outputs). Only
    /// checked in debug builds.
    pub(crate) fn from_rows_unchecked(rows: Vec<Vec<f64>>) -> Self {
        debug_assert!(rows
            .iter()
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        ConditionalPolicy { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index]
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    pub fn fits(&self, world: &FiniteWorld) -> bool {
        self.rows.len() == world.len()
            && self
                .rows
                .iter()
                .zip(world.prompts())
                .all(|(r, p)| r.len() == p.len())
    }

    pub(crate) fn check_fits(&self, world: &FiniteWorld) -> Result<()> {
        if self.fits(world) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("policy does not match world".into()))
        }
    }
}

fn normalize_row(mut row: Vec<f64>, prompt: &Prompt) -> Result<Vec<f64>> {
    if row.len() != prompt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prompt `{}`: row has {} entries for {} outcomes",
            prompt.id,
            row.len(),
            prompt.len()
        )));
    }
    if let Some(bad) = row.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidPolicy(format!(
            "prompt `{}`: entry {bad} is not a probability",
            prompt.id
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_SLACK {
        return Err(Error::InvalidPolicy(format!(
            "prompt `{}`: row sums to {sum}",
            prompt.id
        )));
    }
    if sum != 1.0 {
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(row)
}

/// Success/failure decomposition of one policy row.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessSplit {
    pub p: f64,
    /// `π(o)·1{r=1}/p` over the full outcome set, `None` when `p = 0`.
    pub success_conditional: Option<Vec<f64>>,
    /// `π(o)·1{r=0}/(1-p)` over the full outcome set, `None` when `p = 1`.
    pub failure_conditional: Option<Vec<f64>>,
}

impl SuccessSplit {
    pub fn conditional(&self, side: crate::Side) -> Result<&[f64]> {
        let c = match side {
            crate::Side::Success => &self.success_conditional,
            crate::Side::Failure => &self.failure_conditional,
        };
        c.as_deref().ok_or(Error::ConditionalUndefined(side))
    }
}

pub fn success_mass(row: &[f64], success: &[bool]) -> f64 {
    row.iter()
        .zip(success)
        .filter(|(_, &s)| s)
        .map(|(x, _)| x)
        .sum::<f64>()
        .min(1.0)
}

pub fn failure_mass(row: &[f64], success: &[bool]) -> f64 {
    row.iter()
        .zip(success)
        .filter(|(_, &s)| !s)
        .map(|(x, _)| x)
        .sum::<f64>()
        .min(1.0)
}

/// Log-odds of success computed from the two class masses separately, which
/// keeps precision when the PoS is close to 0 or 1.
pub fn log_odds(row: &[f64], success: &[bool]) -> f64 {
    let s = success_mass(row, success);
    let f = failure_mass(row, success);
    match (s > 0.0, f > 0.0) {
        (true, true) => s.ln() - f.ln(),
        (false, _) => f64::NEG_INFINITY,
        (true, false) => f64::INFINITY,
    }
}

pub fn split_row(row: &[f64], success: &[bool]) -> SuccessSplit {
    let p = success_mass(row, success);
    let f = failure_mass(row, success);
    let conditional = |mass: f64, want: bool| {
        (mass > 0.0).then(|| {
            row.iter()
                .zip(success)
                .map(|(x, &s)| if s == want { x / mass } else { 0.0 })
                .collect()
        })
    };
    SuccessSplit {
        p,
        success_conditional: conditional(p, true),
        failure_conditional: conditional(f, false),
    }
}

pub fn tv_rows(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "rows of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Probability of success of `policy` at prompt `q`.
pub fn pos(world: &FiniteWorld, policy: &ConditionalPolicy, q: &str) -> Result<f64> {
    policy.check_fits(world)?;
    let i = world.index_of(q)?;
    Ok(success_mass(policy.row(i), world.prompts()[i].success()))
}

pub fn split(world: &FiniteWorld, policy: &ConditionalPolicy, q: &str) -> Result<SuccessSplit> {
    policy.check_fits(world)?;
    let i = world.index_of(q)?;
    Ok(split_row(policy.row(i), world.prompts()[i].success()))
}

pub fn total_variation(
    world: &FiniteWorld,
    a: &ConditionalPolicy,
    b: &ConditionalPolicy,
    q: &str,
) -> Result<f64> {
    a.check_fits(world)?;
    b.check_fits(world)?;
    let i = world.index_of(q)?;
    tv_rows(a.row(i), b.row(i))
}

/// `ln(p/(1-p))`, with `logit(0) = -inf` and `logit(1) = +inf`.
pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        p.ln() - (-p).ln_1p()
    }
}

/// Logistic function on the extended line; exact 0 and 1 at the infinities.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(e^a + e^b)` on the extended line.
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Random worlds and policies for property tests and verification suites.
pub mod random {
    use super::*;

    /// A world with `prompts` prompts and between `min_outcomes` and
    /// `max_outcomes` outcomes each. Every prompt gets at least one success
    /// and one failure when it has two or more outcomes.
    pub fn world<R: Rng>(
        rng: &mut R,
        prompts: usize,
        min_outcomes: usize,
        max_outcomes: usize,
    ) -> FiniteWorld {
        let raw: Vec<f64> = (0..prompts).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let head: f64 = weights[..prompts - 1].iter().sum();
        weights[prompts - 1] = 1.0 - head;
        let list = (0..prompts)
            .map(|i| {
                let n = rng.gen_range(min_outcomes..=max_outcomes);
                let mut rewards: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
                if n >= 2 {
                    let a = rng.gen_range(0..n);
                    let mut b = rng.gen_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    rewards[a] = 1;
                    rewards[b] = 0;
                }
                let outcomes = (0..n).map(|j| format!("o{j}")).collect();
                Prompt::new(format!("q{i}"), weights[i], outcomes, &rewards)
                    .expect("generated prompt is valid")
            })
            .collect();
        FiniteWorld::new(list).expect("generated world is valid")
    }

    /// Strictly positive row drawn from a flat Dirichlet.
    pub fn row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3)
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|x| x / total).collect()
    }

    pub fn policy<R: Rng>(rng: &mut R, world: &FiniteWorld) -> ConditionalPolicy {
        let rows = world.prompts().iter().map(|p| row(rng, p.len())).collect();
        ConditionalPolicy::new(world, rows).expect("generated policy is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn four_outcomes_one_success() -> FiniteWorld {
        FiniteWorld::single(&[1, 0, 0, 0]).unwrap()
    }

    #[test]
    fn uniform_pos_is_quarter() {
        let w = four_outcomes_one_success();
        let pi = ConditionalPolicy::uniform(&w);
        assert_eq!(pos(&w, &pi, "q0").unwrap(), 0.25);
    }

    #[test]
    fn failure_point_mass_has_zero_pos() {
        let w = four_outcomes_one_success();
        let pi = ConditionalPolicy::new(&w, vec![vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(pos(&w, &pi, "q0").unwrap(), 0.0);
    }

    #[test]
    fn pos_matches_enumeration_on_random_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = FiniteWorld::single(&[0, 1, 0, 0, 1, 0]).unwrap();
        let pi = random::policy(&mut rng, &w);
        let row = pi.row(0);
        let mut expected = 0.0;
        for (o, x) in row.iter().enumerate() {
            if o == 1 || o == 4 {
                expected += x;
            }
        }
        assert!((pos(&w, &pi, "q0").unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn unknown_prompt_is_an_error() {
        let w = four_outcomes_one_success();
        let pi = ConditionalPolicy::uniform(&w);
        assert!(matches!(pos(&w, &pi, "nope"), Err(Error::UnknownPrompt(_))));
    }

    #[test]
    fn split_of_indicator_policy() {
        let w = FiniteWorld::single(&[1, 0, 1, 0]).unwrap();
        let pi = ConditionalPolicy::new(&w, vec![vec![0.5, 0.0, 0.5, 0.0]]).unwrap();
        let s = split(&w, &pi, "q0").unwrap();
        assert_eq!(s.p, 1.0);
        assert_eq!(s.success_conditional.unwrap(), vec![0.5, 0.0, 0.5, 0.0]);
        assert!(s.failure_conditional.is_none());

        let skewed = ConditionalPolicy::new(&w, vec![vec![0.6, 0.0, 0.4, 0.0]]).unwrap();
        let s = split(&w, &skewed, "q0").unwrap();
        assert_ne!(s.success_conditional.unwrap()[0], 0.5);
    }

    #[test]
    fn split_with_no_success_mass() {
        let w = FiniteWorld::single(&[1, 0, 0]).unwrap();
        let pi = ConditionalPolicy::new(&w, vec![vec![0.0, 0.3, 0.7]]).unwrap();
        let s = split(&w, &pi, "q0").unwrap();
        assert_eq!(s.p, 0.0);
        assert!(s.success_conditional.is_none());
        assert!(matches!(
            s.conditional(crate::Side::Success),
            Err(Error::ConditionalUndefined(crate::Side::Success))
        ));
        let f = s.failure_conditional.unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_identity_and_disjoint() {
        let w = four_outcomes_one_success();
        let a = ConditionalPolicy::new(&w, vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let b = ConditionalPolicy::new(&w, vec![vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(total_variation(&w, &a, &a, "q0").unwrap(), 0.0);
        assert_eq!(total_variation(&w, &a, &b, "q0").unwrap(), 1.0);
    }

    #[test]
    fn tv_random_pair_matches_half_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = FiniteWorld::single(&[1, 0, 0, 1, 0]).unwrap();
        let a = random::policy(&mut rng, &w);
        let b = random::policy(&mut rng, &w);
        let mut l1 = 0.0;
        for i in 0..5 {
            l1 += (a.row(0)[i] - b.row(0)[i]).abs();
        }
        assert!((total_variation(&w, &a, &b, "q0").unwrap() - l1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn tv_shape_mismatch() {
        assert!(matches!(tv_rows(&[1.0], &[0.5, 0.5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn logit_sigmoid_basics() {
        assert_eq!(logit(0.5), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(logit(0.2)) - 0.2).abs() < 1e-12);
        assert_eq!(logit(0.0), f64::NEG_INFINITY);
        assert_eq!(logit(1.0), f64::INFINITY);
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
    }

    #[test]
    fn construction_renormalizes_small_drift_only() {
        let w = FiniteWorld::single(&[1, 0]).unwrap();
        let pi = ConditionalPolicy::new(&w, vec![vec![0.5, 0.5 + 5e-10]]).unwrap();
        assert!((pi.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ConditionalPolicy::new(&w, vec![vec![0.5, 0.6]]).is_err());
        assert!(ConditionalPolicy::new(&w, vec![vec![1.5, -0.5]]).is_err());
        assert!(ConditionalPolicy::new(&w, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn world_validation() {
        assert!(Prompt::new("q", 1.0, vec!["a".into()], &[2]).is_err());
        assert!(Prompt::new("q", 1.0, vec![], &[]).is_err());
        let a = Prompt::new("q", 0.5, vec!["a".into()], &[1]).unwrap();
        assert!(FiniteWorld::new(vec![a.clone()]).is_err());
        assert!(FiniteWorld::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn json_round_trip_with_policy() {
        let text = r#"{"prompts":[
            {"id":"a","weight":0.25,"outcomes":["x","y"],"rewards":[1,0],"policy":[0.2,0.8]},
            {"id":"b","weight":0.75,"outcomes":["u","v","w"],"rewards":[0,0,1],"policy":[0.1,0.2,0.7]}
        ]}"#;
        let (w, pi) = FiniteWorld::from_json(text).unwrap();
        let pi = pi.unwrap();
        assert_eq!(pos(&w, &pi, "b").unwrap(), 0.7);
        let again = w.to_json(Some(&pi)).unwrap();
        let (w2, pi2) = FiniteWorld::from_json(&again).unwrap();
        assert_eq!(w, w2);
        assert_eq!(Some(pi), pi2);
    }

    #[test]
    fn json_rejects_partial_policies() {
        let text = r#"{"prompts":[
            {"id":"a","weight":0.5,"outcomes":["x","y"],"rewards":[1,0],"policy":[0.2,0.8]},
            {"id":"b","weight":0.5,"outcomes":["u"],"rewards":[0]}
        ]}"#;
        assert!(FiniteWorld::from_json(text).is_err());
    }

    proptest! {
        #[test]
        fn pos_plus_failure_is_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random::world(&mut rng, 3, 1, 8);
            let pi = random::policy(&mut rng, &w);
            for (i, p) in w.prompts().iter().enumerate() {
                let s = success_mass(pi.row(i), p.success());
                let f = failure_mass(pi.row(i), p.success());
                prop_assert!((s + f - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn split_reconstructs_policy(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random::world(&mut rng, 2, 2, 8);
            let pi = random::policy(&mut rng, &w);
            for (i, p) in w.prompts().iter().enumerate() {
                let s = split_row(pi.row(i), p.success());
                let sc = s.success_conditional.unwrap();
                let fc = s.failure_conditional.unwrap();
                for o in 0..p.len() {
                    let rebuilt = s.p * sc[o] + (1.0 - s.p) * fc[o];
                    prop_assert!((rebuilt - pi.row(i)[o]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn tv_is_a_metric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random::world(&mut rng, 1, 2, 8);
            let a = random::policy(&mut rng, &w);
            let b = random::policy(&mut rng, &w);
            let c = random::policy(&mut rng, &w);
            let ab = tv_rows(a.row(0), b.row(0)).unwrap();
            let ba = tv_rows(b.row(0), a.row(0)).unwrap();
            let bc = tv_rows(b.row(0), c.row(0)).unwrap();
            let ac = tv_rows(a.row(0), c.row(0)).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab > 0.0);
            prop_assert!(ac <= ab + bc + 1e-15);
            prop_assert_eq!(tv_rows(a.row(0), a.row(0)).unwrap(), 0.0);
        }

        #[test]
        fn logit_round_trip(p in 1e-9f64..(1.0 - 1e-9)) {
            prop_assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
