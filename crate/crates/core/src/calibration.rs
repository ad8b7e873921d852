//! Reward calibration for binary rewards.
//!
//! With r ∈ {0,1} and old-policy success probability p, every calibration
//! scheme collapses to two weights: successes get `+ω⁺(p)`, failures get
//! `-ω⁻(p)`. Their sum `Ω(p) = ω⁺(p) + ω⁻(p)` is the per-step log-odds drive
//! (before dividing by β).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `(r - p)/sqrt(p(1-p))`. Undefined at p ∈ {0,1}; diagnostics only.
    Whitened,
    /// `(r - p)/sqrt(p(1-p) + ε)`.
    MeanVar,
    /// `r - p`.
    MeanOnly,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitened" => Ok(Normalization::Whitened),
            "meanvar" | "mean-var" | "stabilized" => Ok(Normalization::MeanVar),
            "mean" | "mean-only" => Ok(Normalization::MeanOnly),
            other => Err(Error::InvalidParameter(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    kind: Normalization,
    epsilon: f64,
}

impl WeightScheme {
    pub fn new(kind: Normalization, epsilon: f64) -> Result<Self> {
        if kind == Normalization::MeanVar && !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "stabilized weights need epsilon in (0, 1], got {epsilon}"
            )));
        }
        Ok(WeightScheme { kind, epsilon })
    }

    pub fn stabilized(epsilon: f64) -> Result<Self> {
        WeightScheme::new(Normalization::MeanVar, epsilon)
    }

    pub fn mean_only() -> Self {
        WeightScheme {
            kind: Normalization::MeanOnly,
            epsilon: 0.0,
        }
    }

    pub fn whitened() -> Self {
        WeightScheme {
            kind: Normalization::Whitened,
            epsilon: 0.0,
        }
    }

    pub fn kind(&self) -> Normalization {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `(ω⁺(p), ω⁻(p))`.
    pub fn weights(&self, p: f64) -> Result<(f64, f64)> {
        check_probability(p)?;
        match self.kind {
            Normalization::Whitened => {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::ZeroVariance(p));
                }
                Ok((((1.0 - p) / p).sqrt(), (p / (1.0 - p)).sqrt()))
            }
            Normalization::MeanVar => {
                let s = (p * (1.0 - p) + self.epsilon).sqrt();
                Ok(((1.0 - p) / s, p / s))
            }
            Normalization::MeanOnly => Ok((1.0 - p, p)),
        }
    }

    pub fn advantage(&self, p: f64, success: bool) -> Result<f64> {
        let (plus, minus) = self.weights(p)?;
        Ok(if success { plus } else { -minus })
    }

    /// Total weight `Ω(p)`.
    pub fn omega(&self, p: f64) -> Result<f64> {
        check_probability(p)?;
        match self.kind {
            Normalization::Whitened => {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::ZeroVariance(p));
                }
                Ok(1.0 / (p * (1.0 - p)).sqrt())
            }
            Normalization::MeanVar => Ok(1.0 / (p * (1.0 - p) + self.epsilon).sqrt()),
            Normalization::MeanOnly => Ok(1.0),
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")))
    }
}

pub fn advantage(scheme: &WeightScheme, p: f64, success: bool) -> Result<f64> {
    scheme.advantage(p, success)
}

pub fn omega(scheme: &WeightScheme, p: f64) -> Result<f64> {
    scheme.omega(p)
}

/// `β·sqrt(p(1-p) + ε)`: the β under which mean-only weights produce the same
/// log-odds step as stabilized weights at β.
pub fn effective_beta(beta: f64, p: f64, epsilon: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    check_probability(p)?;
    Ok(beta * (p * (1.0 - p) + epsilon).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitened_symmetric_bernoulli() {
        let w = WeightScheme::whitened();
        assert_eq!(w.advantage(0.5, true).unwrap(), 1.0);
        assert_eq!(w.advantage(0.5, false).unwrap(), -1.0);
    }

    #[test]
    fn whitened_at_point_eight() {
        let w = WeightScheme::whitened();
        let expected = (0.2f64 / 0.8).sqrt();
        assert!((w.advantage(0.8, true).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-15);
    }

    #[test]
    fn whitened_rejects_degenerate_variance() {
        let w = WeightScheme::whitened();
        assert!(matches!(w.advantage(0.0, true), Err(Error::ZeroVariance(_))));
        assert!(matches!(w.advantage(1.0, false), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn mean_only_linear_weights() {
        let w = WeightScheme::mean_only();
        assert!((w.advantage(0.3, true).unwrap() - 0.7).abs() < 1e-15);
        assert!((w.advantage(0.3, false).unwrap() + 0.3).abs() < 1e-15);
        for p in [0.0, 0.1, 0.77, 1.0] {
            assert_eq!(w.omega(p).unwrap(), 1.0);
        }
    }

    #[test]
    fn stabilized_omega_values() {
        let tiny = WeightScheme::stabilized(1e-300).unwrap();
        assert!((tiny.omega(0.5).unwrap() - 2.0).abs() < 1e-14);
        let w = WeightScheme::stabilized(1e-5).unwrap();
        let direct = 1.0 / (0.25001f64).sqrt();
        assert!((w.omega(0.5).unwrap() - direct).abs() < 1e-15);
        assert!((direct - 1.99996).abs() < 1e-5);
    }

    #[test]
    fn stabilized_requires_positive_epsilon() {
        assert!(WeightScheme::stabilized(0.0).is_err());
        assert!(WeightScheme::stabilized(1.5).is_err());
        assert!(WeightScheme::stabilized(1.0).is_ok());
    }

    #[test]
    fn effective_beta_values() {
        assert_eq!(effective_beta(1.0, 0.5, 0.0).unwrap(), 0.5);
        let eb = effective_beta(2.0, 0.0, 1e-5).unwrap();
        assert!((eb - 2.0 * 1e-5f64.sqrt()).abs() < 1e-18);
        let eb = effective_beta(2.0, 1.0, 1e-5).unwrap();
        assert!((eb - 2.0 * 1e-5f64.sqrt()).abs() < 1e-18);
        assert!(effective_beta(0.0, 0.5, 1e-5).is_err());
        assert!(effective_beta(-1.0, 0.5, 1e-5).is_err());
    }

    #[test]
    fn stabilized_approaches_whitened() {
        let whitened = WeightScheme::whitened();
        let mut last = f64::INFINITY;
        for k in 2..=10 {
            let eps = 10f64.powi(-k);
            let s = WeightScheme::stabilized(eps).unwrap();
            let mut worst = 0.0f64;
            for i in 0..=80 {
                let p = 0.1 + 0.01 * i as f64;
                let (a, b) = s.weights(p).unwrap();
                let (c, d) = whitened.weights(p).unwrap();
                worst = worst.max((a - c).abs()).max((b - d).abs());
            }
            assert!(worst < last, "eps {eps}: {worst} !< {last}");
            last = worst;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn parse_normalization() {
        assert_eq!("meanvar".parse::<Normalization>().unwrap(), Normalization::MeanVar);
        assert_eq!("mean".parse::<Normalization>().unwrap(), Normalization::MeanOnly);
        assert!("bogus".parse::<Normalization>().is_err());
    }

    proptest! {
        #[test]
        fn weights_nonnegative_and_sum_to_omega(p in 0.0f64..=1.0, eps in 1e-10f64..1.0) {
            for scheme in [WeightScheme::stabilized(eps).unwrap(), WeightScheme::mean_only()] {
                let (a, b) = scheme.weights(p).unwrap();
                prop_assert!(a >= 0.0 && b >= 0.0);
                prop_assert!((a + b - scheme.omega(p).unwrap()).abs() < 1e-12 * scheme.omega(p).unwrap().max(1.0));
            }
        }

        #[test]
        fn stabilized_advantage_is_centered_reward(p in 0.0f64..=1.0, eps in 1e-8f64..1.0) {
            let s = WeightScheme::stabilized(eps).unwrap();
            let denom = (p * (1.0 - p) + eps).sqrt();
            for r in [0.0, 1.0] {
                let a = s.advantage(p, r == 1.0).unwrap();
                prop_assert!((a - (r - p) / denom).abs() < 1e-12 * (1.0 / denom).max(1.0));
            }
        }

        #[test]
        fn effective_beta_identity(p in 0.0f64..=1.0, beta in 0.01f64..10.0, eps in 1e-8f64..1.0) {
            let s = WeightScheme::stabilized(eps).unwrap();
            let lhs = 1.0 / effective_beta(beta, p, eps).unwrap();
            let rhs = s.omega(p).unwrap() / beta;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}
