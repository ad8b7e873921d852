//! Scalar probability-of-success dynamics.
//!
//! Every variant advances the success log-odds as
//!
//! ```text
//! logit(p_n) = anchor_logit + Δ_R + Ω(p_{n-1}) / β
//! ```
//!
//! where the anchor logit is `logit(p_ref)` (reference-only), `logit(p_{n-1})`
//! (mirror) or `α·logit(p_ref) + (1-α)·logit(p_{n-1})` (two-KL), and the Rényi
//! correction `Δ_R` is nonzero only for two-KL. All maps live on the extended
//! line, so `p = 0` and `p = 1` are handled as infinite logits.

use serde::{Deserialize, Serialize};

use crate::calibration::{Normalization, WeightScheme};
use crate::par::Execution;
use crate::world::{logit, sigmoid};
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const MIN_GRID: usize = 64;

/// Fixed points must satisfy `|h(p*) - p*|` below this.
pub const FIXED_POINT_RESIDUAL: f64 = 1e-10;
const DEDUP_RADIUS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// KL to the reference policy only.
    Reference,
    /// KL to the previous iterate only.
    Mirror,
    /// `α·KL(π‖π_ref) + (1-α)·KL(π‖π_{n-1})` with `0 < α < 1`.
    TwoKl { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    anchor: Anchor,
    scheme: WeightScheme,
    beta: f64,
}

impl VariantSpec {
    /// `TwoKl` with `α = 1` becomes `Reference`, `α = 0` becomes `Mirror`.
    pub fn new(anchor: Anchor, scheme: WeightScheme, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        if scheme.kind() == Normalization::Whitened {
            return Err(Error::InvalidParameter(
                "iterated dynamics need stabilized or mean-only weights".into(),
            ));
        }
        let anchor = match anchor {
            Anchor::TwoKl { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(Error::InvalidParameter(format!(
                    "alpha must lie in [0, 1], got {alpha}"
                )))
            }
            Anchor::TwoKl { alpha: 1.0 } => Anchor::Reference,
            Anchor::TwoKl { alpha: 0.0 } => Anchor::Mirror,
            other => other,
        };
        Ok(VariantSpec {
            anchor,
            scheme,
            beta,
        })
    }

    pub fn reference(scheme: WeightScheme, beta: f64) -> Result<Self> {
        VariantSpec::new(Anchor::Reference, scheme, beta)
    }

    pub fn mirror(scheme: WeightScheme, beta: f64) -> Result<Self> {
        VariantSpec::new(Anchor::Mirror, scheme, beta)
    }

    pub fn two_kl(alpha: f64, scheme: WeightScheme, beta: f64) -> Result<Self> {
        VariantSpec::new(Anchor::TwoKl { alpha }, scheme, beta)
    }

    pub fn anchor(&self) -> Anchor {
        self.anchor
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.scheme.epsilon()
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.anchor {
            Anchor::TwoKl { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// `(ω⁺(p), ω⁻(p))` under this variant's scheme.
    pub fn weights(&self, p: f64) -> (f64, f64) {
        self.scheme
            .weights(p.clamp(0.0, 1.0))
            .expect("stabilized and mean-only weights are total on [0, 1]")
    }

    /// Log-odds drive `Ω(p)/β`.
    pub fn drive(&self, p: f64) -> f64 {
        let (plus, minus) = self.weights(p);
        (plus + minus) / self.beta
    }

    /// Short label used in data files, e.g. `ref-meanvar`, `twokl0.5-mean`.
    pub fn label(&self) -> String {
        let anchor = match self.anchor {
            Anchor::Reference => "ref".to_string(),
            Anchor::Mirror => "mirror".to_string(),
            Anchor::TwoKl { alpha } => format!("twokl{alpha}"),
        };
        let norm = match self.scheme.kind() {
            Normalization::MeanVar => "meanvar",
            Normalization::MeanOnly => "mean",
            Normalization::Whitened => "whitened",
        };
        format!("{anchor}-{norm}")
    }

    /// Next log-odds from the reference and previous log-odds.
    pub(crate) fn next_logit(
        &self,
        logit_ref: f64,
        logit_prev: f64,
        p_prev: f64,
        renyi_correction: Option<f64>,
    ) -> Result<f64> {
        let base = self.anchor_logit(logit_ref, logit_prev)?;
        let delta = self.correction(renyi_correction)?;
        Ok(base + delta + self.drive(p_prev))
    }

    pub(crate) fn anchor_logit(&self, logit_ref: f64, logit_prev: f64) -> Result<f64> {
        match self.anchor {
            Anchor::Reference => Ok(logit_ref),
            Anchor::Mirror => Ok(logit_prev),
            Anchor::TwoKl { alpha } => {
                let mixed = alpha * logit_ref + (1.0 - alpha) * logit_prev;
                if mixed.is_nan() {
                    Err(Error::DegenerateAnchor)
                } else {
                    Ok(mixed)
                }
            }
        }
    }

    fn correction(&self, renyi_correction: Option<f64>) -> Result<f64> {
        match (self.anchor, renyi_correction) {
            (Anchor::TwoKl { .. }, Some(d)) => Ok(d),
            (Anchor::TwoKl { .. }, None) => Err(Error::MissingRenyiCorrection),
            (_, None) => Ok(0.0),
            (_, Some(_)) => Err(Error::InvalidParameter(
                "a Rényi correction only applies to the two-KL variant".into(),
            )),
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {p} outside [0, 1]")))
    }
}

/// One step of the PoS recurrence.
///
/// `renyi_correction` must be supplied exactly when the variant is two-KL.
pub fn pos_map(
    variant: &VariantSpec,
    p_ref: f64,
    p_prev: f64,
    renyi_correction: Option<f64>,
) -> Result<f64> {
    check_probability("p_ref", p_ref)?;
    check_probability("p_prev", p_prev)?;
    let l = variant.next_logit(logit(p_ref), logit(p_prev), p_prev, renyi_correction)?;
    Ok(sigmoid(l))
}

/// Reference-only map `h(p) = σ(logit(p_ref) + Ω(p)/β)`.
pub fn h(variant: &VariantSpec, p_ref: f64, p: f64) -> f64 {
    sigmoid(logit(p_ref) + variant.drive(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Termination {
    MaxIters,
    Converged { tol: f64 },
    AbsorbedAtBoundary,
    /// `|p_n - p_{n-2}| < tol` while `|p_n - p_{n-1}| > tol`.
    PeriodTwo { tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoSTrajectory {
    pub prompt: Option<String>,
    /// `p_0, p_1, ...`
    pub values: Vec<f64>,
    /// Log-odds carried alongside `values`; exact where `values` saturate.
    pub logits: Vec<f64>,
    /// Additive term applied to the anchor log-odds at each step:
    /// `Ω(p_{n-1})/β + Δ_R`.
    pub logit_increments: Vec<f64>,
    pub terminated_by: Termination,
    /// Set for standalone two-KL runs, which assume `Δ_R = 0`.
    pub conditionals_matched: bool,
}

impl PoSTrajectory {
    pub fn last(&self) -> f64 {
        *self.values.last().expect("trajectory is never empty")
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn converged(&self) -> bool {
        matches!(
            self.terminated_by,
            Termination::Converged { .. } | Termination::AbsorbedAtBoundary
        )
    }

    pub fn strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }
}

/// Iterates the PoS map from `p_0 = p_ref`.
pub fn iterate(variant: &VariantSpec, p_ref: f64, n_steps: usize, tol: f64) -> Result<PoSTrajectory> {
    iterate_from(variant, p_ref, p_ref, n_steps, tol)
}

/// Like [`iterate`] but from an arbitrary starting point `p0`; used for
/// empirical basin checks.
pub fn iterate_from(
    variant: &VariantSpec,
    p_ref: f64,
    p0: f64,
    n_steps: usize,
    tol: f64,
) -> Result<PoSTrajectory> {
    check_probability("p_ref", p_ref)?;
    check_probability("p0", p0)?;
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    let two_kl = matches!(variant.anchor(), Anchor::TwoKl { .. });
    let correction = two_kl.then_some(0.0);
    let logit_ref = logit(p_ref);
    let logit0 = logit(p0);

    let mut values = vec![p0];
    let mut logits = vec![logit0];
    let mut increments = Vec::new();
    // The mirror log-odds is a running sum of drives; compensate it so long
    // arithmetic progressions stay exact to a few ulps.
    let mut mirror_sum = NeumaierSum::default();
    let mut terminated_by = Termination::MaxIters;

    for n in 1..=n_steps {
        let p_prev = values[n - 1];
        let l_prev = logits[n - 1];
        let drive = variant.drive(p_prev);
        let l_next = match variant.anchor() {
            Anchor::Mirror => {
                mirror_sum.add(drive);
                logit0 + mirror_sum.value()
            }
            _ => variant.next_logit(logit_ref, l_prev, p_prev, correction)?,
        };
        let p_next = sigmoid(l_next);
        values.push(p_next);
        logits.push(l_next);
        increments.push(drive + correction.unwrap_or(0.0));

        if p_next == 0.0 || p_next == 1.0 {
            terminated_by = Termination::AbsorbedAtBoundary;
            break;
        }
        if (p_next - p_prev).abs() < tol {
            terminated_by = Termination::Converged { tol };
            break;
        }
        if n >= 2 && (p_next - values[n - 2]).abs() < tol {
            terminated_by = Termination::PeriodTwo { tol };
            break;
        }
    }

    Ok(PoSTrajectory {
        prompt: None,
        values,
        logits,
        logit_increments: increments,
        terminated_by,
        conditionals_matched: two_kl,
    })
}

#[derive(Debug, Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn require_reference(variant: &VariantSpec) -> Result<()> {
    if variant.anchor() == Anchor::Reference {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "fixed-point analysis is defined for the reference-only map".into(),
        ))
    }
}

/// `h'(p) = -h(1-h)(1-2p) / (2β[p(1-p)+ε]^{3/2})` for stabilized weights;
/// zero for mean-only weights, where `h` is constant.
pub fn h_derivative(variant: &VariantSpec, p_ref: f64, p: f64) -> Result<f64> {
    require_reference(variant)?;
    check_probability("p", p)?;
    if variant.scheme().kind() == Normalization::MeanOnly {
        return Ok(0.0);
    }
    let hp = h(variant, p_ref, p);
    let var = p * (1.0 - p) + variant.epsilon();
    Ok(-hp * (1.0 - hp) * (1.0 - 2.0 * p) / (2.0 * variant.beta() * var.powf(1.5)))
}

/// `B(p*) = p*(1-p*)|2p*-1| / (2[p*(1-p*)+ε]^{3/2})`: `β > B(p*)` makes a
/// fixed point locally attracting.
pub fn beta_threshold(p_star: f64, epsilon: f64) -> f64 {
    let v = p_star * (1.0 - p_star);
    v * (2.0 * p_star - 1.0).abs() / (2.0 * (v + epsilon).powf(1.5))
}

/// Samples `(p, B(p))` on a uniform grid of `n + 1` points.
pub fn beta_lower_bound_curve(epsilon: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let p = i as f64 / n as f64;
            (p, beta_threshold(p, epsilon))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointKind {
    /// Sign change of `h(p) - p`, located by bisection.
    Crossing,
    /// `|h(p) - p|` dips below the residual tolerance without a sign change.
    Grazing,
    /// `p* ∈ {0, 1}`.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub p_star: f64,
    pub kind: FixedPointKind,
    pub residual: f64,
    pub derivative: f64,
    pub locally_stable: bool,
    pub beta_threshold: f64,
    pub amplifies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub variant: String,
    pub beta: f64,
    pub p_ref: f64,
    pub epsilon: f64,
    pub fixed_points: Vec<FixedPoint>,
}

impl FixedPointReport {
    pub fn interior(&self) -> impl Iterator<Item = &FixedPoint> {
        self.fixed_points
            .iter()
            .filter(|f| f.p_star > 0.0 && f.p_star < 1.0)
    }

    pub fn smallest(&self) -> f64 {
        self.fixed_points
            .iter()
            .map(|f| f.p_star)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn largest(&self) -> f64 {
        self.fixed_points
            .iter()
            .map(|f| f.p_star)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Locates every fixed point of the reference-only map `h` on `[0, 1]`.
///
/// `g(p) = h(p) - p` is scanned on `grid_size + 1` uniform points merged with
/// `2·grid_size + 1` points uniform in log-odds, which resolve the ε-scale
/// structure of `Ω` next to the boundaries; each sign
/// change is bisected to machine precision, near-zero local minima of `|g|`
/// without a sign change are refined and reported as grazing, and the
/// endpoints are added when `|g|` is below [`FIXED_POINT_RESIDUAL`] there.
pub fn find_fixed_points(
    variant: &VariantSpec,
    p_ref: f64,
    grid_size: usize,
) -> Result<FixedPointReport> {
    require_reference(variant)?;
    check_probability("p_ref", p_ref)?;
    if grid_size < MIN_GRID {
        return Err(Error::InvalidParameter(format!(
            "grid_size must be at least {MIN_GRID}, got {grid_size}"
        )));
    }
    let hmap = |p: f64| h(variant, p_ref, p);
    let g = |p: f64| hmap(p) - p;

    let xs = scan_grid(grid_size);
    let grid_size = xs.len() - 1;
    let gs: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut found: Vec<(f64, FixedPointKind)> = Vec::new();

    for i in 0..xs.len() {
        if gs[i] == 0.0 {
            let kind = if i == 0 || i == grid_size {
                FixedPointKind::Boundary
            } else {
                FixedPointKind::Crossing
            };
            found.push((xs[i], kind));
        }
    }
    for i in 0..grid_size {
        if gs[i] * gs[i + 1] < 0.0 {
            let root = bisect(&g, xs[i], xs[i + 1], gs[i]);
            found.push((polish(&hmap, root), FixedPointKind::Crossing));
        }
    }
    for i in 1..grid_size {
        let a = gs[i].abs();
        let local_min = a <= gs[i - 1].abs() && a <= gs[i + 1].abs() && a > 0.0;
        let same_sign = gs[i - 1] * gs[i] > 0.0 && gs[i] * gs[i + 1] > 0.0;
        if local_min && same_sign {
            let p = golden_min(|x| g(x).abs(), xs[i - 1], xs[i + 1]);
            if g(p).abs() < FIXED_POINT_RESIDUAL {
                found.push((p, FixedPointKind::Grazing));
            }
        }
    }
    for (x, gx) in [(0.0, gs[0]), (1.0, gs[grid_size])] {
        if gx.abs() < FIXED_POINT_RESIDUAL {
            found.push((x, FixedPointKind::Boundary));
        }
    }
    if found.is_empty() {
        // Unreachable for a continuous self-map of [0,1]; keep the contract.
        let (i, _) = gs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("grid is nonempty");
        found.push((xs[i], FixedPointKind::Crossing));
    }

    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, FixedPointKind)> = Vec::new();
    for (p, kind) in found {
        match merged.last_mut() {
            Some(last) if (p - last.0).abs() < DEDUP_RADIUS => {
                if kind == FixedPointKind::Boundary {
                    *last = (p, kind);
                }
            }
            _ => merged.push((p, kind)),
        }
    }

    let epsilon = variant.epsilon();
    let mean_only = variant.scheme().kind() == Normalization::MeanOnly;
    let fixed_points = merged
        .into_iter()
        .map(|(p_star, kind)| {
            let derivative = h_derivative(variant, p_ref, p_star)?;
            Ok(FixedPoint {
                p_star,
                kind,
                residual: g(p_star),
                derivative,
                locally_stable: derivative.abs() < 1.0,
                beta_threshold: if mean_only {
                    0.0
                } else {
                    beta_threshold(p_star, epsilon)
                },
                amplifies: p_star > p_ref,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FixedPointReport {
        variant: variant.label(),
        beta: variant.beta(),
        p_ref,
        epsilon,
        fixed_points,
    })
}

/// Largest log-odds whose sigmoid is still distinguishable from 1.
const SCAN_LOGIT: f64 = 37.0;

fn scan_grid(n: usize) -> Vec<f64> {
    let mut xs: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let m = 2 * n;
    xs.extend((0..=m).map(|i| sigmoid(-SCAN_LOGIT + 2.0 * SCAN_LOGIT * i as f64 / m as f64)));
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// Bisects a sign change down to adjacent floats.
fn bisect(g: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, mut g_lo: f64) -> f64 {
    let mut g_hi = g(hi);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if (gm < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = gm;
        } else {
            hi = mid;
            g_hi = gm;
        }
    }
    if g_lo.abs() <= g_hi.abs() {
        lo
    } else {
        hi
    }
}

/// One fixed-point step, kept only if it lowers the residual.
fn polish(hmap: &impl Fn(f64) -> f64, p: f64) -> f64 {
    let next = hmap(p);
    if (hmap(next) - next).abs() < (hmap(p) - p).abs() {
        next
    } else {
        p
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

/// Fixed points over a `(β, p_ref)` grid, β-major, in input order.
pub fn stability_map(
    beta_grid: &[f64],
    p_ref_grid: &[f64],
    scheme: WeightScheme,
    grid_size: usize,
    exec: Execution,
) -> Result<Vec<FixedPointReport>> {
    if beta_grid.is_empty() || p_ref_grid.is_empty() {
        return Err(Error::InvalidParameter("stability grids must be nonempty".into()));
    }
    let cells: Vec<(f64, f64)> = beta_grid
        .iter()
        .flat_map(|&b| p_ref_grid.iter().map(move |&p| (b, p)))
        .collect();
    exec.map(&cells, |&(beta, p_ref)| {
        let variant = VariantSpec::reference(scheme, beta)?;
        find_fixed_points(&variant, p_ref, grid_size)
    })
    .into_iter()
    .collect()
}
