use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which half of an outcome set a conditional distribution lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Success,
    Failure,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Success => f.write_str("success"),
            Side::Failure => f.write_str("failure"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown prompt id `{0}`")]
    UnknownPrompt(String),

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("whitened advantage undefined at p = {0}: reward variance p(1-p) is zero")]
    ZeroVariance(f64),

    #[error("two-KL map needs a Rényi correction term")]
    MissingRenyiCorrection,

    #[error("{0} conditional undefined: the policy puts no mass on that side")]
    ConditionalUndefined(Side),

    #[error("degenerate geometric mean: anchors share no support")]
    DegenerateAnchor,

    #[error("numerical maximizer stopped after {iterations} iterations with residual {residual:e}")]
    NonConvergence {
        best: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("training diverged at outer iteration {outer}, prompt `{prompt}`: objective fell for {streak} consecutive inner steps (last {objective})")]
    Divergence {
        outer: usize,
        prompt: String,
        streak: usize,
        objective: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
