use thiserror::Error;

/// Errors surfaced by tensor ops, graph semantics, inference engines, and IO.
///
/// Shape errors raised by infallible operator sugar (`&a + &b`) panic with the
/// same messages; the fallible entry points return these variants instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: root is not attached to the active tape")]
    DetachedRoot,

    #[error("`{name}` is already bound as a {existing}; cannot rebind it as a {attempted}")]
    NameCollision {
        name: String,
        existing: &'static str,
        attempted: &'static str,
    },

    #[error("no module at path `{0}`")]
    NoSuchModule(String),

    #[error("manual posterior has no guide registered for `{scope}`")]
    MissingGuide { scope: String },

    #[error("categorical distributions cannot be reparameterized")]
    NotReparameterizable,

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: i64, classes: usize },

    #[error("kl divergence is not implemented for {left} || {right}")]
    UnsupportedKl {
        left: &'static str,
        right: &'static str,
    },

    #[error("no guide family for a {prior} prior under a {kind} posterior at `{scope}`")]
    UnsupportedGuide {
        prior: &'static str,
        kind: &'static str,
        scope: String,
    },

    #[error("module `{scope}` is deterministic and cannot host random variables")]
    DeterministicModule { scope: String },

    #[error("pq_terms called before any forward pass")]
    StaleLedger,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("ELBO term for `{scope}` is not finite (log_p={log_p}, log_q={log_q})")]
    NonFiniteTerm {
        scope: String,
        log_p: f64,
        log_q: f64,
    },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error(
        "guide for `{scope}` reached a degenerate state (non-finite location or \
         vanished scale), usually from a divergent optimizer step"
    )]
    DegenerateGuide { scope: String },

    #[error("{method} requires PointMass guides; offending scopes: {scopes:?}")]
    NotPointMass {
        method: &'static str,
        scopes: Vec<String>,
    },

    #[error("mcmc requires continuous latents; `{0}` has a categorical prior")]
    CategoricalLatent(String),

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
