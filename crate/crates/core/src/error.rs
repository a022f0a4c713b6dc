use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tangent vectors live at different base points")]
    BaseMismatch,
    #[error("point {0:?} lies outside the chart domain")]
    OutsideDomain(Vec<f64>),
    #[error("metric is singular at {0:?}")]
    SingularMetric(Vec<f64>),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("unknown hypersurface kind '{0}'")]
    UnknownSigma(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("signature violated: {0}")]
    Signature(String),

    #[error("integrator step underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("geodesic left the chart at t = {0}")]
    LeftChart(f64),
    #[error("curvature blow-up at t = {0}")]
    CurvatureBlowup(f64),
    #[error("shooting did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("shooting Jacobian nearly singular (det {0:.3e}); conjugate point suspected")]
    ConjugatePoint(f64),
    #[error("pair is not chronological")]
    NonChronological,

    #[error("degenerate tangent frame at u = {0:?}")]
    DegenerateFrame(Vec<f64>),
    #[error("Fermi chart invalid: {0}")]
    FermiChart(String),

    #[error("schema mismatch: reader expects version {expected}, file has {found}")]
    SchemaMismatch { expected: u32, found: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("forward synthesis failed on pair ({i}, {j}): {source}")]
    PairFailure {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("quadratic-form fit is rank deficient ({rank} of {needed} independent directions)")]
    RankDeficient { rank: usize, needed: usize },
    #[error("recovered tangential metric is not Lorentzian at u = {0:?}")]
    NonLorentzian(Vec<f64>),
    #[error("tangential fit residual {residual:.3e} exceeds fit_tol {tol:.1e} at u = {u:?}")]
    FitResidual { residual: f64, tol: f64, u: Vec<f64> },
    #[error("eikonal radicand {0:.3e} is negative beyond tolerance")]
    NegativeRadicand(f64),
    #[error("finite-difference stencil touches the zero set of d")]
    LightConeStencil,
    #[error("grid node {0:?} is missing from the table")]
    MissingNode(Vec<i64>),
    #[error("only {found} qualifying anchors (need at least {needed})")]
    TooFewAnchors { found: usize, needed: usize },
    #[error("underdetermined direction system: {have} usable directions, need {need}")]
    Underdetermined { have: usize, need: usize },
    #[error("Σ window not timelike or grid too coarse: no chronological pairs")]
    NoChronologicalPairs,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("truth comparison needs the generating metric, but the input is blinded")]
    Blinded,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
