use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem parameters: {0}")]
    InvalidParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid body: {0}")]
    InvalidBody(String),

    #[error("bodies do not share a direction grid")]
    MismatchedDirections,

    #[error("sets are not homothetic: fitted rho = {rho:.6e}, residual = {residual:.6e}")]
    NotHomothetic { rho: f64, residual: f64 },

    #[error("level set t = {t} cannot be extracted: {reason}")]
    LevelSet { t: f64, reason: String },

    #[error("body is not strictly inside the truncation box: {0}")]
    BodyTouchesBox(String),

    #[error("solver did not converge after {iterations} iterations (last relative energy change {last_change:.3e}, residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        last_change: f64,
        residual: f64,
    },

    #[error("solve report is not converged")]
    Unconverged,

    #[error("concavity estimate failed: {0}")]
    Concavity(String),

    #[error("quasi-concavity violated: h_t = {h_t:.3e} > 0 at direction {direction}, level {level}")]
    QuasiConcavity {
        h_t: f64,
        direction: usize,
        level: f64,
    },

    #[error("solve failed for body `{body}`: {source}")]
    BodySolve {
        body: String,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
