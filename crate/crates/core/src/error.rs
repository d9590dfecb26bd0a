use crate::population::PopulationTree;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model id '{0}'")]
    UnknownModel(String),
    #[error("model config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{model} has no closed-form mean growth; use mean_population_mc")]
    NoClosedForm { model: String },
    #[error("simulation cap exceeded at t={time_reached}: {what} (partial tree retained)")]
    CapExceeded {
        what: String,
        time_reached: f64,
        partial: Box<PopulationTree>,
    },
    #[error("quadrature tolerance {tol} not met on [{a}, {b}]")]
    Quadrature { a: f64, b: f64, tol: f64 },
    #[error("quadrature grid too coarse: |I({n}) - I({n2})| = {diff} exceeds {allowed}")]
    QuadratureGrid {
        n: usize,
        n2: usize,
        diff: f64,
        allowed: f64,
    },
    #[error("thinning bound violated: rate {rate} > bound {bound} at s={s} (model {model})")]
    ThinningBound {
        rate: f64,
        bound: f64,
        s: f64,
        model: String,
    },
    #[error("population extinct at t={0}; resample trees for survival conditioning")]
    Extinct(f64),
    #[error("survival-conditioning resample budget ({0}) exhausted")]
    ResampleBudget(usize),
    #[error("nested Monte Carlo budget exceeded: {requested} path simulations > {budget}")]
    NestedBudget { requested: usize, budget: usize },
    #[error("importance weight overflow: exp({0}) along tagged path")]
    WeightOverflow(f64),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
