//! Probabilistic multivariate forecasting with multi-scale attention and
//! conditional normalizing flows.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{ManfError, Result};
pub use model::{ForecastSamples, ManfConfig, ManfModel};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
