//! Fixed-effect panel likelihoods, block Newton fitting, and parametric
//! bootstrap inference for the common parameter.

pub mod bootstrap;
pub mod harness;
pub mod inference;
pub mod models;
pub mod newton;
pub mod oracle;
pub mod panel;
pub mod rng;

pub use models::{ModelError, ModelKind};
pub use newton::{fit, FitError, FitOptions, FitResult};
pub use panel::{PanelDataset, PanelError, PanelModel, ParameterPoint};
pub use rng::StreamKey;
