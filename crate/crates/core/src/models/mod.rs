//! Built-in model contracts.

pub mod dynamic_logit;
pub mod normal_means;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dynamic_logit::{DynamicLogitModel, InitialCondition};
pub use normal_means::NormalMeansModel;

use crate::panel::{PanelError, PanelModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("invalid model input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Built-in models selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NormalMeans,
    DynamicLogit,
}

impl ModelKind {
    pub fn model(self) -> &'static dyn PanelModel {
        match self {
            ModelKind::NormalMeans => &NormalMeansModel,
            ModelKind::DynamicLogit => &DynamicLogitModel,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::NormalMeans => "normal-means",
            ModelKind::DynamicLogit => "dynamic-logit",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal-means" => Ok(ModelKind::NormalMeans),
            "dynamic-logit" => Ok(ModelKind::DynamicLogit),
            other => Err(ModelError::Invalid(format!(
                "unknown model '{other}' (expected normal-means or dynamic-logit)"
            ))),
        }
    }
}
