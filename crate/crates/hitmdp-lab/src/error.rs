//! Error type shared across the lab crate. `Config` problems map to exit
//! code 1 (validation), everything else to 2 (runtime fault).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("runtime fault: {0}")]
    Runtime(String),
}

impl LabError {
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) => 1,
            _ => 2,
        }
    }
}

impl From<hitmdp_core::mdp::MdpError> for LabError {
    fn from(e: hitmdp_core::mdp::MdpError) -> Self {
        LabError::Runtime(e.to_string())
    }
}

impl From<hitmdp_core::solver::SolverError> for LabError {
    fn from(e: hitmdp_core::solver::SolverError) -> Self {
        LabError::Runtime(e.to_string())
    }
}

impl From<hitmdp_core::homomorphism::HomomorphismError> for LabError {
    fn from(e: hitmdp_core::homomorphism::HomomorphismError) -> Self {
        LabError::Runtime(e.to_string())
    }
}

impl From<hitmdp_core::vmoc::VmocError> for LabError {
    fn from(e: hitmdp_core::vmoc::VmocError) -> Self {
        LabError::Runtime(e.to_string())
    }
}

impl From<hitmdp_core::coldstart::ColdStartError> for LabError {
    fn from(e: hitmdp_core::coldstart::ColdStartError) -> Self {
        LabError::Runtime(e.to_string())
    }
}

impl From<hitmdp_core::env::EnvError> for LabError {
    fn from(e: hitmdp_core::env::EnvError) -> Self {
        LabError::Config(e.to_string())
    }
}
