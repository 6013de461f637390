//! Command-line pipeline around `meshinvert-core`: configuration, the task
//! runners (`gen-mesh` through `report`), run manifests and plots.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, Overrides, Task};
pub use pipeline::run;

/// Failure of a run, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration, usage or missing input. Exit status 2.
    #[error("{0}")]
    Config(String),
    /// Anything that goes wrong once the inputs were accepted. Exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

impl From<meshinvert_core::Error> for HarnessError {
    fn from(e: meshinvert_core::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}
