//! Numeric core of `meshinvert`: irregular triangle meshes, a reference
//! finite-element wave solver, a graph-network surrogate, a coordinate-network
//! prior, and the latent-space inverse solver that ties them together.

pub mod gnn;
pub mod inverse;
pub mod io;
pub mod mesh;
pub mod prior;
pub mod seed;
pub mod synth;
pub mod wavesim;

pub use meshinvert_tensor as tensor;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh generation rejected: {0}")]
    MeshRejected(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("node {node} is not connected to any boundary node")]
    Disconnected { node: usize },
    #[error("{count} target node(s) lie outside the source mesh, first few: {nodes:?}")]
    OutsideMesh { count: usize, nodes: Vec<usize> },
    #[error("degenerate triangle {triangle} (area {area:e})")]
    DegenerateTriangle { triangle: usize, area: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] meshinvert_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
