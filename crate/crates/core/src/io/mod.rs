//! On-disk artifacts: the tensor container, typed artifact kinds stored in
//! it, and the run configuration file.

pub mod artifacts;
pub mod config;
pub mod container;

pub use artifacts::{load_model, Artifact, GatedModel, LoadedModel};
pub use config::RunConfig;
pub use container::{write_atomic, Container};
