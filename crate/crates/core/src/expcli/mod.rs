//! Toy-world construction, experiment orchestration and the verification
//! suite behind the command-line tool.

pub mod analysis;
pub mod config;
pub mod experiment;
pub mod verify;
pub mod world;

pub use world::{default_toy_world, make_toy_world, PromptRecord, ToyWorld};
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Outputs};
pub use verify::{verify, VerifyOptions};
