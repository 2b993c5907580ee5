//! Latent conservative objective models (LCOMs) for crystal structure
//! search, end to end on a synthetic periodic pair-potential oracle.
//!
//! The pipeline: generate datasets of locally-stable periodic structures
//! from the oracle, learn a latent representation with a VAE whose decoder
//! is a denoising score model, train a conservative surrogate energy model
//! on latent vectors, optimize structures by gradient descent in latent
//! space, and score recovered structures against brute-forced global
//! minima.
//!
//! Start from the runnable examples (`cargo run --release --example ...`)
//! or the `lcoms` binary, which exposes each stage as a subcommand.

pub mod bench;
pub mod config;
pub mod crystal;
pub mod io;
pub mod nn;
pub mod optimize;
pub mod oracle;
pub mod surrogate;
pub mod vae;

pub use bench::{BenchError, BenchOutcome, Method, RunReport};
pub use config::{ConfigError, RunConfig};
pub use crystal::{Crystal, CrystalError, FeatureScale, FeatureVector, Lattice};
pub use nn::{Activation, AdamTrainer, NeuralNet, NnError, ParamGrads};
pub use optimize::{LcomOutcome, OptError, OptTrajectory, PhaseTimings};
pub use oracle::{Composition, DatasetRecord, OracleError, PairParams, PotentialSpec, SampleSpace};
pub use surrogate::{
    ComsConfig, Conservatism, LatentDataset, LatentEnergy, LatentRecord, SurrogateError,
    SurrogateModel,
};
pub use vae::{CdVaeModel, LatentVector, NoiseSchedule, VaeConfig, VaeError};
