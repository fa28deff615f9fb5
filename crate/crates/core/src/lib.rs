//! Manifold adversarial training: a small dense-network toolkit with a
//! latent Gaussian mixture, adversarial perturbation generators and a
//! training loop.

pub mod data;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod net;
pub mod objective;
pub mod perturb;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use gmm::{CovarianceMode, EmaConfig, GmmState, MklMode};
pub use linalg::{Matrix, Vector};
pub use net::{Activation, ForwardTrace, LayerSpec, NetworkParams, ParamGrads};
pub use objective::{ObjectiveConfig, SmoothnessObjective, TrainingMode};
pub use perturb::{LpNorm, PerturbationFamily, PerturbationSpec};
pub use trainer::{TrainConfig, TrainReport};
