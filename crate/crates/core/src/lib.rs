//! Detection of backdoored neural networks as anomalies in weight space.
//!
//! A detector is fit on the weights of networks known to be trained on clean
//! data: one layer is cut into an order-free set of feature vectors, reduced
//! with PCA, and modeled with a Gaussian mixture whose component count is
//! chosen by AIC. A suspect network is scored by the summed log-likelihood of
//! its own vectors; low scores flag a backdoor.
//!
//! [`poisonbench`] builds a small corpus of clean and trigger-poisoned MLP
//! classifiers to exercise the detector end to end.

pub mod cli;
pub mod detector;
pub mod error;
pub mod gmm;
pub mod par;
pub mod pca;
pub mod poisonbench;
pub mod vectorize;
pub mod weightstore;

pub use detector::{DetectorModel, NetworkScore, RocResult};
pub use error::{Error, Result};
pub use gmm::{CovarianceKind, GmmModel};
pub use par::Execution;
pub use pca::PcaModel;
pub use vectorize::{FeatureVectorSet, Interpretation};
pub use weightstore::{Label, NetworkRecord, WeightTensor};
