//! Modular Bayesian shrinkage meta-learning.
//!
//! Each module `m` of a model's parameter vector gets a Gaussian shrinkage
//! prior `N(φ_m, σ²_m I)`. Task adaptation is MAP estimation under that
//! prior; the prior mean `φ` and the per-module variances `σ²` are
//! meta-learned from validation likelihood gradients. Modules whose
//! variance collapses toward zero are shared across tasks, while modules
//! with large variance are task specific.

pub mod adapt;
pub mod data;
pub mod discovery;
pub mod driver;
pub mod error;
pub mod metagrad;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod solver;
pub mod taskgen;
pub mod vector;

pub use data::{Batch, TaskData};
pub use error::{Error, Result};
pub use models::TaskModel;
pub use params::{MetaParams, ModulePartition, TaskParams};
