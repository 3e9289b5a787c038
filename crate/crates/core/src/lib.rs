//! Few-shot class-incremental learning with flat-to-wide training.
//!
//! A prototypical network is trained on a data-rich base task under bounded
//! parameter noise, which locates a flat region of the loss surface. Each later
//! few-shot session trains on feature-space augmented data with an
//! importance-weighted anchoring penalty and a KL-to-uniform projection, and
//! clamps the feature extractor back into the flat region after every step.
//!
//! Module map:
//! - [`autodiff`]: tensors, reverse-mode tape, finite-difference oracle
//! - [`protonet`]: embedding network, prototypes, nearest-mean posterior, losses
//! - [`flat`]: noise-perturbed base training and learning-rate diagnostics
//! - [`ball`]: enclosing balls, in-ball sampling, transformation module, ball loss
//! - [`pmas`]: importance estimation and the anchoring regularizer
//! - [`session`]: the continual-learning state machine
//! - [`data`]: synthetic streams and CSV ingestion
//! - [`harness`]: configs, experiments, sweeps and output files

pub mod autodiff;
pub mod ball;
pub mod data;
pub mod error;
pub mod flat;
pub mod harness;
pub mod pmas;
pub mod protonet;
pub mod rng;
pub mod session;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{FlowerError, Result};

/// Class label. Classes are disjoint across tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
