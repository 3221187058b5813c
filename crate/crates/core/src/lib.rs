//! Referential signalling games between a Sender and a Receiver that see
//! CIFAR-10 images through a convolutional encoder and talk over a discrete
//! Straight-Through Gumbel-Softmax channel.
//!
//! The crate covers the whole experimental loop: data ingestion and
//! augmentation ([`data`]), feature extraction under three weight regimes
//! ([`encoder`]), the token channel ([`channel`]), the recurrent agents and the
//! rotation-prediction head ([`agents`]), losses and multi-task schedules
//! ([`objectives`]), training/evaluation ([`trainer`]) and the communication
//! and visual-semantics measures ([`metrics`]).

pub mod agents;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
