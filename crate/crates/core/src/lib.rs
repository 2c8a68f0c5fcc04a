//! Lifelong generative learning with variational autoencoders.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`]: dense tensors, a reverse-mode
//!   tape, feed-forward networks and Adam.
//! - [`vae`]: VAE assembly and the ELBO / importance-weighted objectives.
//! - [`data`]: synthetic image families, task streams and IDX ingestion.
//! - [`replay`]: generative-replay training of a single VAE over a stream.
//! - [`degm`]: the dynamic expansion graph (Basic and Specific nodes).
//! - [`bounds`]: risk, discrepancy, KL-gap and accounting diagnostics.
//! - [`checkpoint`]: the binary model container and parameter hashes.
//! - [`ledger`]: time-indexed diagnostics records and their CSV/JSON export.
//!
//! All randomness flows from [`rng::SeedStreams`], so every run is a pure
//! function of its configuration and seed.

pub mod autodiff;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod degm;
pub mod error;
pub mod ledger;
pub mod nn;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vae;

pub use autodiff::{Activation, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
