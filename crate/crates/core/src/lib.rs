//! Conversation-starter retrieval that learns from both passively exposed
//! starters and actively typed queries.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense `f64` matrices, a recorded-tape reverse-mode gradient
//!   engine, small MLPs, optimizers and a finite-difference gradient check.
//! - [`synthworld`]: a synthetic universe of users, starters and active queries
//!   that stands in for a text encoder and production logs.
//! - [`towers`]: two-tower scoring and the in-batch softmax loss.
//! - [`aligner`]: the adversarial intent mapper / domain discriminator pair and
//!   the per-sample weight derived from it.
//! - [`discretizer`]: a three-level residual quantizer producing semantic codes.
//! - [`popstats`]: decayed streaming code frequencies and the popularity
//!   corrected (logQ) in-batch loss.
//! - [`trainer`]: the joint training step, optimizers and checkpoints.
//! - [`evalsim`]: offline metrics and the exposure/click/retrain loop simulator.
//! - [`config`]: experiment configuration shared by the CLI and the demo.

pub mod aligner;
pub mod config;
pub mod discretizer;
pub mod error;
pub mod evalsim;
pub mod mmd;
pub mod numcore;
pub mod popstats;
pub mod rng;
pub mod synthworld;
pub mod towers;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Tape, Tensor2, Var};
