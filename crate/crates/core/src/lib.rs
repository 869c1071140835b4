//! Stepback voice conversion.
//!
//! A content encoder / speaker-conditioned decoder pair is trained in three
//! stages: a preparatory reconstruction stage (with a separately pretrained
//! speech-level speaker classifier), the stepback stage that alternates plain
//! reconstruction with a dual-decoder update, and a WGAN-GP refinement stage.
//!
//! Modules:
//!
//! - [`features`]: audio I/O, log-magnitude spectrograms, Griffin–Lim
//! - [`dataset`]: VCTK subset manifests and batch sampling
//! - [`model`]: encoder, decoder, speaker classifier, patch discriminator
//! - [`losses`]: reconstruction, classification, stepback and WGAN-GP objectives
//! - [`trainer`]: stage orchestration, checkpoints and metric logs
//! - [`convert`]: inference
//! - [`evaluation`]: global variance, heatmaps and the A/B listening-test backend

pub mod convert;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
