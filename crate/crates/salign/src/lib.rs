//! Desk-scale laboratory for speech/text modality alignment.
//!
//! Trains a compact speech-translation transformer on synthetic triples
//! (speech frames, transcription, translation) with three alignment regimes:
//! none, soft alignment via an adversarial modality discriminator with a
//! mix-up continuity enhancement, and a contrastive hard-alignment baseline.
//! Everything is deterministic given a seed and runs on CPU in f64 so
//! gradients can be audited against finite differences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod checkpoint;
pub mod continuity;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod synthdata;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
