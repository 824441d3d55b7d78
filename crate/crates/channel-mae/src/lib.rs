//! Self-supervised representation learning for wireless channel matrices.
//!
//! The crate covers the full desk-scale pipeline: a synthetic multipath
//! MISO-OFDM channel generator, patch/mask preprocessing, a transformer
//! encoder-decoder with an optional contrastive head, reverse-mode
//! differentiation, Adam training loops, and frozen-encoder downstream
//! probes (beam selection, LoS detection).

pub mod bytesio;
pub mod chansynth;
pub mod config;
pub mod complexmat;
pub mod dataset;
pub mod downstream;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod patchpipe;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
