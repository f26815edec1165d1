//! Core pipeline for mapping imagined MEG responses onto listened ones.
//!
//! ```text
//! synth ──▶ data (manifest.json + raw f32) ──▶ dsp (bandpass, screen)
//!                                              │
//!                                              ▼
//!                          dss (denoise) ──▶ dsp (z-score, decimate)
//!                                              │
//!                     ┌────────────────────────┼──────────────────┐
//!                     ▼                        ▼                  ▼
//!                rsa (similarity,        ridgemap (windowed   nnet crate
//!                 classifier)             ridge, LOTO, null)  (CNN, LOSO)
//!                     └───────────────▶ stats ◀───────────────────┘
//! ```
//!
//! Every module works on [`data::SubjectDataset`] values, which are immutable
//! once validated and can be shared across worker threads.

pub mod data;
pub mod dsp;
pub mod dss;
pub mod error;
mod linalg;
pub mod preprocess;
pub mod ridgemap;
pub mod rsa;
pub mod stats;
pub mod synth;

pub use data::{
    build_pairing, load_dataset, save_dataset, ConditionLabel, PairingMode, Stimulus,
    SubjectDataset, Task, TrialPair, TrialPairing, TrialRecord,
};
pub use error::{Error, Result};
