//! Small CPU gradient engine and the calibrated encoder–decoder CNN that
//! maps imagined responses onto listened ones.
//!
//! Tensors are `(batch, channels, time)`. Layers cache what they need during
//! a training-mode forward pass; `backward` consumes the cache, so calling it
//! twice (or before a forward pass) is an error.

pub mod adam;
pub mod calibrate;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod layers;
pub mod loso;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use calibrate::{fit_calibration, split_calibration, CalibrationFit};
pub use conv::Conv1d;
pub use error::{NnError, Result};
pub use layers::Mode;
pub use loso::{evaluate_loso, LosoConfig, LosoReport, NullPlan};
pub use loss::{CorrForm, Loss, LossTerms, LossWeights};
pub use model::{ArchSpec, EncoderDecoder};
pub use tensor::Tensor3;
pub use train::{train_backbone, EarlyStopping, Example, TrainConfig, TrainedBackbone};
