//! Dense float64 tensors, a reverse-mode tape, Adam and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod kernels;
mod lstm;
mod params;
mod tape;
mod tensor;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use lstm::{Dense, LstmLayer};
pub use params::{normal, xavier_uniform, ParamId, ParamStore};
pub use tape::{dropout_mask, sigmoid, Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{bucket_batches, derive_seed, EarlyStopping, EpochStats, Progress, TrainHistory};
