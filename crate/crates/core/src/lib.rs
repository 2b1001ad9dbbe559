//! Automated scoring of multi-turn text dialogs on rubric constructs.
//!
//! The crate holds the corpus model, feature extraction, three scorer
//! families (a regularized linear model, a stacked BiLSTM with word
//! attention and a turn-level memory network), evaluation metrics and
//! score-level fusion, plus the cross-validation driver used by the
//! `dialogscore` command-line tool.

pub mod agreement;
pub mod bilstm;
pub mod corpus;
mod error;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod linear;
pub mod memn2n;
pub mod metrics;
pub mod nn;
pub mod vocab;

pub use corpus::{Construct, Dialog, Speaker, Turn};
pub use error::{Error, Result};
pub use fusion::{Posterior, PredictionSet};
