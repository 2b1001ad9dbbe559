//! Cross-validated experiments: per-construct training of every system,
//! persisted out-of-fold posteriors, best-subset fusion, reports and
//! attention heatmaps.

mod config;
mod fuse;
mod heatmap;
mod report;
mod run;

pub use config::{CorpusSource, ExperimentConfig, LinearConfig, SynthSource, System};
pub use fuse::{
    fold_mean, fuse_run, ingest_externals, load_predictions, read_fusion, ConstructPredictions, External, FusionRecord,
    FUSION_FILE,
};
pub use heatmap::{heatmap_csv, heatmap_svg};
pub use report::{build_report, Report, ReportRow, SystemScore};
pub use run::{
    cv_run, model_dir, predictions_dir, read_gold, write_gold, CellRecord, GoldRow, GOLD_FILE, PREDICTIONS_DIR,
    TRAINING_FILE,
};
