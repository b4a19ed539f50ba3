//! Turbine layouts, gridded scenes, CSV ingestion, normalization and the
//! synthetic wake generator.

pub mod csv_io;
pub mod layout;
pub mod normalize;
pub mod scene;
pub mod synth;

pub use csv_io::{load_csv_dataset, read_frames, write_frames, CSV_COLUMNS};
pub use layout::{TurbineLayout, TurbinePlacement};
pub use normalize::FeatureStats;
pub use scene::{
    build_sequences, embed_to_grid, frames_to_sequences, Frame, IngestReport, RawRecord, Scene,
    SceneSequence, TurbineRecord, CHANNEL_NAMES, NUM_CHANNELS, WIND_SPEED_CHANNEL,
};
use crate::error::{Error, Result};

pub use synth::{synthesize_frames, synthesize_wake_dataset, WakeConfig};

/// Contiguous-in-time train/validation/test split (70/15/15). Sequences
/// must already be in time order.
pub fn split_chronological<S: Clone>(items: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = items.len();
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    (
        items[..n_train].to_vec(),
        items[n_train..n_train + n_val].to_vec(),
        items[n_train + n_val..].to_vec(),
    )
}

/// Chronological splits in physical units and normalized with statistics
/// fitted on the training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<SceneSequence>,
    pub val: Vec<SceneSequence>,
    pub test: Vec<SceneSequence>,
    pub stats: FeatureStats,
    pub train_norm: Vec<SceneSequence>,
    pub val_norm: Vec<SceneSequence>,
    pub test_norm: Vec<SceneSequence>,
}

impl PreparedData {
    pub fn new(sequences: &[SceneSequence]) -> Result<Self> {
        let (train, val, test) = split_chronological(sequences);
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::Ingest(format!(
                "{} sequences are too few for a train/validation/test split",
                sequences.len()
            )));
        }
        let stats = FeatureStats::fit(&train)?;
        Ok(Self {
            train_norm: stats.apply_dataset(&train),
            val_norm: stats.apply_dataset(&val),
            test_norm: stats.apply_dataset(&test),
            train,
            val,
            test,
            stats,
        })
    }
}
