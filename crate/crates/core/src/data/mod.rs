//! Readings ingestion, normalization, splitting, windowing and the synthetic
//! generator.

mod dataset;
mod prep;
pub mod synth;

pub use dataset::{format_timestamp, parse_timestamp, ReadingsDataset};
pub use prep::{
    chronological_split, filter_by_missing_rate, split_bounds, window_starts, Direction, NormStats, PreparedSplit,
};
pub use synth::{synth_generate, SynthConfig};
