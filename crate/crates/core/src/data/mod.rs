//! Synthetic glyph benchmark with disjoint seen/unseen classes, plus AP.

pub mod dataset;
pub mod glyph;
pub mod image;
pub mod metrics;
pub mod protocol;

pub use dataset::{
    generate_dataset, load_dataset, manifest_hash, write_dataset, ClassSplit, Dataset, DatasetConfig, GlyphClass,
    Instance, OneShotSample, SampleSplit,
};
pub use glyph::GlyphFamily;
pub use image::{read_ppm, write_ppm, RgbImage};
pub use metrics::{ap_and_ap50, evaluate_ap, ScoredBox};
pub use protocol::{evaluation_protocol, select_queries, workers_from_env, ClassMetrics, EvalReport};
