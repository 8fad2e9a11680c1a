//! Annotations, feature ingestion, splitting, corpus statistics and the
//! synthetic planted-event generator.

mod annotation;
mod features;
mod split;
mod stats;
mod synthetic;

pub use annotation::{
    load_and_validate, AnnotatedVideo, Category, DatasetIndex, EventInstance, Subset, Taxonomy,
    ANNOTATION_VERSION,
};
pub use features::{
    feature_path, load_features, pad_and_mask, FeatureFile, FeatureStreams, Modality, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use split::{apply_split, stratified_split};
pub use stats::{
    duration_histogram, npmi, npmi_pairs, overlap_rate, repetition_rates, write_histogram_csv,
    write_npmi_csv, HistogramBin, NpmiPair, NpmiTable, PairMode, Repetition, DEFAULT_GAP_S,
};
pub use synthetic::{
    generate_synthetic, Distractor, SubsetCounts, SyntheticCorpus, SyntheticSpec, ANNOTATION_FILE,
};
