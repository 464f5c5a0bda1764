//! Audio front end: WAV ingestion, MFCC features, dataset organization,
//! splitting, balancing, and augmentation.

pub mod dataset;
pub mod mfcc;
pub mod wav;

pub use dataset::{
    assign_split, augment, augment_rng, balance_split, prepare_experiment1, prepare_experiment2,
    AugmentConfig, Dataset, FeatureRecord, NoisePool, Source, Split, Utterance,
};
pub use mfcc::MfccExtractor;
