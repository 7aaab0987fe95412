//! Taxonomy-aware multi-dataset joint training for video instance
//! segmentation, at a scale that runs on one CPU core.

pub mod autograd;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod nn;
pub mod params;
pub mod taxonomy;
pub mod tcm;
pub mod tensor;
pub mod corpus;
pub mod eval;
pub mod featurize;
pub mod loss;
pub mod matching;
pub mod sampler;
pub mod synth;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;
pub mod ablate;
pub mod report;
