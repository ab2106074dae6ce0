//! Cross-modal domain-invariant representation learning with semantic
//! autoencoder fusion for action recognition in videos.
//!
//! Three small networks map image, keyframe and video features into a shared
//! `d`-dimensional space where same-class samples from different modalities
//! have large inner products. Four tied-weight linear autoencoders then
//! project the keyframe, video and joint keyframe+video representations onto
//! class semantic vectors, and the stacked codes feed a linear classifier.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fmx;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod net;
pub mod objective;
pub mod report;
pub mod sae;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SplitInfo};
pub use data::{
    build_similarity, expand_semantics, generate_synthetic, stratified_split, FeatureMatrix,
    SemanticTable, SimilarityMatrix, SynthConfig, TriModalDataset,
};
pub use error::{Error, Result};
pub use experiment::{calibrated_synth, Split};
pub use fusion::{evaluate, fuse, train_classifier, FusedBatch, LinearClassifier, Metrics};
pub use linalg::{solve_sylvester, stable_softplus, sylvester_oracle, Matrix};
pub use net::{Activation, NetworkParams};
pub use objective::{GradientMode, Hyperparams, Modality, Representations, Similarities};
pub use report::RunReport;
pub use sae::SaeWeights;
pub use trainer::{train, Ablation, Model, TrainConfig};
