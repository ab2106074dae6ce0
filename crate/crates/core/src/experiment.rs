//! Train/evaluate protocol on a stratified split, plus the video-only
//! baseline used for comparison.

use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, SemanticTable, SynthConfig, TriModalDataset};
use crate::error::{Error, Result};
use crate::fusion::{evaluate, fuse, train_classifier, FusedBatch, Metrics};
use crate::trainer::{train, Model, TrainConfig};

/// Default classifier regularization.
pub const DEFAULT_REG: f64 = 1.0;

/// Synthetic set used for accuracy comparisons: 8 classes of 40 samples,
/// keyframes at σ = 0.3 and videos four times noisier, so that a
/// video-only classifier stays well below ceiling at a 10% training ratio.
pub fn calibrated_synth() -> SynthConfig {
    SynthConfig {
        noise: 0.3,
        video_noise_scale: 4.0,
        ..SynthConfig::new(8, 40)
    }
}

/// Training/held-out partition of a dataset's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub ratio: f64,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn stratified(ds: &TriModalDataset, ratio: f64, seed: u64) -> Result<Self> {
        let (train, test) = stratified_split(ds.labels(), ratio, seed)?;
        Ok(Self {
            ratio,
            seed,
            train,
            test,
        })
    }

    /// Rebuild a split from stored training indices.
    pub fn from_train(
        ds: &TriModalDataset,
        ratio: f64,
        seed: u64,
        mut train: Vec<usize>,
    ) -> Result<Self> {
        train.sort_unstable();
        train.dedup();
        if let Some(&bad) = train.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::contract(format!(
                "training index {bad} out of range for {} samples",
                ds.len()
            )));
        }
        let test = (0..ds.len())
            .filter(|i| train.binary_search(i).is_err())
            .collect();
        Ok(Self {
            ratio,
            seed,
            train,
            test,
        })
    }
}

/// Classifier accuracy on both sides of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: Metrics,
    /// `None` when the split leaves no held-out samples.
    pub test: Option<Metrics>,
    /// Classes that occur in the held-out side but not in training.
    pub unseen_classes: Vec<usize>,
}

fn unseen(ds: &TriModalDataset, split: &Split) -> Vec<usize> {
    let mut seen = vec![false; ds.num_classes()];
    for &i in &split.train {
        seen[ds.labels()[i]] = true;
    }
    let mut missing: Vec<usize> = split
        .test
        .iter()
        .map(|&i| ds.labels()[i])
        .filter(|&c| !seen[c])
        .collect();
    missing.sort_unstable();
    missing.dedup();
    missing
}

fn classify(
    train_x: FusedBatch,
    test_x: Option<FusedBatch>,
    ds: &TriModalDataset,
    split: &Split,
) -> Result<SplitMetrics> {
    let labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| ds.labels()[i]).collect() };
    let train_labels = labels(&split.train);
    let clf = train_classifier(&train_x, &train_labels, ds.num_classes(), DEFAULT_REG)?;
    let train = evaluate(&clf, &train_x, &train_labels)?;
    let test = match test_x {
        Some(x) => Some(evaluate(&clf, &x, &labels(&split.test))?),
        None => None,
    };
    Ok(SplitMetrics {
        train,
        test,
        unseen_classes: unseen(ds, split),
    })
}

/// Fuse both sides with `model`, fit the classifier on the training side and
/// score both.
pub fn evaluate_model(model: &Model, ds: &TriModalDataset, split: &Split) -> Result<SplitMetrics> {
    let part = |idx: &[usize]| -> Result<FusedBatch> {
        fuse(
            model,
            &ds.keyframes().select_columns(idx),
            &ds.videos().select_columns(idx),
        )
    };
    let test = if split.test.is_empty() {
        None
    } else {
        Some(part(&split.test)?)
    };
    classify(part(&split.train)?, test, ds, split)
}

/// Linear classifier on raw video features only.
pub fn video_baseline(ds: &TriModalDataset, split: &Split) -> Result<SplitMetrics> {
    let part = |idx: &[usize]| FusedBatch(ds.videos().select_columns(idx));
    let test = (!split.test.is_empty()).then(|| part(&split.test));
    classify(part(&split.train), test, ds, split)
}

/// Everything produced by one training run on a split.
#[derive(Debug, Clone)]
pub struct SplitRun {
    pub model: Model,
    pub split: Split,
    pub metrics: SplitMetrics,
}

/// Train on the split's training columns and evaluate.
pub fn run_split(
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    cfg: &TrainConfig,
    split: Split,
) -> Result<SplitRun> {
    let train_set = ds.subset(&split.train)?;
    let model = train(&train_set, semantics, cfg)?;
    let metrics = evaluate_model(&model, ds, &split)?;
    Ok(SplitRun {
        model,
        split,
        metrics,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
