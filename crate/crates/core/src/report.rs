//! Run reports and the train-then-evaluate pipeline that produces them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SplitInfo};
use crate::data::{SemanticTable, TriModalDataset};
use crate::error::Result;
use crate::experiment::{evaluate_model, run_split, Split, SplitMetrics};
use crate::fusion::Metrics;
use crate::trainer::{init_model, resume, TrainConfig};

pub const REPORT_VERSION: u32 = 1;

/// Called with each intermediate checkpoint during training.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(&Checkpoint) -> Result<()>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub ratio: f64,
    pub split_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_metrics: Option<Metrics>,
}

impl SplitAccuracy {
    pub fn new(split: &Split, metrics: &SplitMetrics) -> Self {
        Self {
            ratio: split.ratio,
            split_seed: split.seed,
            train_samples: split.train.len(),
            test_samples: split.test.len(),
            train_accuracy: metrics.train.accuracy,
            test_accuracy: metrics.test.as_ref().map(|m| m.accuracy),
            test_metrics: metrics.test.clone(),
        }
    }
}

/// Wall-clock seconds; the only part of a report that varies between
/// identical runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub ablation: String,
    /// The configuration the run was started with, echoed verbatim.
    pub config: serde_json::Value,
    pub initial_objective: f64,
    pub trace: Vec<f64>,
    pub ridge_activations: usize,
    pub accuracies: Vec<SplitAccuracy>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl RunReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().copied()
    }

    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn unseen_class_warnings(ds: &TriModalDataset, metrics: &SplitMetrics) -> Vec<String> {
    metrics
        .unseen_classes
        .iter()
        .map(|&c| {
            format!(
                "class {c} ({}) occurs in the held-out split but not in training; scored as-is",
                ds.class_names()[c]
            )
        })
        .collect()
}

/// Train on a seeded stratified split, then fit and score the classifier.
///
/// When `cfg.checkpoint_interval` is nonzero, `on_checkpoint` sees the model
/// after every multiple of that many iterations.
pub fn train_and_report(
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    cfg: &TrainConfig,
    ratio: f64,
    config_echo: serde_json::Value,
    mut on_checkpoint: Option<CheckpointHook<'_>>,
) -> Result<(Checkpoint, RunReport)> {
    let split = Split::stratified(ds, ratio, cfg.seed)?;
    let split_info = SplitInfo {
        ratio,
        seed: split.seed,
        train: split.train.clone(),
    };
    let started = Instant::now();
    let train_set = ds.subset(&split.train)?;
    let mut model = init_model(&train_set, semantics, cfg)?;
    let step = if cfg.checkpoint_interval == 0 {
        cfg.hp.iters.max(1)
    } else {
        cfg.checkpoint_interval
    };
    while model.iterations() < cfg.hp.iters {
        let until = (model.iterations() + step).min(cfg.hp.iters);
        model = resume(model, &train_set, semantics, until, None)?;
        if let Some(hook) = on_checkpoint.as_deref_mut() {
            if cfg.checkpoint_interval > 0 && until % cfg.checkpoint_interval == 0 {
                hook(&Checkpoint {
                    model: model.clone(),
                    split: Some(split_info.clone()),
                })?;
            }
        }
        if model.ablation() == crate::trainer::Ablation::Kvc {
            break;
        }
    }
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let metrics = evaluate_model(&model, ds, &split)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let report = RunReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        ablation: cfg.ablation.tag().to_string(),
        config: config_echo,
        initial_objective: model.initial_objective,
        trace: model.trace.clone(),
        ridge_activations: model.ridge_activations,
        accuracies: vec![SplitAccuracy::new(&split, &metrics)],
        warnings: unseen_class_warnings(ds, &metrics),
        timings: Timings {
            train_seconds,
            eval_seconds,
        },
    };
    let ckpt = Checkpoint {
        model,
        split: Some(split_info),
    };
    Ok((ckpt, report))
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: f64,
    pub final_objective: Option<f64>,
}

/// Run every ablation plus the video-only baseline on one split.
pub fn compare_ablations(
    ds: &TriModalDataset,
    semantics: &SemanticTable,
    cfg: &TrainConfig,
    ratio: f64,
) -> Result<Vec<AblationRow>> {
    use crate::trainer::Ablation;
    let split = Split::stratified(ds, ratio, cfg.seed)?;
    let mut rows = Vec::new();
    let base = crate::experiment::video_baseline(ds, &split)?;
    rows.push(AblationRow {
        ablation: "video-svm".into(),
        test_accuracy: base.test.map(|m| m.accuracy),
        train_accuracy: base.train.accuracy,
        final_objective: None,
    });
    for ablation in [
        Ablation::Full,
        Ablation::Diva,
        Ablation::Divf,
        Ablation::Kvc,
    ] {
        let run = run_split(
            ds,
            semantics,
            &TrainConfig {
                ablation,
                ..cfg.clone()
            },
            split.clone(),
        )?;
        rows.push(AblationRow {
            ablation: ablation.tag().into(),
            test_accuracy: run.metrics.test.map(|m| m.accuracy),
            train_accuracy: run.metrics.train.accuracy,
            final_objective: run.model.trace.last().copied(),
        });
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
    let mut out = format!(
        "{:<10} {:>10} {:>10} {:>14}\n",
        "method", "test %", "train %", "objective"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>14}\n",
            r.ablation,
            pct(r.test_accuracy),
            pct(Some(r.train_accuracy)),
            r.final_objective
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        ));
    }
    out
}
