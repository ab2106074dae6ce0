//! Fused video representations, a one-vs-rest linear hinge classifier and
//! accuracy metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::stack;
use crate::trainer::{Ablation, Model};

/// Number of full-batch subgradient iterations per one-vs-rest problem.
pub const CLASSIFIER_ITERS: usize = 500;

/// Per-sample fused features, one column per video.
///
/// For trained models rows `[0, k)` come from the keyframe encoder,
/// `[k, 2k)` from the video encoder and `[2k, 3k)` from the joint encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch(pub Matrix);

impl FusedBatch {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }
}

/// Encoder codes `[W_H·H; W_G·G; W_E·[H; G]]`.
pub fn fuse_codes(model: &Model, h: &Matrix, g: &Matrix) -> Result<FusedBatch> {
    let w = &model.sae;
    if h.nrows() != w.w_h.ncols() || g.nrows() != w.w_g.ncols() {
        return Err(Error::contract(format!(
            "representations are {}x{} and {}x{} but encoders expect {} rows",
            h.nrows(),
            h.ncols(),
            g.nrows(),
            g.ncols(),
            w.w_h.ncols()
        )));
    }
    let e = stack(h, g)?;
    let k = w.semantic_dim();
    let mut out = Matrix::zeros(3 * k, h.ncols());
    out.rows_mut(0, k).copy_from(&(&w.w_h * h));
    out.rows_mut(k, k).copy_from(&(&w.w_g * g));
    out.rows_mut(2 * k, k).copy_from(&(&w.w_e * e));
    Ok(FusedBatch(out))
}

/// Final per-video features for classification.
///
/// * full / DIVF: encoder codes of the network representations;
/// * DIVA: the learned keyframe and video representations stacked;
/// * KVC: the raw keyframe and video features stacked.
///
/// The image network and image encoder are never used here.
pub fn fuse(model: &Model, keyframes: &Matrix, videos: &Matrix) -> Result<FusedBatch> {
    if keyframes.ncols() != videos.ncols() {
        return Err(Error::contract(format!(
            "{} keyframe columns vs {} video columns",
            keyframes.ncols(),
            videos.ncols()
        )));
    }
    match model.ablation() {
        Ablation::Kvc => Ok(FusedBatch(stack(keyframes, videos)?)),
        ablation => {
            let h = model.theta_y.forward(keyframes)?;
            let g = model.theta_z.forward(videos)?;
            if ablation == Ablation::Diva {
                Ok(FusedBatch(stack(&h, &g)?))
            } else {
                fuse_codes(model, &h, &g)
            }
        }
    }
}

/// One-vs-rest linear classifier over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `classes x p`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub reg: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn standardize(features: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    Matrix::from_fn(features.nrows(), features.ncols(), |r, c| {
        (features[(r, c)] - mean[r]) / scale[r]
    })
}

/// Minimize `(reg/2)‖w‖² + (1/n)Σ_i max(0, 1 − y_i(w·x_i + b))` by full-batch
/// subgradient descent with step `η₀/√(t+1)`, returning the best iterate.
fn train_binary(x: &Matrix, y: &[f64], reg: f64, iters: usize) -> (Vec<f64>, f64) {
    let (p, n) = (x.nrows(), x.ncols());
    let inv_n = 1.0 / n as f64;
    let mean_sq = x.column_iter().map(|c| c.norm_squared() + 1.0).sum::<f64>() * inv_n;
    let eta0 = 1.0 / (reg + mean_sq.sqrt());
    let margins = |w: &[f64], b: f64| -> Vec<f64> {
        let scores = x.tr_mul(&nalgebra::DVector::from_column_slice(w));
        scores.iter().zip(y).map(|(s, yi)| yi * (s + b)).collect()
    };
    let objective = |w: &[f64], m: &[f64]| {
        0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
            + m.iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() * inv_n
    };
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut m = margins(&w, b);
    let mut best = (w.clone(), b, objective(&w, &m));
    for t in 0..iters {
        let mut gw: Vec<f64> = w.iter().map(|v| reg * v).collect();
        let mut gb = 0.0;
        for (i, col) in x.column_iter().enumerate() {
            if m[i] < 1.0 {
                for (g, xv) in gw.iter_mut().zip(col.iter()) {
                    *g -= y[i] * xv * inv_n;
                }
                gb -= y[i] * inv_n;
            }
        }
        let eta = eta0 / ((t + 1) as f64).sqrt();
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= eta * g;
        }
        b -= eta * gb;
        m = margins(&w, b);
        let obj = objective(&w, &m);
        if obj < best.2 {
            best = (w.clone(), b, obj);
        }
    }
    (best.0, best.1)
}

/// Fit one binary hinge classifier per class (one-vs-rest).
pub fn train_classifier(
    batch: &FusedBatch,
    labels: &[usize],
    num_classes: usize,
    reg: f64,
) -> Result<LinearClassifier> {
    let x = batch.matrix();
    if labels.len() != x.ncols() {
        return Err(Error::contract(format!(
            "{} labels for {} samples",
            labels.len(),
            x.ncols()
        )));
    }
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::contract(format!(
            "regularization {reg} must be positive"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::contract(
            "classifier training needs at least two distinct classes",
        ));
    }
    let n = x.ncols() as f64;
    let mean: Vec<f64> = x.row_iter().map(|r| r.sum() / n).collect();
    let scale: Vec<f64> = x
        .row_iter()
        .zip(&mean)
        .map(|(r, m)| {
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = standardize(x, &mean, &scale);
    let fitted: Vec<(Vec<f64>, f64)> = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            if !present.contains(&c) {
                // never predicted: zero weights and a strongly negative bias
                return (vec![0.0; z.nrows()], -1e3);
            }
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            train_binary(&z, &y, reg, CLASSIFIER_ITERS)
        })
        .collect();
    let (weights, bias) = fitted.into_iter().unzip();
    Ok(LinearClassifier {
        weights,
        bias,
        reg,
        mean,
        scale,
    })
}

impl LinearClassifier {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// `classes x n` decision values.
    pub fn scores(&self, batch: &FusedBatch) -> Result<Matrix> {
        let x = batch.matrix();
        if x.nrows() != self.mean.len() {
            return Err(Error::contract(format!(
                "classifier expects {} features, got {}",
                self.mean.len(),
                x.nrows()
            )));
        }
        let z = standardize(x, &self.mean, &self.scale);
        Ok(Matrix::from_fn(self.num_classes(), z.ncols(), |c, i| {
            z.column(i)
                .iter()
                .zip(&self.weights[c])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + self.bias[c]
        }))
    }

    /// Highest-scoring class per sample; ties go to the lowest index.
    pub fn predict(&self, batch: &FusedBatch) -> Result<Vec<usize>> {
        let s = self.scores(batch)?;
        Ok(s.column_iter()
            .map(|col| argmax(col.iter().copied()))
            .collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes with no evaluation samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_predictions(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Metrics> {
    if predicted.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::contract(format!(
                "class index out of range ({t}, {p})"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok(Metrics {
        accuracy,
        per_class,
        confusion,
    })
}

pub fn evaluate(clf: &LinearClassifier, batch: &FusedBatch, labels: &[usize]) -> Result<Metrics> {
    let predicted = clf.predict(batch)?;
    metrics_from_predictions(&predicted, labels, clf.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::trainer::{init_model, TrainConfig};
    use crate::Hyperparams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(
        seed: u64,
        classes: usize,
        per: usize,
        dim: usize,
        spread: f64,
    ) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = Matrix::from_fn(dim, classes, |_, _| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..classes * per).map(|i| i / per).collect();
        let x = Matrix::from_fn(dim, labels.len(), |r, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centers[(r, labels[c])] + spread * z
        });
        (x, labels)
    }

    #[test]
    fn separable_clusters_are_fit_perfectly() {
        let x = Matrix::from_row_slice(
            2,
            6,
            &[0.0, 0.5, 0.2, 5.0, 5.5, 5.2, 0.0, 0.3, -0.4, 5.0, 4.6, 5.3],
        );
        let labels = [0, 0, 0, 1, 1, 1];
        let clf = train_classifier(&FusedBatch(x.clone()), &labels, 2, 1.0).unwrap();
        let m = evaluate(&clf, &FusedBatch(x), &labels).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    const BIAS_FEATURE: f64 = 10.0;

    /// Dual coordinate descent for the same one-vs-rest hinge problem with the
    /// bias folded into a large constant feature, so its penalty is negligible.
    fn dual_oracle(x: &Matrix, labels: &[usize], classes: usize, reg: f64) -> Vec<Vec<f64>> {
        let (p, n) = (x.nrows(), x.ncols());
        let aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                x.column(i)
                    .iter()
                    .copied()
                    .chain(std::iter::once(BIAS_FEATURE))
                    .collect()
            })
            .collect();
        (0..classes)
            .map(|c| {
                let y: Vec<f64> = labels
                    .iter()
                    .map(|&l| if l == c { 1.0 } else { -1.0 })
                    .collect();
                let mut alpha = vec![0.0; n];
                let mut w = vec![0.0; p + 1];
                for _ in 0..5000 {
                    for i in 0..n {
                        let q = aug[i].iter().map(|v| v * v).sum::<f64>() / reg;
                        let g = y[i] * aug[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
                        let new = (alpha[i] - g / q).clamp(0.0, 1.0 / n as f64);
                        let delta = (new - alpha[i]) * y[i] / reg;
                        for (wv, a) in w.iter_mut().zip(&aug[i]) {
                            *wv += delta * a;
                        }
                        alpha[i] = new;
                    }
                }
                w
            })
            .collect()
    }

    fn primal(z: &Matrix, y: &[f64], w: &[f64], b: f64, reg: f64) -> f64 {
        let hinge: f64 = z
            .column_iter()
            .zip(y)
            .map(|(col, yi)| {
                (1.0 - yi * (col.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b)).max(0.0)
            })
            .sum();
        0.5 * reg * w.iter().map(|v| v * v).sum::<f64>() + hinge / z.ncols() as f64
    }

    #[test]
    fn agrees_with_dual_solver_on_blobs() {
        let (x, labels) = blobs(7, 4, 30, 6, 1.8);
        let clf = train_classifier(&FusedBatch(x.clone()), &labels, 4, 1.0).unwrap();
        let z = standardize(&x, &clf.mean, &clf.scale);
        let oracle = dual_oracle(&z, &labels, 4, 1.0);
        let mut agree = 0;
        let mut ours_pred = Vec::new();
        let mut oracle_pred = Vec::new();
        for i in 0..z.ncols() {
            let col = z.column(i);
            ours_pred.push(argmax((0..4).map(|c| {
                col.iter()
                    .zip(&clf.weights[c])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + clf.bias[c]
            })));
            oracle_pred.push(argmax((0..4).map(|c| {
                col.iter().zip(&oracle[c]).map(|(a, b)| a * b).sum::<f64>()
                    + BIAS_FEATURE * oracle[c][6]
            })));
        }
        for (c, theta) in oracle.iter().enumerate() {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            let ours = primal(&z, &y, &clf.weights[c], clf.bias[c], 1.0);
            let theirs = primal(&z, &y, &theta[..6], BIAS_FEATURE * theta[6], 1.0);
            assert!(
                ours <= theirs * 1.01 + 1e-9,
                "class {c}: {ours} vs {theirs}"
            );
        }
        for (p, q) in ours_pred.iter().zip(&oracle_pred) {
            agree += usize::from(p == q);
        }
        assert!(
            agree as f64 >= 0.9 * z.ncols() as f64,
            "{agree}/{}",
            z.ncols()
        );
    }

    #[test]
    fn duplicated_samples_keep_the_decision_function() {
        let (x, labels) = blobs(5, 3, 12, 3, 1.0);
        let n = x.ncols();
        let doubled = Matrix::from_fn(3, 2 * n, |r, c| x[(r, c % n)]);
        let doubled_labels: Vec<usize> = (0..2 * n).map(|c| labels[c % n]).collect();
        let a = train_classifier(&FusedBatch(x.clone()), &labels, 3, 1.0).unwrap();
        let b = train_classifier(&FusedBatch(doubled), &doubled_labels, 3, 1.0).unwrap();
        let probe = FusedBatch(x);
        let diff = (a.scores(&probe).unwrap() - b.scores(&probe).unwrap()).amax();
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::zeros(2, 3);
        assert!(train_classifier(&FusedBatch(x), &[1, 1, 1], 2, 1.0).is_err());
    }

    #[test]
    fn predictions_are_scale_invariant() {
        let (x, labels) = blobs(3, 3, 10, 4, 1.0);
        let clf = train_classifier(&FusedBatch(x.clone()), &labels, 3, 1.0).unwrap();
        let mut scaled = clf.clone();
        for row in scaled.weights.iter_mut() {
            row.iter_mut().for_each(|v| *v *= 7.5);
        }
        scaled.bias.iter_mut().for_each(|v| *v *= 7.5);
        let batch = FusedBatch(x);
        assert_eq!(
            clf.predict(&batch).unwrap(),
            scaled.predict(&batch).unwrap()
        );
    }

    #[test]
    fn metrics_examples() {
        let labels = [0, 1, 2, 0, 1, 2];
        let m = metrics_from_predictions(&[0; 6], &labels, 3).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let m = metrics_from_predictions(&labels, &labels, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v > 0, i == j);
            }
        }
        let m = metrics_from_predictions(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), None]);
    }

    #[test]
    fn metrics_agree_with_counting_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<usize> = (0..200).map(|_| rng.random_range(0..5)).collect();
        let m = metrics_from_predictions(&pred, &labels, 5).unwrap();
        let mut correct = 0;
        for i in 0..200 {
            if pred[i] == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(m.accuracy, correct as f64 / 200.0);
        let trace: usize = (0..5).map(|c| m.confusion[c][c]).sum();
        assert_eq!(m.accuracy, trace as f64 / 200.0);
        for c in 0..5 {
            let total = labels.iter().filter(|&&l| l == c).count();
            let hits = (0..200).filter(|&i| labels[i] == c && pred[i] == c).count();
            assert_eq!(m.per_class[c], Some(hits as f64 / total as f64));
        }
    }

    #[test]
    fn fuse_shapes_and_linearity() {
        let mut scfg = SynthConfig::new(2, 5);
        scfg.semantic_dim = 3;
        let (ds, sem) = generate_synthetic(&scfg, 0).unwrap();
        let cfg = TrainConfig {
            hp: Hyperparams {
                d: 8,
                ..Hyperparams::default()
            },
            hidden: 8,
            ..TrainConfig::default()
        };
        let mut model = init_model(&ds, &sem, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rnd = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        model.sae.w_h = rnd(3, 8);
        model.sae.w_g = rnd(3, 8);
        model.sae.w_e = rnd(3, 16);
        let h = rnd(8, 5);
        let g = rnd(8, 5);
        let fused = fuse_codes(&model, &h, &g).unwrap();
        assert_eq!((fused.dim(), fused.len()), (9, 5));

        let zero = fuse_codes(&model, &Matrix::zeros(8, 5), &Matrix::zeros(8, 5)).unwrap();
        assert!(zero.matrix().iter().all(|&v| v == 0.0));

        for i in 0..5 {
            let mut col = Vec::new();
            for (w, input) in [
                (&model.sae.w_h, h.column(i).into_owned()),
                (&model.sae.w_g, g.column(i).into_owned()),
            ] {
                for r in 0..3 {
                    col.push((0..8).map(|j| w[(r, j)] * input[j]).sum::<f64>());
                }
            }
            for r in 0..3 {
                let joint: f64 = (0..8)
                    .map(|j| model.sae.w_e[(r, j)] * h[(j, i)])
                    .sum::<f64>()
                    + (0..8)
                        .map(|j| model.sae.w_e[(r, 8 + j)] * g[(j, i)])
                        .sum::<f64>();
                col.push(joint);
            }
            for (r, v) in col.iter().enumerate() {
                assert!((fused.matrix()[(r, i)] - v).abs() < 1e-12);
            }
        }

        let (h2, g2) = (rnd(8, 5), rnd(8, 5));
        let lhs = fuse_codes(&model, &(&h * 2.0 + &h2), &(&g * 2.0 + &g2)).unwrap();
        let rhs = fused.matrix() * 2.0 + fuse_codes(&model, &h2, &g2).unwrap().matrix();
        assert!((lhs.matrix() - rhs).amax() < 1e-12);
    }
}
