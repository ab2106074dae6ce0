//! Tri-modal datasets, similarity matrices, semantic tables and the
//! synthetic generator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix};

/// Column-per-sample feature matrix.
pub type FeatureMatrix = Matrix;

/// Aligned image / keyframe / video features: column `i` of every matrix
/// belongs to sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriModalDataset {
    images: FeatureMatrix,
    keyframes: FeatureMatrix,
    videos: FeatureMatrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl TriModalDataset {
    pub fn new(
        images: FeatureMatrix,
        keyframes: FeatureMatrix,
        videos: FeatureMatrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        for (name, m) in [
            ("images", &images),
            ("keyframes", &keyframes),
            ("videos", &videos),
        ] {
            if m.ncols() != n {
                return Err(Error::contract(format!(
                    "{name} has {} columns but there are {n} labels",
                    m.ncols()
                )));
            }
            if m.nrows() == 0 {
                return Err(Error::contract(format!("{name} has zero feature rows")));
            }
            if !all_finite(m) {
                return Err(Error::contract(format!(
                    "{name} contains non-finite values"
                )));
            }
        }
        if class_names.is_empty() {
            return Err(Error::contract("dataset needs at least one class name"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            keyframes,
            videos,
            labels,
            class_names,
        })
    }

    pub fn images(&self) -> &FeatureMatrix {
        &self.images
    }

    pub fn keyframes(&self) -> &FeatureMatrix {
        &self.keyframes
    }

    pub fn videos(&self) -> &FeatureMatrix {
        &self.videos
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keep only the given sample columns, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract(format!(
                "subset index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let pick = |m: &Matrix| m.select_columns(indices);
        Ok(Self {
            images: pick(&self.images),
            keyframes: pick(&self.keyframes),
            videos: pick(&self.videos),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        })
    }
}

/// Binary same-class indicator between two labelled sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Keep the listed rows (all columns).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select_rows(rows))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Entry `(i, j)` is 1 iff `labels_a[i] == labels_b[j]`.
pub fn build_similarity(labels_a: &[usize], labels_b: &[usize]) -> SimilarityMatrix {
    SimilarityMatrix(Matrix::from_fn(labels_a.len(), labels_b.len(), |i, j| {
        if labels_a[i] == labels_b[j] {
            1.0
        } else {
            0.0
        }
    }))
}

/// One semantic embedding column per class, shared by all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    embeddings: Matrix,
    normalized: bool,
}

impl SemanticTable {
    pub fn new(embeddings: Matrix, normalized: bool) -> Result<Self> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(Error::contract("semantic table must be non-empty"));
        }
        if !all_finite(&embeddings) {
            return Err(Error::contract("semantic table contains non-finite values"));
        }
        let c = embeddings.ncols();
        for i in 0..c {
            for j in (i + 1)..c {
                if embeddings.column(i) == embeddings.column(j) {
                    return Err(Error::contract(format!(
                        "semantic columns {i} and {j} are identical"
                    )));
                }
            }
        }
        if normalized {
            for (i, col) in embeddings.column_iter().enumerate() {
                if (col.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "semantic column {i} has norm {} but table is flagged normalized",
                        col.norm()
                    )));
                }
            }
        }
        Ok(Self {
            embeddings,
            normalized,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Per-sample semantic matrix `S`: column `i` is the table column of `labels[i]`.
pub fn expand_semantics(table: &SemanticTable, labels: &[usize]) -> Result<Matrix> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= table.num_classes()) {
        return Err(Error::contract(format!(
            "label {bad} has no semantic column ({} classes in table)",
            table.num_classes()
        )));
    }
    Ok(table.embeddings.select_columns(labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "defaults::image_dim")]
    pub image_dim: usize,
    #[serde(default = "defaults::keyframe_dim")]
    pub keyframe_dim: usize,
    #[serde(default = "defaults::video_dim")]
    pub video_dim: usize,
    #[serde(default = "defaults::semantic_dim")]
    pub semantic_dim: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Extra noise multiplier on the video modality; values above 1 make
    /// videos the hardest modality to classify from alone.
    #[serde(default = "defaults::video_noise_scale")]
    pub video_noise_scale: f64,
}

mod defaults {
    pub fn image_dim() -> usize {
        32
    }
    pub fn keyframe_dim() -> usize {
        32
    }
    pub fn video_dim() -> usize {
        48
    }
    pub fn semantic_dim() -> usize {
        16
    }
    pub fn latent_dim() -> usize {
        12
    }
    pub fn noise() -> f64 {
        0.05
    }
    pub fn video_noise_scale() -> f64 {
        1.0
    }
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize) -> Self {
        Self {
            classes,
            per_class,
            image_dim: defaults::image_dim(),
            keyframe_dim: defaults::keyframe_dim(),
            video_dim: defaults::video_dim(),
            semantic_dim: defaults::semantic_dim(),
            latent_dim: defaults::latent_dim(),
            noise: defaults::noise(),
            video_noise_scale: defaults::video_noise_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("classes", self.classes),
            ("per_class", self.per_class),
            ("image_dim", self.image_dim),
            ("keyframe_dim", self.keyframe_dim),
            ("video_dim", self.video_dim),
            ("semantic_dim", self.semantic_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::contract(format!(
                    "synth config field `{name}` must be positive"
                )));
            }
        }
        if self.classes < 2 {
            return Err(Error::contract(
                "synth config field `classes` must be at least 2",
            ));
        }
        // A one-dimensional table can only hold two distinct unit vectors.
        if self.semantic_dim == 1 && self.classes > 2 {
            return Err(Error::contract(
                "synth config field `semantic_dim` is too small for distinct unit columns",
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::contract(
                "synth config field `noise` must be finite and >= 0",
            ));
        }
        if !(self.video_noise_scale.is_finite() && self.video_noise_scale >= 0.0) {
            return Err(Error::contract(
                "synth config field `video_noise_scale` must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Draw a deterministic tri-modal dataset plus matching semantic table.
///
/// Every class gets a latent prototype; each modality applies its own fixed
/// random linear map to the prototype and adds isotropic Gaussian noise.
/// Samples are laid out class by class.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(TriModalDataset, SemanticTable)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.latent_dim;
    let prototypes = gaussian(&mut rng, m, cfg.classes, 1.0);
    let map_scale = 1.0 / (m as f64).sqrt();
    let maps = [
        gaussian(&mut rng, cfg.image_dim, m, map_scale),
        gaussian(&mut rng, cfg.keyframe_dim, m, map_scale),
        gaussian(&mut rng, cfg.video_dim, m, map_scale),
    ];
    let noise = [cfg.noise, cfg.noise, cfg.noise * cfg.video_noise_scale];

    let labels: Vec<usize> = (0..cfg.classes)
        .flat_map(|c| std::iter::repeat_n(c, cfg.per_class))
        .collect();
    let n = labels.len();
    let mut feats = Vec::with_capacity(3);
    for (map, sigma) in maps.iter().zip(noise) {
        let clean = map * &prototypes;
        let mut out = Matrix::zeros(map.nrows(), n);
        for (i, &l) in labels.iter().enumerate() {
            out.set_column(i, &clean.column(l));
        }
        if sigma > 0.0 {
            out += gaussian(&mut rng, map.nrows(), n, sigma);
        }
        feats.push(out);
    }

    let mut table = gaussian(&mut rng, cfg.semantic_dim, cfg.classes, 1.0);
    for mut col in table.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let names = (0..cfg.classes).map(|c| format!("class_{c:02}")).collect();
    let videos = feats.pop().unwrap_or_else(|| unreachable!());
    let keyframes = feats.pop().unwrap_or_else(|| unreachable!());
    let images = feats.pop().unwrap_or_else(|| unreachable!());
    let dataset = TriModalDataset::new(images, keyframes, videos, labels, names)?;
    Ok((dataset, SemanticTable::new(table, true)?))
}

/// Seeded stratified split: per class, `max(1, round(ratio · n_c))` samples
/// (capped at `n_c`) go to the training side. Both index lists are sorted.
pub fn stratified_split(
    labels: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!("ratio {ratio} must lie in (0, 1]")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((ratio * members.len() as f64).round() as usize).clamp(1, members.len());
        train.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn similarity_examples() {
        let s = build_similarity(&[0, 1], &[0, 1]);
        assert_eq!(s.matrix(), &Matrix::identity(2, 2));
        let s = build_similarity(&[0, 0, 1], &[0, 1, 1]);
        let expect = Matrix::from_row_slice(3, 3, &[1., 0., 0., 1., 0., 0., 0., 1., 1.]);
        assert_eq!(s.matrix(), &expect);
    }

    #[test]
    fn expand_semantics_picks_columns() {
        let table = SemanticTable::new(Matrix::identity(3, 3), true).unwrap();
        let s = expand_semantics(&table, &[2, 0]).unwrap();
        assert_eq!(s, Matrix::from_row_slice(3, 2, &[0., 1., 0., 0., 1., 0.]));
        let same = expand_semantics(&table, &[1, 1, 1]).unwrap();
        for col in same.column_iter() {
            assert_eq!(col, table.embeddings().column(1));
        }
        assert!(expand_semantics(&table, &[3]).is_err());
    }

    #[test]
    fn semantic_table_rejects_duplicates_and_bad_norms() {
        let dup = Matrix::from_row_slice(2, 2, &[1., 1., 0., 0.]);
        assert!(SemanticTable::new(dup, false).is_err());
        let unnormalized = Matrix::from_row_slice(2, 2, &[2., 0., 0., 1.]);
        assert!(SemanticTable::new(unnormalized.clone(), true).is_err());
        assert!(SemanticTable::new(unnormalized, false).is_ok());
    }

    #[test]
    fn noiseless_synthesis_collapses_classes() {
        let mut cfg = SynthConfig::new(2, 5);
        cfg.noise = 0.0;
        let (ds, table) = generate_synthetic(&cfg, 3).unwrap();
        for m in [ds.images(), ds.keyframes(), ds.videos()] {
            for i in 0..ds.len() {
                let first = ds
                    .labels()
                    .iter()
                    .position(|&l| l == ds.labels()[i])
                    .unwrap();
                assert_eq!(m.column(i), m.column(first));
            }
        }
        assert!(table.is_normalized());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = SynthConfig::new(3, 4);
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 12).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn synthesis_rejects_zero_fields() {
        let mut cfg = SynthConfig::new(2, 4);
        cfg.video_dim = 0;
        let err = generate_synthetic(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("video_dim"));
        assert!(generate_synthetic(&SynthConfig::new(0, 4), 0).is_err());
    }

    #[test]
    fn dataset_rejects_misaligned_columns() {
        let err = TriModalDataset::new(
            Matrix::zeros(2, 3),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 3),
            vec![0, 1, 0],
            vec!["a".into(), "b".into()],
        );
        assert!(err.is_err());
        let err = TriModalDataset::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 1),
            vec![2],
            vec!["a".into(), "b".into()],
        );
        assert!(err.is_err());
    }

    #[test]
    fn stratified_split_per_class_counts() {
        let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 40)).collect();
        let (train, test) = stratified_split(&labels, 0.1, 5).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 144);
        for c in 0..4 {
            assert_eq!(train.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        let again = stratified_split(&labels, 0.1, 5).unwrap();
        assert_eq!((train, test), again);
        assert!(stratified_split(&labels, 0.0, 5).is_err());
    }

    proptest! {
        #[test]
        fn similarity_counts_and_symmetry(labels in proptest::collection::vec(0usize..4, 1..20),
                                          other in proptest::collection::vec(0usize..4, 1..20)) {
            let s = build_similarity(&labels, &labels);
            prop_assert_eq!(s.matrix(), &s.matrix().transpose());
            for i in 0..labels.len() {
                prop_assert_eq!(s.get(i, i), 1.0);
            }
            let cross = build_similarity(&labels, &other);
            let ones: f64 = cross.matrix().iter().sum();
            let expect: usize = (0..4)
                .map(|c| labels.iter().filter(|&&l| l == c).count() * other.iter().filter(|&&l| l == c).count())
                .sum();
            prop_assert_eq!(ones as usize, expect);
            prop_assert!(cross.matrix().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn expand_semantics_preserves_norms(labels in proptest::collection::vec(0usize..5, 1..12), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = SemanticTable::new(gaussian(&mut rng, 3, 5, 1.0), false).unwrap();
            let s = expand_semantics(&table, &labels).unwrap();
            for (i, &l) in labels.iter().enumerate() {
                prop_assert_eq!(s.column(i).norm(), table.embeddings().column(l).norm());
            }
        }
    }
}
