//! The joint training objective: three pairwise negative log-likelihoods
//! over cross-modal inner products plus four tied-weight semantic
//! autoencoder penalties, together with its gradients with respect to the
//! representation columns.
//!
//! Similarity terms use the likelihood-consistent form
//! `softplus(Θ) − M·Θ`, whose derivative is `σ(Θ) − M`.

use serde::{Deserialize, Serialize};

use crate::data::{build_similarity, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, sigmoid, stable_softplus, Matrix};
use crate::sae::SaeWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// image-video similarity weight
    pub a: f64,
    /// image-keyframe similarity weight
    pub b: f64,
    /// keyframe-video similarity weight
    pub c: f64,
    /// decoder weight
    pub beta: f64,
    /// encoder weight
    pub lambda: f64,
    /// representation dimension
    pub d: usize,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a: 0.1,
            b: 0.1,
            c: 1.0,
            beta: 0.1,
            lambda: 0.01,
            d: 64,
            lr: 1e-4,
            batch: 64,
            iters: 100,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, autoencoders: bool) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!(
                    "hyperparameter `{name}` = {v} must be finite and >= 0"
                )));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!(
                "hyperparameter `lr` = {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.d == 0 {
            return Err(Error::contract("hyperparameter `d` must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::contract("hyperparameter `batch` must be positive"));
        }
        if autoencoders && self.beta == 0.0 && self.lambda == 0.0 {
            return Err(Error::contract(
                "at least one of `beta`, `lambda` must be positive when autoencoders are trained",
            ));
        }
        Ok(())
    }
}

/// Whether representation gradients include the joint (keyframe+video)
/// autoencoder terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Exact derivative of the full objective.
    #[default]
    Full,
    /// Leave out the joint-autoencoder contribution to the keyframe and
    /// video gradients; exact for the objective without that penalty.
    StrictPaper,
}

/// `Θ = ½ AᵀB` for one modality pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores(pub Matrix);

impl PairScores {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn pair_scores(a: &Matrix, b: &Matrix) -> Result<PairScores> {
    if a.nrows() != b.nrows() {
        return Err(Error::contract(format!(
            "pair scores: representation dims {} and {} differ",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(PairScores(0.5 * a.transpose() * b))
}

/// `weight · Σ [softplus(Θ) − M·Θ]`
pub fn nll_pair_loss(scores: &PairScores, m: &SimilarityMatrix, weight: f64) -> Result<f64> {
    let theta = scores.matrix();
    if theta.shape() != m.matrix().shape() {
        return Err(Error::contract(format!(
            "nll: scores {:?} vs similarity {:?}",
            theta.shape(),
            m.matrix().shape()
        )));
    }
    let sum: f64 = theta
        .iter()
        .zip(m.matrix().iter())
        .map(|(&t, &mij)| stable_softplus(t) - mij * t)
        .sum();
    Ok(weight * sum)
}

/// `β‖R − WᵀS‖² + λ‖WR − S‖²`
pub fn sae_penalty(r: &Matrix, w: &Matrix, s: &Matrix, beta: f64, lambda: f64) -> Result<f64> {
    if w.ncols() != r.nrows() || w.nrows() != s.nrows() || r.ncols() != s.ncols() {
        return Err(Error::contract(format!(
            "sae penalty: R {:?}, W {:?}, S {:?} do not conform",
            r.shape(),
            w.shape(),
            s.shape()
        )));
    }
    let decoder = if beta != 0.0 {
        beta * frobenius_sq(&(r - w.transpose() * s))
    } else {
        0.0
    };
    let encoder = if lambda != 0.0 {
        lambda * frobenius_sq(&(w * r - s))
    } else {
        0.0
    };
    Ok(decoder + encoder)
}

/// `E = [H; G]`
pub fn stack(h: &Matrix, g: &Matrix) -> Result<Matrix> {
    if h.ncols() != g.ncols() {
        return Err(Error::contract(format!(
            "cannot stack {} and {} columns",
            h.ncols(),
            g.ncols()
        )));
    }
    let mut e = Matrix::zeros(h.nrows() + g.nrows(), h.ncols());
    e.rows_mut(0, h.nrows()).copy_from(h);
    e.rows_mut(h.nrows(), g.nrows()).copy_from(g);
    Ok(e)
}

/// Image (`F`), keyframe (`H`) and video (`G`) representations, `d x n` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub f: Matrix,
    pub h: Matrix,
    pub g: Matrix,
}

impl Representations {
    pub fn e(&self) -> Matrix {
        stack(&self.h, &self.g).unwrap_or_else(|_| unreachable!("validated shapes"))
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn len(&self) -> usize {
        self.f.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.f.ncols() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.f.nrows();
        let n = self.f.ncols();
        for (name, m) in [("H", &self.h), ("G", &self.g)] {
            if m.shape() != (d, n) {
                return Err(Error::contract(format!(
                    "{name} is {:?} but F is {:?}",
                    m.shape(),
                    (d, n)
                )));
            }
        }
        Ok(())
    }
}

/// Image-video (`m1`), image-keyframe (`m2`) and keyframe-video (`m3`)
/// same-class indicators; rows follow the first modality of each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarities {
    pub m1: SimilarityMatrix,
    pub m2: SimilarityMatrix,
    pub m3: SimilarityMatrix,
    m1_t: SimilarityMatrix,
    m2_t: SimilarityMatrix,
    m3_t: SimilarityMatrix,
}

impl Similarities {
    pub fn new(m1: SimilarityMatrix, m2: SimilarityMatrix, m3: SimilarityMatrix) -> Self {
        Self {
            m1_t: m1.transpose(),
            m2_t: m2.transpose(),
            m3_t: m3.transpose(),
            m1,
            m2,
            m3,
        }
    }

    /// All three pairs built from one aligned label vector.
    pub fn from_labels(labels: &[usize]) -> Self {
        let m = build_similarity(labels, labels);
        Self::new(m.clone(), m.clone(), m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub nll_image_video: f64,
    pub nll_image_keyframe: f64,
    pub nll_keyframe_video: f64,
    pub sae_image: f64,
    pub sae_keyframe: f64,
    pub sae_video: f64,
    pub sae_joint: f64,
}

impl ObjectiveParts {
    pub fn nll(&self) -> f64 {
        self.nll_image_video + self.nll_image_keyframe + self.nll_keyframe_video
    }

    pub fn sae(&self) -> f64 {
        self.sae_image + self.sae_keyframe + self.sae_video + self.sae_joint
    }

    pub fn total(&self) -> f64 {
        self.nll() + self.sae()
    }

    /// The objective whose exact gradient the given mode computes.
    pub fn for_mode(&self, mode: GradientMode) -> f64 {
        match mode {
            GradientMode::Full => self.total(),
            GradientMode::StrictPaper => self.total() - self.sae_joint,
        }
    }
}

pub fn objective_parts(
    reps: &Representations,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
) -> Result<ObjectiveParts> {
    reps.validate()?;
    let n = reps.len();
    for (name, m) in [("M1", &sims.m1), ("M2", &sims.m2), ("M3", &sims.m3)] {
        if m.matrix().shape() != (n, n) {
            return Err(Error::contract(format!(
                "{name} is {:?}, expected {n}x{n}",
                m.matrix().shape()
            )));
        }
    }
    let (beta, lambda) = (hp.beta, hp.lambda);
    let sae = |r: &Matrix, wm: &Matrix| {
        if beta == 0.0 && lambda == 0.0 {
            Ok(0.0)
        } else {
            sae_penalty(r, wm, s, beta, lambda)
        }
    };
    Ok(ObjectiveParts {
        nll_image_video: nll_pair_loss(&pair_scores(&reps.f, &reps.g)?, &sims.m1, hp.a)?,
        nll_image_keyframe: nll_pair_loss(&pair_scores(&reps.f, &reps.h)?, &sims.m2, hp.b)?,
        nll_keyframe_video: nll_pair_loss(&pair_scores(&reps.h, &reps.g)?, &sims.m3, hp.c)?,
        sae_image: sae(&reps.f, &w.w_f)?,
        sae_keyframe: sae(&reps.h, &w.w_h)?,
        sae_video: sae(&reps.g, &w.w_g)?,
        sae_joint: sae(&reps.e(), &w.w_e)?,
    })
}

/// Full objective value with an explicit joint representation `e`, which
/// must equal `[H; G]`.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    f: &Matrix,
    h: &Matrix,
    g: &Matrix,
    e: &Matrix,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
) -> Result<f64> {
    let reps = Representations {
        f: f.clone(),
        h: h.clone(),
        g: g.clone(),
    };
    reps.validate()?;
    if *e != reps.e() {
        return Err(Error::contract(
            "E must be the vertical concatenation [H; G]",
        ));
    }
    Ok(objective_parts(&reps, sims, s, w, hp)?.total())
}

/// `Σ_t (weight/2) · other_t · (σ(½ ownᵀ other_t) − M_t)ᵀ` where each `M_t`
/// already has one row per column of `own`.
fn similarity_gradient(own: &Matrix, terms: &[(f64, &Matrix, Matrix)]) -> Matrix {
    let mut out = Matrix::zeros(own.nrows(), own.ncols());
    for (weight, other, m_rows) in terms {
        if *weight == 0.0 {
            continue;
        }
        let mut p = 0.5 * own.transpose() * *other;
        p.zip_apply(m_rows, |t, mij| *t = sigmoid(*t) - mij);
        out += (0.5 * weight) * *other * p.transpose();
    }
    out
}

/// `2β(R − WᵀS) + 2λWᵀ(WR − S)` column-wise.
fn sae_gradient(r: &Matrix, w: &Matrix, s: &Matrix, beta: f64, lambda: f64) -> Matrix {
    let mut out = Matrix::zeros(r.nrows(), r.ncols());
    if beta != 0.0 {
        out += (2.0 * beta) * (r - w.transpose() * s);
    }
    if lambda != 0.0 {
        out += (2.0 * lambda) * w.transpose() * (w * r - s);
    }
    out
}

fn check_columns(cols: &[usize], n: usize) -> Result<()> {
    match cols.iter().find(|&&i| i >= n) {
        Some(bad) => Err(Error::contract(format!(
            "sample index {bad} out of range for {n} columns"
        ))),
        None => Ok(()),
    }
}

/// Which representation a batched gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Keyframe,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Keyframe, Modality::Video];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Keyframe => "keyframe",
            Modality::Video => "video",
        }
    }
}

/// Gradient of the objective with respect to the columns `cols` of one
/// modality's representation, returned as a `d x cols.len()` matrix.
///
/// `reps` supplies every representation; the columns of the target modality
/// listed in `cols` are the ones differentiated. `s` is the full `k x n`
/// semantic matrix.
#[allow(clippy::too_many_arguments)]
pub fn representation_gradient(
    modality: Modality,
    cols: &[usize],
    reps: &Representations,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
    mode: GradientMode,
) -> Result<Matrix> {
    reps.validate()?;
    check_columns(cols, reps.len())?;
    let s_b = s.select_columns(cols);
    let (beta, lambda) = (hp.beta, hp.lambda);
    let d = reps.dim();
    let joint = |h_b: &Matrix, g_b: &Matrix| -> Result<Matrix> {
        let e_b = stack(h_b, g_b)?;
        Ok(sae_gradient(&e_b, &w.w_e, &s_b, beta, lambda))
    };
    let use_joint = mode == GradientMode::Full && (beta != 0.0 || lambda != 0.0);
    let grad = match modality {
        Modality::Image => {
            let f_b = reps.f.select_columns(cols);
            let mut g = similarity_gradient(
                &f_b,
                &[
                    (hp.a, &reps.g, sims.m1.select_rows(cols).matrix().clone()),
                    (hp.b, &reps.h, sims.m2.select_rows(cols).matrix().clone()),
                ],
            );
            g += sae_gradient(&f_b, &w.w_f, &s_b, beta, lambda);
            g
        }
        Modality::Keyframe => {
            let h_b = reps.h.select_columns(cols);
            let mut g = similarity_gradient(
                &h_b,
                &[
                    (hp.b, &reps.f, sims.m2_t.select_rows(cols).matrix().clone()),
                    (hp.c, &reps.g, sims.m3.select_rows(cols).matrix().clone()),
                ],
            );
            g += sae_gradient(&h_b, &w.w_h, &s_b, beta, lambda);
            if use_joint {
                g += joint(&h_b, &reps.g.select_columns(cols))?.rows(0, d);
            }
            g
        }
        Modality::Video => {
            let g_b = reps.g.select_columns(cols);
            let mut g = similarity_gradient(
                &g_b,
                &[
                    (hp.a, &reps.f, sims.m1_t.select_rows(cols).matrix().clone()),
                    (hp.c, &reps.h, sims.m3_t.select_rows(cols).matrix().clone()),
                ],
            );
            g += sae_gradient(&g_b, &w.w_g, &s_b, beta, lambda);
            if use_joint {
                g += joint(&reps.h.select_columns(cols), &g_b)?.rows(d, d);
            }
            g
        }
    };
    Ok(grad)
}

/// `∂J/∂F_{*i}`
pub fn grad_f(
    i: usize,
    reps: &Representations,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
) -> Result<Matrix> {
    representation_gradient(
        Modality::Image,
        &[i],
        reps,
        sims,
        s,
        w,
        hp,
        GradientMode::Full,
    )
}

/// `∂J/∂H_{*j}`
pub fn grad_h(
    j: usize,
    reps: &Representations,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
    mode: GradientMode,
) -> Result<Matrix> {
    representation_gradient(Modality::Keyframe, &[j], reps, sims, s, w, hp, mode)
}

/// `∂J/∂G_{*k}`
pub fn grad_g(
    k: usize,
    reps: &Representations,
    sims: &Similarities,
    s: &Matrix,
    w: &SaeWeights,
    hp: &Hyperparams,
    mode: GradientMode,
) -> Result<Matrix> {
    representation_gradient(Modality::Video, &[k], reps, sims, s, w, hp, mode)
}
