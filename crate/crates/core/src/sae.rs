//! Closed-form updates of the tied-weight semantic autoencoders.
//!
//! For a representation `R` (`m x n`) and semantic matrix `S` (`k x n`) the
//! encoder `W` (`k x m`) minimizing `β‖R − WᵀS‖² + λ‖WR − S‖²` satisfies
//! `βSSᵀ W + W λRRᵀ = (β + λ) S Rᵀ`.

use crate::error::{Error, Result};
use crate::linalg::{solve_sylvester, Matrix};
use crate::objective::stack;

/// Relative size of the ridge added to `βSSᵀ` when the plain solve fails.
pub const RIDGE_SCALE: f64 = 1e-10;

/// Encoders of the image, keyframe, video and joint autoencoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeWeights {
    /// `k x d`
    pub w_f: Matrix,
    /// `k x d`
    pub w_h: Matrix,
    /// `k x d`
    pub w_g: Matrix,
    /// `k x 2d`
    pub w_e: Matrix,
}

impl SaeWeights {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            w_f: Matrix::zeros(k, d),
            w_h: Matrix::zeros(k, d),
            w_g: Matrix::zeros(k, d),
            w_e: Matrix::zeros(k, 2 * d),
        }
    }

    pub fn semantic_dim(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn repr_dim(&self) -> usize {
        self.w_f.ncols()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w_f, &self.w_h, &self.w_g, &self.w_e]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Result of one encoder solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedEncoder {
    pub w: Matrix,
    /// The plain Sylvester solve failed and the ridge fallback was used.
    pub ridge: bool,
}

/// Minimizer of `β‖R − WᵀS‖² + λ‖WR − S‖²` over `W`.
pub fn solve_w(r: &Matrix, s: &Matrix, beta: f64, lambda: f64) -> Result<Matrix> {
    solve_encoder(r, s, beta, lambda).map(|o| o.w)
}

pub fn solve_encoder(r: &Matrix, s: &Matrix, beta: f64, lambda: f64) -> Result<SolvedEncoder> {
    if r.ncols() != s.ncols() {
        return Err(Error::contract(format!(
            "R has {} columns but S has {}",
            r.ncols(),
            s.ncols()
        )));
    }
    if r.ncols() == 0 {
        return Err(Error::contract(
            "autoencoder solve needs at least one sample",
        ));
    }
    if !(beta >= 0.0 && lambda >= 0.0 && beta.is_finite() && lambda.is_finite())
        || beta + lambda == 0.0
    {
        return Err(Error::contract(format!(
            "beta = {beta} and lambda = {lambda} must be >= 0 and not both zero"
        )));
    }
    let a = beta * s * s.transpose();
    let b = lambda * r * r.transpose();
    let c = (beta + lambda) * s * r.transpose();
    match solve_sylvester(&a, &b, &c) {
        Ok(w) => Ok(SolvedEncoder { w, ridge: false }),
        Err(Error::Numerical { .. }) => {
            // both operands are PSD, so tr(A) + tr(B) bounds their norms and the
            // ridge stays clear of the solver's singularity threshold
            let mut scale = a.trace() + b.trace();
            if scale <= 0.0 {
                scale = 1.0;
            }
            let ridged = a + Matrix::identity(s.nrows(), s.nrows()) * (RIDGE_SCALE * scale);
            let w = solve_sylvester(&ridged, &b, &c)?;
            Ok(SolvedEncoder { w, ridge: true })
        }
        Err(e) => Err(e),
    }
}

/// Outcome of refreshing all four encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeUpdate {
    pub weights: SaeWeights,
    /// Number of the four solves that needed the ridge fallback.
    pub ridge_activations: usize,
}

/// Solve the four autoencoders independently; the joint one sees `[H; G]`.
pub fn update_all(
    f: &Matrix,
    h: &Matrix,
    g: &Matrix,
    s: &Matrix,
    beta: f64,
    lambda: f64,
) -> Result<SaeUpdate> {
    let e = stack(h, g)?;
    let ((wf, wh), (wg, we)) = rayon::join(
        || {
            rayon::join(
                || solve_encoder(f, s, beta, lambda),
                || solve_encoder(h, s, beta, lambda),
            )
        },
        || {
            rayon::join(
                || solve_encoder(g, s, beta, lambda),
                || solve_encoder(&e, s, beta, lambda),
            )
        },
    );
    let (wf, wh, wg, we) = (wf?, wh?, wg?, we?);
    let ridge_activations = [&wf, &wh, &wg, &we].iter().filter(|o| o.ridge).count();
    Ok(SaeUpdate {
        weights: SaeWeights {
            w_f: wf.w,
            w_h: wh.w,
            w_g: wg.w,
            w_e: we.w,
        },
        ridge_activations,
    })
}

/// Apply a single encoder to one semantic-autoencoder input.
pub fn encode(w: &Matrix, r: &Matrix) -> Result<Matrix> {
    if w.ncols() != r.nrows() {
        return Err(Error::contract(format!(
            "encoder expects {} rows, got {}",
            w.ncols(),
            r.nrows()
        )));
    }
    Ok(w * r)
}
