//! Dense matrix primitives and Sylvester-equation solvers.
//!
//! Two independent routes solve `A W + W B = C`:
//!
//! * [`solve_sylvester`]: Bartels-Stewart. Both coefficient matrices are
//!   reduced to real Schur form and the transformed system is solved block by
//!   block (1x1 and 2x2 diagonal blocks), then rotated back.
//! * [`sylvester_oracle`]: vectorizes the equation as
//!   `(I ⊗ A + Bᵀ ⊗ I) vec(W) = vec(C)` and runs a dense LU solve. It is
//!   cubic in `k·d` and only meant for small systems and cross-checking.

use nalgebra::{DMatrix, FullPivLU, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Column-major dense `f64` matrix; feature matrices hold one sample per column.
pub type Matrix = DMatrix<f64>;

/// Relative residual accepted by both Sylvester solvers.
pub const SYLVESTER_TOLERANCE: f64 = 1e-8;

/// Largest `k·d` the Kronecker oracle will accept.
pub const ORACLE_MAX_UNKNOWNS: usize = 4096;

/// Relative pivot size below which the Schur-form system counts as singular.
const SINGULAR_PIVOT: f64 = 1e-11;

/// `log(1 + e^x)` without overflow.
pub fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid evaluated on the branch that never exponentiates a large
/// positive number.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `‖AW + WB − C‖_F / max(1, ‖C‖_F)`.
pub fn sylvester_residual(a: &Matrix, b: &Matrix, c: &Matrix, w: &Matrix) -> f64 {
    let r = a * w + w * b - c;
    r.norm() / c.norm().max(1.0)
}

fn check_shapes(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "sylvester: A must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !b.is_square() {
        return Err(Error::contract(format!(
            "sylvester: B must be square, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if c.nrows() != a.nrows() || c.ncols() != b.nrows() {
        return Err(Error::contract(format!(
            "sylvester: C is {}x{} but A is {}x{} and B is {}x{}",
            c.nrows(),
            c.ncols(),
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("sylvester: empty coefficient matrix"));
    }
    if !(all_finite(a) && all_finite(b) && all_finite(c)) {
        return Err(Error::contract("sylvester: non-finite input"));
    }
    Ok(())
}

fn accept(a: &Matrix, b: &Matrix, c: &Matrix, w: Matrix) -> Result<Matrix> {
    let residual = sylvester_residual(a, b, c, &w);
    if !residual.is_finite() || residual > SYLVESTER_TOLERANCE || !all_finite(&w) {
        return Err(Error::Numerical {
            reason: "Sylvester residual above tolerance".into(),
            residual,
        });
    }
    Ok(w)
}

/// Real Schur factorization `M = Q T Qᵀ`, returning `(Q, T, blocks)` where
/// `blocks` lists `(start, size)` of the diagonal blocks of `T`.
/// Orthogonal factor, quasi-triangular factor and its `(start, size)` blocks.
type RealSchur = (Matrix, Matrix, Vec<(usize, usize)>);

fn real_schur(m: &Matrix) -> Result<RealSchur> {
    // Symmetric input: the eigendecomposition is a diagonal Schur form and
    // converges where the general QR iteration can stall on clustered zeros.
    let asym = (m - m.transpose()).amax();
    if asym <= 1e-14 * m.amax() {
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let t = Matrix::from_diagonal(&eig.eigenvalues);
        let blocks = (0..m.nrows()).map(|i| (i, 1)).collect();
        return Ok((eig.eigenvectors, t, blocks));
    }
    let schur =
        Schur::try_new(m.clone(), f64::EPSILON, 100_000).ok_or_else(|| Error::Numerical {
            reason: "real Schur iteration did not converge".into(),
            residual: f64::NAN,
        })?;
    let (q, mut t) = schur.unpack();
    let n = t.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n {
            let sub = t[(i + 1, i)];
            let diag = t[(i, i)].abs() + t[(i + 1, i + 1)].abs();
            if sub != 0.0 && sub.abs() > f64::EPSILON * diag {
                blocks.push((i, 2));
                i += 2;
                continue;
            }
            t[(i + 1, i)] = 0.0;
        }
        blocks.push((i, 1));
        i += 1;
    }
    // Everything below the block diagonal is rounding noise.
    for j in 0..n {
        for r in (j + 2)..n {
            t[(r, j)] = 0.0;
        }
    }
    Ok((q, t, blocks))
}

/// Solve `T Y + Y R = D` for a `p x q` block with `p, q <= 2`.
fn solve_block(t: &Matrix, r: &Matrix, d: &Matrix, pivot_floor: f64) -> Option<Matrix> {
    let (p, q) = (t.nrows(), r.nrows());
    let n = p * q;
    let mut k = Matrix::zeros(n, n);
    // vec(TY) = (I_q ⊗ T) vec(Y); vec(YR) = (Rᵀ ⊗ I_p) vec(Y)
    for blk in 0..q {
        for i in 0..p {
            for j in 0..p {
                k[(blk * p + i, blk * p + j)] += t[(i, j)];
            }
        }
    }
    for bi in 0..q {
        for bj in 0..q {
            let coef = r[(bj, bi)];
            for i in 0..p {
                k[(bi * p + i, bj * p + i)] += coef;
            }
        }
    }
    if n == 1 {
        let piv = k[(0, 0)];
        if piv.abs() <= pivot_floor {
            return None;
        }
        return Some(Matrix::from_element(1, 1, d[(0, 0)] / piv));
    }
    let lu = FullPivLU::new(k);
    let u = lu.u();
    let min_pivot = (0..n)
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= pivot_floor {
        return None;
    }
    let rhs = Matrix::from_column_slice(n, 1, d.as_slice());
    let y = lu.solve(&rhs)?;
    Some(Matrix::from_column_slice(p, q, y.as_slice()))
}

/// Solve `A W + W B = C` by Bartels-Stewart.
///
/// Fails with [`Error::Numerical`] when the spectra of `A` and `-B` come
/// within working precision of each other, or when the final residual
/// `‖AW + WB − C‖_F` exceeds `1e-8 · max(1, ‖C‖_F)`.
pub fn solve_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    check_shapes(a, b, c)?;
    let (u, t, t_blocks) = real_schur(a)?;
    let (v, r, r_blocks) = real_schur(b)?;
    let d = u.transpose() * c * &v;
    let (k, m) = (a.nrows(), b.nrows());
    let pivot_floor = SINGULAR_PIVOT * (a.norm() + b.norm());
    let mut y = Matrix::zeros(k, m);

    for &(qs, qn) in &r_blocks {
        for &(ps, pn) in t_blocks.iter().rev() {
            let mut rhs = d.view((ps, qs), (pn, qn)).into_owned();
            let below = ps + pn;
            if below < k {
                rhs -= t.view((ps, below), (pn, k - below)) * y.view((below, qs), (k - below, qn));
            }
            if qs > 0 {
                rhs -= y.view((ps, 0), (pn, qs)) * r.view((0, qs), (qs, qn));
            }
            let t_pp = t.view((ps, ps), (pn, pn)).into_owned();
            let r_qq = r.view((qs, qs), (qn, qn)).into_owned();
            let blk =
                solve_block(&t_pp, &r_qq, &rhs, pivot_floor).ok_or_else(|| Error::Numerical {
                    reason: format!(
                        "spectra of A and -B nearly overlap (Schur block rows {ps}, cols {qs})"
                    ),
                    residual: f64::INFINITY,
                })?;
            y.view_mut((ps, qs), (pn, qn)).copy_from(&blk);
        }
    }

    let w = &u * y * v.transpose();
    accept(a, b, c, w)
}

/// Solve `A W + W B = C` through the Kronecker-vectorized dense system.
///
/// Independent of the Schur route; limited to `k·d <= 4096` unknowns.
pub fn sylvester_oracle(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    check_shapes(a, b, c)?;
    let (k, d) = (a.nrows(), b.nrows());
    let n = k * d;
    if n > ORACLE_MAX_UNKNOWNS {
        return Err(Error::contract(format!(
            "sylvester oracle: {n} unknowns exceeds limit {ORACLE_MAX_UNKNOWNS}"
        )));
    }
    let mut system = Matrix::zeros(n, n);
    for col in 0..d {
        for i in 0..k {
            let row = col * k + i;
            for j in 0..k {
                system[(row, col * k + j)] += a[(i, j)];
            }
            for l in 0..d {
                system[(row, l * k + i)] += b[(l, col)];
            }
        }
    }
    let scale = system.norm();
    let lu = FullPivLU::new(system);
    let u = lu.u();
    let min_pivot = (0..n)
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= SINGULAR_PIVOT * scale {
        return Err(Error::Numerical {
            reason: "Kronecker system is singular".into(),
            residual: f64::INFINITY,
        });
    }
    let rhs = Matrix::from_column_slice(n, 1, c.as_slice());
    let sol = lu.solve(&rhs).ok_or_else(|| Error::Numerical {
        reason: "Kronecker system is singular".into(),
        residual: f64::INFINITY,
    })?;
    accept(a, b, c, Matrix::from_column_slice(k, d, sol.as_slice()))
}
