//! Small dense complex linear algebra: a one-sided Jacobi SVD and the
//! truncated pseudo-inverse solve built on it.
//!
//! The problems here are tall and very narrow (a steering matrix with a
//! handful of columns), where Jacobi orthogonalization is both simple and
//! more accurate than bidiagonalization.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Thin SVD A = U diag(sigma) V^H with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Array2<Complex64>,
    pub sigma: Vec<f64>,
    pub v: Array2<Complex64>,
}

/// One-sided Jacobi SVD of a tall matrix (nrows >= ncols).
///
/// Column pairs are rotated until all pairwise inner products vanish
/// relative to the column norms; the accumulated rotations form V and the
/// orthogonalized columns carry U and the singular values.
pub fn svd_thin(a: &Array2<Complex64>) -> Result<Svd> {
    let (m, n) = a.dim();
    if m < n {
        return Err(Error::Dimension(format!("svd_thin expects a tall matrix, got {m} x {n}")));
    }
    if n == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }

    let mut w = a.clone();
    let mut v: Array2<Complex64> = Array2::eye(n);
    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 60;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0f64;
                let mut aqq = 0.0f64;
                let mut apq = Complex64::default();
                for r in 0..m {
                    app += w[[r, p]].norm_sqr();
                    aqq += w[[r, q]].norm_sqr();
                    apq += w[[r, p]].conj() * w[[r, q]];
                }
                if apq.norm() <= TOL * (app * aqq).sqrt() || apq.norm() == 0.0 {
                    continue;
                }
                rotated = true;
                // Diagonalize [[app, apq], [conj(apq), aqq]]: strip the phase
                // of the coupling, then a real Jacobi rotation.
                let phase = apq / apq.norm();
                let zeta = (aqq - app) / (2.0 * apq.norm());
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wp = w[[r, p]];
                    let wq = w[[r, q]] * phase.conj();
                    w[[r, p]] = c * wp - s * wq;
                    w[[r, q]] = s * wp + c * wq;
                }
                for r in 0..n {
                    let vp = v[[r, p]];
                    let vq = v[[r, q]] * phase.conj();
                    v[[r, p]] = c * vp - s * vq;
                    v[[r, q]] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Extract singular values, normalize U, sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> =
        (0..n).map(|c| (0..m).map(|r| w[[r, c]].norm_sqr()).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Array2::zeros((m, n));
    let mut vv = Array2::zeros((n, n));
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for r in 0..m {
            u[[r, dst]] = if s > 0.0 { w[[r, src]] / s } else { Complex64::default() };
        }
        for r in 0..n {
            vv[[r, dst]] = v[[r, src]];
        }
    }
    Ok(Svd { u, sigma, v: vv })
}

/// Least-squares solve of A X = B through the truncated pseudo-inverse.
///
/// Singular values below `rel_cutoff` times the largest are dropped; the
/// retained count is returned as the numerical rank.
pub fn pinv_solve(
    a: &Array2<Complex64>,
    b: &Array2<Complex64>,
    rel_cutoff: f64,
) -> Result<(Array2<Complex64>, usize)> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "A has {} rows but B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let svd = svd_thin(a)?;
    let cutoff = rel_cutoff * svd.sigma.first().copied().unwrap_or(0.0);
    let rank = svd.sigma.iter().take_while(|&&s| s > cutoff && s > 0.0).count();

    // X = V diag(1/sigma) U^H B over the retained subspace.
    let uh_b = svd.u.t().mapv(|z| z.conj()).dot(b);
    let n = a.ncols();
    let mut x = Array2::zeros((n, b.ncols()));
    for k in 0..rank {
        let inv = 1.0 / svd.sigma[k];
        for c in 0..b.ncols() {
            let coeff = uh_b[[k, c]] * inv;
            for r in 0..n {
                x[[r, c]] += svd.v[[r, k]] * coeff;
            }
        }
    }
    Ok((x, rank))
}
