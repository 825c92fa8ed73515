//! Matrix-free linear operators for the message-passing engine.
//!
//! The engine touches the measurement operator only through four products:
//! apply, adjoint apply, and the two |A|^2-weighted sums used by the variance
//! updates. Never through individual entries.

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;

use crate::channel_model::{dft_matrix, zc_pilot_matrix};
use crate::error::{Error, Result};

/// Abstract measurement operator A of shape `rows() x cols()`.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// A * x.
    fn apply(&self, x: &ArrayView1<Complex64>) -> Result<Array1<Complex64>>;

    /// A^H * v.
    fn adjoint_apply(&self, v: &ArrayView1<Complex64>) -> Result<Array1<Complex64>>;

    /// |A|^2 * w, entry m is sum_n |A_mn|^2 w_n.
    fn abs2_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>>;

    /// |A|^2^T * w, entry n is sum_m |A_mn|^2 w_m.
    fn abs2_adjoint_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>>;

    /// Squared Frobenius norm of A.
    fn frob_norm_sq(&self) -> f64;
}

fn check_len(expect: usize, got: usize, what: &str) -> Result<()> {
    if expect != got {
        return Err(Error::Dimension(format!("{what}: expected length {expect}, got {got}")));
    }
    Ok(())
}

/// Stack the columns of `x` into a single vector (column-major vec).
pub fn vec_columns(x: &Array2<Complex64>) -> Array1<Complex64> {
    let (m, n) = x.dim();
    Array1::from_iter((0..n).flat_map(|c| (0..m).map(move |r| (r, c))).map(|(r, c)| x[[r, c]]))
}

/// Inverse of [`vec_columns`] for a vector of length `m * n`.
pub fn unvec_columns(v: &ArrayView1<Complex64>, m: usize, n: usize) -> Result<Array2<Complex64>> {
    check_len(m * n, v.len(), "unvec")?;
    Ok(Array2::from_shape_fn((m, n), |(r, c)| v[c * m + r]))
}

/// The pilot/DFT measurement operator `S^T (x) F^H` realized without forming
/// the Kronecker product.
///
/// `A vec(X) = vec(F^H X S)` with X of shape M x N, S of shape N x N_p and F
/// the normalized DFT matrix, so every |A| entry squared is |S[n, p]|^2 / M.
#[derive(Debug, Clone)]
pub struct PilotDftOperator {
    m: usize,
    n: usize,
    n_p: usize,
    f: Array2<Complex64>,
    f_h: Array2<Complex64>,
    s: Array2<Complex64>,
    s_h: Array2<Complex64>,
    /// |S[n, p]|^2.
    s_abs2: Array2<f64>,
}

impl PilotDftOperator {
    /// Operator for `n` virtual sources, each assigned one cyclic pilot shift.
    pub fn new(m: usize, n: usize, n_p: usize) -> Result<Self> {
        let s = zc_pilot_matrix(n_p, n)?;
        Self::with_pilots(m, s)
    }

    /// Operator with an explicit N x N_p pilot matrix.
    pub fn with_pilots(m: usize, s: Array2<Complex64>) -> Result<Self> {
        if m == 0 || s.nrows() == 0 || s.ncols() == 0 {
            return Err(Error::Config("operator dimensions must be positive".into()));
        }
        let f = dft_matrix(m);
        let f_h = f.t().mapv(|z| z.conj());
        let s_h = s.t().mapv(|z| z.conj());
        let s_abs2 = s.mapv(|z| z.norm_sqr());
        Ok(Self {
            m,
            n: s.nrows(),
            n_p: s.ncols(),
            f,
            f_h,
            s,
            s_h,
            s_abs2,
        })
    }

    pub fn antenna_count(&self) -> usize {
        self.m
    }

    pub fn virtual_sources(&self) -> usize {
        self.n
    }

    pub fn pilot_len(&self) -> usize {
        self.n_p
    }

    /// The pilot matrix S (N x N_p).
    pub fn pilots(&self) -> &Array2<Complex64> {
        &self.s
    }

    /// Dense materialization of A; for small-instance validation only.
    pub fn to_dense(&self) -> Array2<Complex64> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut a = Array2::zeros((rows, cols));
        for p in 0..self.n_p {
            for r in 0..self.m {
                for nn in 0..self.n {
                    for c in 0..self.m {
                        // A[(p, r), (nn, c)] = S^T[p, nn] * F^H[r, c]
                        a[[p * self.m + r, nn * self.m + c]] = self.s[[nn, p]] * self.f_h[[r, c]];
                    }
                }
            }
        }
        a
    }
}

impl LinearOperator for PilotDftOperator {
    fn rows(&self) -> usize {
        self.m * self.n_p
    }

    fn cols(&self) -> usize {
        self.m * self.n
    }

    fn apply(&self, x: &ArrayView1<Complex64>) -> Result<Array1<Complex64>> {
        check_len(self.cols(), x.len(), "apply")?;
        let xm = unvec_columns(x, self.m, self.n)?;
        let w = self.f_h.dot(&xm);
        let z = w.dot(&self.s);
        Ok(vec_columns(&z))
    }

    fn adjoint_apply(&self, v: &ArrayView1<Complex64>) -> Result<Array1<Complex64>> {
        check_len(self.rows(), v.len(), "adjoint apply")?;
        let vm = unvec_columns(v, self.m, self.n_p)?;
        let w = self.f.dot(&vm);
        let z = w.dot(&self.s_h);
        Ok(vec_columns(&z))
    }

    fn abs2_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len(self.cols(), w.len(), "abs2 apply")?;
        // Column block n contributes |S[n, p]|^2 / M * (sum of block n) to
        // every row of output block p.
        let block_sums: Vec<f64> =
            (0..self.n).map(|nn| (0..self.m).map(|r| w[nn * self.m + r]).sum()).collect();
        let mut out = Array1::zeros(self.rows());
        for p in 0..self.n_p {
            let acc: f64 =
                (0..self.n).map(|nn| self.s_abs2[[nn, p]] * block_sums[nn]).sum::<f64>() / self.m as f64;
            for r in 0..self.m {
                out[p * self.m + r] = acc;
            }
        }
        Ok(out)
    }

    fn abs2_adjoint_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len(self.rows(), w.len(), "abs2 adjoint apply")?;
        let block_sums: Vec<f64> =
            (0..self.n_p).map(|p| (0..self.m).map(|r| w[p * self.m + r]).sum()).collect();
        let mut out = Array1::zeros(self.cols());
        for nn in 0..self.n {
            let acc: f64 =
                (0..self.n_p).map(|p| self.s_abs2[[nn, p]] * block_sums[p]).sum::<f64>() / self.m as f64;
            for r in 0..self.m {
                out[nn * self.m + r] = acc;
            }
        }
        Ok(out)
    }

    fn frob_norm_sq(&self) -> f64 {
        // ||S^T (x) F^H||_F^2 = ||S||_F^2 * ||F||_F^2 and ||F||_F^2 = M.
        self.s_abs2.sum() * self.m as f64
    }
}

/// Explicit dense operator, used by tests, diagnostics and small instances.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    a: Array2<Complex64>,
    abs2: Array2<f64>,
}

impl DenseOperator {
    pub fn new(a: Array2<Complex64>) -> Self {
        let abs2 = a.mapv(|z| z.norm_sqr());
        Self { a, abs2 }
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.a
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.a.nrows()
    }

    fn cols(&self) -> usize {
        self.a.ncols()
    }

    fn apply(&self, x: &ArrayView1<Complex64>) -> Result<Array1<Complex64>> {
        check_len(self.cols(), x.len(), "apply")?;
        Ok(self.a.dot(x))
    }

    fn adjoint_apply(&self, v: &ArrayView1<Complex64>) -> Result<Array1<Complex64>> {
        check_len(self.rows(), v.len(), "adjoint apply")?;
        Ok(self.a.t().mapv(|z| z.conj()).dot(v))
    }

    fn abs2_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len(self.cols(), w.len(), "abs2 apply")?;
        Ok(self.abs2.dot(w))
    }

    fn abs2_adjoint_apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len(self.rows(), w.len(), "abs2 adjoint apply")?;
        Ok(self.abs2.t().dot(w))
    }

    fn frob_norm_sq(&self) -> f64 {
        self.abs2.sum()
    }
}
