//! DoA extraction from the estimated angular-domain coefficient matrix:
//! column-energy model-order selection, IDFT back to the array domain, and
//! per-column single-source ML estimation.
//!
//! For a unit-modulus steering vector the single-source ML objective reduces
//! to the periodogram |a^H(theta) v|^2 / M, so each column is solved by a
//! zero-padded grid search over sin(theta) followed by gridless refinement.

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel_model::idft_transform;
use crate::error::{Error, Result};

/// Selection and refinement settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoaConfig {
    /// Keep columns whose energy is at least this fraction of the largest.
    pub rel_threshold: f64,
    /// Coarse periodogram grid has `grid_oversample * M` points over
    /// sin(theta) in [-1, 1).
    pub grid_oversample: usize,
    /// Refinement stops when the maximizer is bracketed to this width in
    /// sin(theta).
    pub refine_tol: f64,
}

impl Default for DoaConfig {
    fn default() -> Self {
        Self { rel_threshold: 0.05, grid_oversample: 16, refine_tol: 1e-8 }
    }
}

impl DoaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return Err(Error::Config(format!(
                "rel_threshold = {} outside (0, 1)",
                self.rel_threshold
            )));
        }
        if self.grid_oversample == 0 {
            return Err(Error::Config("grid_oversample must be positive".into()));
        }
        if !(self.refine_tol > 0.0) {
            return Err(Error::Config(format!("refine_tol = {} must be positive", self.refine_tol)));
        }
        Ok(())
    }
}

/// Result of column-energy thresholding.
#[derive(Debug, Clone)]
pub struct ColumnSelection {
    /// Indices of the kept columns, ascending.
    pub indices: Vec<usize>,
    /// Squared column norms of every column.
    pub energies: Vec<f64>,
    /// Absolute energy threshold that was applied.
    pub threshold_used: f64,
}

/// One estimated propagation path.
#[derive(Debug, Clone)]
pub struct DoaEstimate {
    /// Estimated direction, degrees, inside (-90, 90).
    pub theta_deg: f64,
    /// Estimated complex gain a^H(theta) v / M.
    pub alpha: Complex64,
    /// Source column of the coefficient matrix.
    pub column_index: usize,
    /// Variance of the single-source noise model. It cancels from the ML
    /// maximization, so it is carried for reporting only and never estimated.
    pub noise_var: Option<f64>,
}

/// Keep every column whose energy reaches `rel_threshold` times the largest
/// column energy. At least one column survives by construction.
pub fn select_columns(x_hat: &Array2<Complex64>, rel_threshold: f64) -> Result<ColumnSelection> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::Config(format!("rel_threshold = {rel_threshold} outside (0, 1)")));
    }
    let energies: Vec<f64> =
        (0..x_hat.ncols()).map(|c| x_hat.column(c).iter().map(|z| z.norm_sqr()).sum()).collect();
    let max = energies.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptySelection("estimated coefficient matrix is all zero".into()));
    }
    let threshold_used = rel_threshold * max;
    let indices: Vec<usize> = energies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e >= threshold_used)
        .map(|(i, _)| i)
        .collect();
    Ok(ColumnSelection { indices, energies, threshold_used })
}

/// Periodogram amplitude g(u) = sum_m v_m exp(j pi m u) and its first two
/// derivatives with respect to u = sin(theta).
fn periodogram_terms(v: &ArrayView1<Complex64>, u: f64) -> (Complex64, Complex64, Complex64) {
    let mut g = Complex64::default();
    let mut g1 = Complex64::default();
    let mut g2 = Complex64::default();
    for (m, &vm) in v.iter().enumerate() {
        let mf = std::f64::consts::PI * m as f64;
        let e = Complex64::from_polar(1.0, mf * u) * vm;
        g += e;
        g1 += Complex64::new(0.0, mf) * e;
        g2 -= mf * mf * e;
    }
    (g, g1, g2)
}

fn periodogram_power(v: &ArrayView1<Complex64>, u: f64) -> f64 {
    let (g, _, _) = periodogram_terms(v, u);
    g.norm_sqr()
}

/// Golden-section maximization of the periodogram on [lo, hi].
fn golden_refine(v: &ArrayView1<Complex64>, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = periodogram_power(v, c);
    let mut fd = periodogram_power(v, d);
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = periodogram_power(v, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = periodogram_power(v, d);
        }
    }
    0.5 * (lo + hi)
}

/// Single-source ML estimate for one array-domain column.
pub fn single_source_ml(
    v_hat: &ArrayView1<Complex64>,
    grid_oversample: usize,
    refine_tol: f64,
) -> Result<DoaEstimate> {
    let m = v_hat.len();
    if m < 2 {
        return Err(Error::Domain("single-source estimation needs at least 2 antennas".into()));
    }
    if grid_oversample == 0 || !(refine_tol > 0.0) {
        return Err(Error::Config("grid_oversample and refine_tol must be positive".into()));
    }
    if v_hat.iter().all(|z| z.norm_sqr() == 0.0) {
        return Err(Error::Domain("all-zero column has no direction".into()));
    }

    // Coarse stage: periodogram on the zero-padded grid over sin(theta).
    let grid = grid_oversample * m;
    let mut best_k = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for k in 0..grid {
        let u = -1.0 + 2.0 * k as f64 / grid as f64;
        let p = periodogram_power(v_hat, u);
        if p > best_p {
            best_p = p;
            best_k = k;
        }
    }
    let cell = 2.0 / grid as f64;
    let u0 = -1.0 + 2.0 * best_k as f64 / grid as f64;
    let lo = (u0 - cell).max(-1.0);
    let hi = (u0 + cell).min(1.0 - f64::EPSILON);

    // Newton refinement on the smooth periodogram; fall back to golden-section
    // when the curvature is not negative or a step leaves the coarse cell.
    let mut u = u0;
    let mut newton_ok = false;
    for _ in 0..60 {
        let (g, g1, g2) = periodogram_terms(v_hat, u);
        let p1 = 2.0 * (g.conj() * g1).re;
        let p2 = 2.0 * (g1.norm_sqr() + (g.conj() * g2).re);
        if p2 >= 0.0 {
            break;
        }
        let step = -p1 / p2;
        let next = u + step;
        if !(lo..=hi).contains(&next) {
            break;
        }
        u = next;
        if step.abs() <= refine_tol {
            newton_ok = true;
            break;
        }
    }
    if !newton_ok {
        u = golden_refine(v_hat, lo, hi, refine_tol);
    }

    let u = u.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    let theta_deg = u.asin().to_degrees();
    let (g, _, _) = periodogram_terms(v_hat, u);
    let alpha = g / m as f64;

    Ok(DoaEstimate { theta_deg, alpha, column_index: 0, noise_var: None })
}

/// Estimate one DoA per selected column: IDFT to the array domain, then the
/// single-source ML step, column by column. Output sorted by angle.
pub fn estimate_all_doas(
    x_theta_hat: &Array2<Complex64>,
    columns: &[usize],
    cfg: &DoaConfig,
) -> Result<Vec<DoaEstimate>> {
    cfg.validate()?;
    if x_theta_hat.ncols() == 0 {
        return Err(Error::EmptySelection("no columns to estimate from".into()));
    }
    if columns.len() != x_theta_hat.ncols() {
        return Err(Error::Dimension(format!(
            "{} column labels for {} columns",
            columns.len(),
            x_theta_hat.ncols()
        )));
    }
    let v = idft_transform(x_theta_hat);
    let mut out = Vec::with_capacity(v.ncols());
    for (slot, &col) in columns.iter().enumerate() {
        let mut est = single_source_ml(&v.column(slot), cfg.grid_oversample, cfg.refine_tol)
            .map_err(|e| Error::Column { column: col, source: Box::new(e) })?;
        est.column_index = col;
        out.push(est);
    }
    out.sort_by(|a, b| a.theta_deg.partial_cmp(&b.theta_deg).unwrap());
    Ok(out)
}
