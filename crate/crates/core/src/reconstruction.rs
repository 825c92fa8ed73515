//! Scale recovery and channel reconstruction.
//!
//! One-bit samples pin the signal direction but not its length. The missing
//! scale is recovered from the total received power measured before the
//! quantizer; the effective channel and the gain matrix then follow from the
//! selected angular columns by an IDFT and a least-squares fit.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::channel_model::{idft_transform, steering_matrix};
use crate::error::{Error, Result};
use crate::linalg::pinv_solve;

/// Scale information recovered from the pre-quantization power.
#[derive(Debug, Clone, Copy)]
pub struct ScaleInfo {
    /// Measured ||A x + n||^2.
    pub measured_power: f64,
    /// Inferred per-coefficient signal variance, clamped at zero.
    pub sigma_x2: f64,
    /// Norm the rescaled estimate should carry, sigma_x * sqrt(N_x).
    pub target_norm: f64,
}

/// Infer the per-coefficient variance from the measured unquantized power:
/// sigma_x^2 = (power - N_p M sigma^2) / ||A||_F^2, clamped at zero, and the
/// implied coefficient norm over `n_x` entries.
pub fn infer_sigma_x2(
    measured_power: f64,
    frob_norm_a_sq: f64,
    n_p: usize,
    m: usize,
    n_x: usize,
    noise_var: f64,
) -> Result<ScaleInfo> {
    if !(measured_power >= 0.0) || !(noise_var >= 0.0) {
        return Err(Error::Domain("power and noise variance must be nonnegative".into()));
    }
    if !(frob_norm_a_sq > 0.0) {
        return Err(Error::Domain(format!("||A||_F^2 = {frob_norm_a_sq} must be positive")));
    }
    let sigma_x2 = ((measured_power - (n_p * m) as f64 * noise_var) / frob_norm_a_sq).max(0.0);
    let target_norm = (sigma_x2 * n_x as f64).sqrt();
    Ok(ScaleInfo { measured_power, sigma_x2, target_norm })
}

/// Rescale an estimate to the target norm, preserving its direction.
pub fn rescale_estimate(x_hat: &Array1<Complex64>, target_norm: f64) -> Result<Array1<Complex64>> {
    if !(target_norm >= 0.0) {
        return Err(Error::Domain(format!("target norm {target_norm} must be nonnegative")));
    }
    let norm: f64 = x_hat.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("cannot rescale an all-zero estimate".into()));
    }
    Ok(x_hat.mapv(|z| z * (target_norm / norm)))
}

/// Effective channel estimate: IDFT of the selected angular columns.
pub fn estimate_h(x_theta_hat: &Array2<Complex64>) -> Array2<Complex64> {
    idft_transform(x_theta_hat)
}

/// Gain estimates from the least-squares fit of the steering matrix.
#[derive(Debug, Clone)]
pub struct GainEstimate {
    /// Diagonal of the fitted gain matrix, one entry per estimated angle.
    pub d_hat: Vec<Complex64>,
    /// Frobenius mass left off the diagonal, a diagnostic for how far the
    /// fitted matrix is from the ideal diagonal shape.
    pub offdiag_frobenius: f64,
}

/// Least-squares gain matrix: pinv(V(theta_hat)) * F^H * X_theta_hat, with a
/// relative singular-value cutoff of 1e-10 defining the degenerate case.
pub fn estimate_d(
    thetas_deg: &[f64],
    x_theta_hat: &Array2<Complex64>,
) -> Result<GainEstimate> {
    const REL_CUTOFF: f64 = 1e-10;
    let k = thetas_deg.len();
    if k == 0 || x_theta_hat.ncols() != k {
        return Err(Error::Dimension(format!(
            "{} angles for {} columns",
            k,
            x_theta_hat.ncols()
        )));
    }
    let m = x_theta_hat.nrows();
    if m < k {
        return Err(Error::DegenerateGeometry(format!("{k} sources but only {m} antennas")));
    }
    // Near-duplicate angles make the steering matrix rank deficient.
    for i in 0..k {
        for j in (i + 1)..k {
            let du = (thetas_deg[i].to_radians().sin() - thetas_deg[j].to_radians().sin()).abs();
            if du < 1e-10 {
                return Err(Error::DegenerateGeometry(format!(
                    "angles {} and {} coincide within 1e-10 in sin(theta)",
                    thetas_deg[i], thetas_deg[j]
                )));
            }
        }
    }

    let v = steering_matrix(thetas_deg, m)?;
    let h = idft_transform(x_theta_hat);
    let (g, rank) = pinv_solve(&v, &h, REL_CUTOFF)?;
    if rank < k {
        return Err(Error::DegenerateGeometry(format!(
            "steering matrix has numerical rank {rank} for {k} angles"
        )));
    }

    let mut d_hat = Vec::with_capacity(k);
    let mut off = 0.0f64;
    for r in 0..k {
        for c in 0..k {
            if r == c {
                d_hat.push(g[[r, c]]);
            } else {
                off += g[[r, c]].norm_sqr();
            }
        }
    }
    Ok(GainEstimate { d_hat, offdiag_frobenius: off.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{dft_transform, effective_channel, ChannelParams};
    use crate::operator::{vec_columns, LinearOperator, PilotDftOperator};
    use rand::SeedableRng;

    fn paper_params() -> ChannelParams {
        ChannelParams {
            thetas_deg: vec![-40.0, 20.0, 20.005],
            alphas: vec![
                Complex64::new(0.8084, 0.5887),
                Complex64::new(0.6884, 0.7254),
                Complex64::new(0.7344, -0.6787),
            ],
        }
    }

    #[test]
    fn sigma_x2_noiseless_is_power_ratio() {
        let info = infer_sigma_x2(120.0, 60.0, 4, 5, 40, 0.0).unwrap();
        assert!((info.sigma_x2 - 2.0).abs() < 1e-15);
        assert!((info.target_norm - (2.0f64 * 40.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_x2_clamps_at_noise_floor() {
        let info = infer_sigma_x2(4.0 * 5.0 * 1.0, 100.0, 4, 5, 40, 1.0).unwrap();
        assert_eq!(info.sigma_x2, 0.0);
        assert_eq!(info.target_norm, 0.0);
        let below = infer_sigma_x2(10.0, 100.0, 4, 5, 40, 1.0).unwrap();
        assert_eq!(below.sigma_x2, 0.0);
    }

    #[test]
    fn sigma_x2_unbiased_over_noise_draws() {
        // Fixed ground-truth x, many noise realizations: the mean inferred
        // variance approaches ||x||^2 / N_x.
        use rand::SeedableRng;
        let cfg = crate::channel_model::SystemConfig {
            m: 16,
            n_t: 1,
            l: vec![2],
            n_p: 8,
            noise_var: 0.5,
            seed: 0,
            n: 4,
        };
        let params = ChannelParams {
            thetas_deg: vec![-20.0, 35.0],
            alphas: vec![Complex64::new(0.9, 0.3), Complex64::new(-0.4, 0.8)],
        };
        let op = PilotDftOperator::new(cfg.m, cfg.n, cfg.n_p).unwrap();
        let mut mean = 0.0;
        let trials = 2000;
        let mut true_sx2 = 0.0;
        for t in 0..trials {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(900 + t as u64);
            let sim = crate::channel_model::simulate_measurement(&cfg, &params, &mut rng).unwrap();
            if t == 0 {
                let x = vec_columns(&sim.x_true);
                true_sx2 = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len() as f64;
            }
            let info = infer_sigma_x2(
                sim.pre_quantization_power,
                op.frob_norm_sq(),
                cfg.n_p,
                cfg.m,
                cfg.m * cfg.n,
                cfg.noise_var,
            )
            .unwrap();
            mean += info.sigma_x2;
        }
        mean /= trials as f64;
        assert!(
            (mean - true_sx2).abs() / true_sx2 < 0.02,
            "mean inferred {mean} vs true {true_sx2}"
        );
    }

    #[test]
    fn rescale_basic_contracts() {
        let mut x = Array1::zeros(4);
        x[0] = Complex64::new(2.0, 0.0);
        let y = rescale_estimate(&x, 1.0).unwrap();
        assert!((y[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let norm = |v: &Array1<Complex64>| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let same = rescale_estimate(&x, norm(&x)).unwrap();
        assert!((&same - &x).iter().map(|z| z.norm_sqr()).sum::<f64>() < 1e-24);

        let scaled = rescale_estimate(&x, 7.5).unwrap();
        assert!((norm(&scaled) - 7.5).abs() < 1e-12);
        // Idempotent at the same target.
        let twice = rescale_estimate(&scaled, 7.5).unwrap();
        assert!((&twice - &scaled).iter().map(|z| z.norm_sqr()).sum::<f64>() < 1e-24);

        assert!(rescale_estimate(&Array1::zeros(3), 1.0).is_err());
    }

    #[test]
    fn estimate_h_inverts_dft() {
        let h = effective_channel(&paper_params(), 32).unwrap();
        let x = dft_transform(&h);
        let back = estimate_h(&x);
        let err: f64 = (&back - &h).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-12);
        let zero: Array2<Complex64> = Array2::zeros((8, 2));
        assert!(estimate_h(&zero).iter().all(|z| z.norm_sqr() == 0.0));
    }

    #[test]
    fn exact_inputs_recover_paper_gains() {
        let params = paper_params();
        let h = effective_channel(&params, 90).unwrap();
        let x = dft_transform(&h);
        let est = estimate_d(&params.thetas_deg, &x).unwrap();
        let mut err = 0.0f64;
        for (got, want) in est.d_hat.iter().zip(&params.alphas) {
            err += (got - want).norm_sqr();
        }
        assert!(err.sqrt() < 1e-10, "gain error {}", err.sqrt());
        assert!(est.offdiag_frobenius < 1e-9);
    }

    #[test]
    fn single_path_gain_is_matched_filter() {
        let theta = 17.0;
        let alpha = Complex64::new(0.4, -1.1);
        let m = 24;
        let a = crate::channel_model::steering_vector(theta, m).unwrap();
        let h = Array2::from_shape_fn((m, 1), |(r, _)| alpha * a[r]);
        let x = dft_transform(&h);
        let est = estimate_d(&[theta], &x).unwrap();
        // Rank-1 pseudo-inverse: a^H h / M.
        let mf: Complex64 =
            a.iter().zip(h.column(0).iter()).map(|(s, v)| s.conj() * v).sum::<Complex64>()
                / m as f64;
        assert!((est.d_hat[0] - mf).norm() < 1e-12);
        assert!((est.d_hat[0] - alpha).norm() < 1e-12);
    }

    #[test]
    fn perturbed_angles_match_dense_ls_oracle() {
        // Solve the same LS problem by explicit normal equations on the
        // 3 x 3 Gram system and compare.
        let params = paper_params();
        let m = 90;
        let h = effective_channel(&params, m).unwrap();
        let x = dft_transform(&h);
        let thetas: Vec<f64> = params.thetas_deg.iter().map(|t| t + 0.001).collect();
        let est = estimate_d(&thetas, &x).unwrap();

        let v = steering_matrix(&thetas, m).unwrap();
        let hh = idft_transform(&x);
        let gram = v.t().mapv(|z| z.conj()).dot(&v);
        let rhs = v.t().mapv(|z| z.conj()).dot(&hh);
        // 3 x 3 Gaussian elimination with partial pivoting.
        let mut aug = ndarray::concatenate![ndarray::Axis(1), gram, rhs];
        let n = 3;
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if aug[[r, col]].norm() > aug[[piv, col]].norm() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..aug.ncols() {
                    let tmp = aug[[col, c]];
                    aug[[col, c]] = aug[[piv, c]];
                    aug[[piv, c]] = tmp;
                }
            }
            let d = aug[[col, col]];
            for c in col..aug.ncols() {
                aug[[col, c]] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[[r, col]];
                    for c in col..aug.ncols() {
                        let sub = f * aug[[col, c]];
                        aug[[r, c]] -= sub;
                    }
                }
            }
        }
        for k in 0..n {
            let oracle = aug[[k, n + k]];
            assert!(
                (est.d_hat[k] - oracle).norm() < 1e-10,
                "gain {k}: {} vs oracle {oracle}",
                est.d_hat[k]
            );
        }
    }

    #[test]
    fn coincident_angles_are_degenerate() {
        let params = paper_params();
        let h = effective_channel(&params, 90).unwrap();
        let x = dft_transform(&h);
        let thetas = vec![-40.0, 20.0, 20.0 + 1e-11];
        match estimate_d(&thetas, &x) {
            Err(Error::DegenerateGeometry(_)) => {}
            other => panic!("expected degenerate geometry, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_direction_insensitive_to_true_scale() {
        // Scaling the true gains leaves the quantized observation unchanged
        // at sigma^2 = 0, hence the normalized estimate too. Checked at the
        // measurement level here; the full-pipeline version lives in the
        // acceptance suite.
        let cfg = crate::channel_model::SystemConfig {
            m: 32,
            n_t: 1,
            l: vec![2],
            n_p: 8,
            noise_var: 0.0,
            seed: 5,
            n: 4,
        };
        let base = ChannelParams {
            thetas_deg: vec![-12.0, 41.0],
            alphas: vec![Complex64::new(1.0, -0.4), Complex64::new(0.2, 0.9)],
        };
        let scaled = ChannelParams {
            thetas_deg: base.thetas_deg.clone(),
            alphas: base.alphas.iter().map(|a| a * 3.0).collect(),
        };
        let mut rng1 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = crate::channel_model::simulate_measurement(&cfg, &base, &mut rng1).unwrap();
        let b = crate::channel_model::simulate_measurement(&cfg, &scaled, &mut rng2).unwrap();
        assert_eq!(a.measurement.y, b.measurement.y);
        assert!((b.pre_quantization_power / a.pre_quantization_power - 9.0).abs() < 1e-9);
    }
}
