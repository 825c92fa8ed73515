//! Physical scenario generation: ULA steering vectors, Zadoff-Chu pilots,
//! the effective channel and its DFT-domain image, complex AWGN, and the
//! element-wise one-bit quantizer.
//!
//! Angles are degrees at every public boundary and radians internally.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::PilotDftOperator;

/// Physical scenario dimensions and noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of ULA antennas, half-wavelength spacing.
    pub m: usize,
    /// Number of single-antenna users.
    pub n_t: usize,
    /// Paths per user, one entry per user.
    pub l: Vec<usize>,
    /// Pilot sequence length.
    pub n_p: usize,
    /// Complex noise variance per received sample (linear power).
    pub noise_var: f64,
    /// Seed for noise generation.
    pub seed: u64,
    /// Redundant column count of the estimated coefficient matrix.
    pub n: usize,
}

impl SystemConfig {
    /// Total path count over all users.
    pub fn total_paths(&self) -> usize {
        self.l.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total_paths();
        if self.m < 2 {
            return Err(Error::Config(format!("M = {} but at least 2 antennas required", self.m)));
        }
        if self.n_t == 0 || self.l.len() != self.n_t {
            return Err(Error::Config(format!(
                "L has {} entries but N_t = {}",
                self.l.len(),
                self.n_t
            )));
        }
        if self.l.iter().any(|&lk| lk == 0) {
            return Err(Error::Config("every user needs at least one path".into()));
        }
        if self.n_p < total {
            return Err(Error::Config(format!(
                "pilot length N_p = {} is shorter than the total path count {}",
                self.n_p, total
            )));
        }
        if self.n <= total {
            return Err(Error::Config(format!(
                "redundant column count N = {} must exceed the total path count {}",
                self.n, total
            )));
        }
        if self.n > self.n_p {
            return Err(Error::Config(format!(
                "N = {} virtual sources need distinct pilot shifts but N_p = {}",
                self.n, self.n_p
            )));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::Config(format!("noise_var = {} must be >= 0", self.noise_var)));
        }
        Ok(())
    }
}

/// Ground-truth angle/gain description of the propagation paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelParams {
    /// One direction of arrival per path, degrees, strictly inside (-90, 90).
    pub thetas_deg: Vec<f64>,
    /// One complex gain per path.
    pub alphas: Vec<Complex64>,
}

impl ChannelParams {
    pub fn validate(&self, expected_paths: usize) -> Result<()> {
        if self.thetas_deg.len() != self.alphas.len() {
            return Err(Error::Config(format!(
                "{} angles but {} gains",
                self.thetas_deg.len(),
                self.alphas.len()
            )));
        }
        if self.thetas_deg.len() != expected_paths {
            return Err(Error::Config(format!(
                "{} paths described but the system defines {}",
                self.thetas_deg.len(),
                expected_paths
            )));
        }
        for &t in &self.thetas_deg {
            if !(-90.0 < t && t < 90.0) {
                return Err(Error::Domain(format!("theta = {t} deg outside (-90, 90)")));
            }
        }
        for (i, &a) in self.thetas_deg.iter().enumerate() {
            for &b in &self.thetas_deg[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!("duplicate DoA {a} deg")));
                }
            }
        }
        Ok(())
    }
}

/// One-bit observation together with the operator that produced it.
#[derive(Debug, Clone)]
pub struct Measurement {
    /// Quantized samples, entries in {+-1 +- j}, length M * N_p.
    pub y: Array1<Complex64>,
    /// Matrix-free pilot/DFT operator of shape (M * N_p) x (M * N).
    pub op: PilotDftOperator,
}

/// Output of a simulated pilot transmission.
#[derive(Debug, Clone)]
pub struct SimulatedMeasurement {
    pub measurement: Measurement,
    /// Ground-truth coefficient matrix, M x N (true columns first, zero padded).
    pub x_true: Array2<Complex64>,
    /// Squared norm of the unquantized received block, measured before the
    /// quantizer.
    pub pre_quantization_power: f64,
}

/// ULA steering vector: entry m is exp(-j * m * pi * sin(theta)).
pub fn steering_vector(theta_deg: f64, m: usize) -> Result<Array1<Complex64>> {
    if !(-90.0 < theta_deg && theta_deg < 90.0) {
        return Err(Error::Domain(format!("theta = {theta_deg} deg outside (-90, 90)")));
    }
    if m == 0 {
        return Err(Error::Domain("steering vector needs at least one antenna".into()));
    }
    let u = theta_deg.to_radians().sin();
    Ok(Array1::from_iter(
        (0..m).map(|k| Complex64::from_polar(1.0, -(k as f64) * std::f64::consts::PI * u)),
    ))
}

/// Base Zadoff-Chu sequence of length `n_p` with root `u`.
///
/// Even lengths use phase -pi*u*k^2/N_p, odd lengths -pi*u*k*(k+1)/N_p, so the
/// sequence has ideal periodic autocorrelation in both cases.
fn zc_base(n_p: usize, u: usize) -> Array1<Complex64> {
    let np = n_p as f64;
    Array1::from_iter((0..n_p).map(|k| {
        let kf = k as f64;
        let quad = if n_p % 2 == 0 { kf * kf } else { kf * (kf + 1.0) };
        Complex64::from_polar(1.0, -std::f64::consts::PI * (u as f64) * quad / np)
    }))
}

/// Pilot matrix whose k-th row is the base ZC sequence cyclically shifted by k.
///
/// Rows are mutually orthogonal: S * S^H = N_p * I.
pub fn zc_pilot_matrix(n_p: usize, rows: usize) -> Result<Array2<Complex64>> {
    if n_p == 0 {
        return Err(Error::Config("pilot length must be positive".into()));
    }
    if rows > n_p {
        return Err(Error::Config(format!(
            "{rows} cyclic shifts requested but only {n_p} are orthogonal"
        )));
    }
    let base = zc_base(n_p, 1);
    let mut s = Array2::zeros((rows, n_p));
    for k in 0..rows {
        for j in 0..n_p {
            s[[k, j]] = base[(j + k) % n_p];
        }
    }
    Ok(s)
}

/// Effective channel H = V(theta) * D: column k is alpha_k * a_r(theta_k).
pub fn effective_channel(params: &ChannelParams, m: usize) -> Result<Array2<Complex64>> {
    let k = params.thetas_deg.len();
    let mut h = Array2::zeros((m, k));
    for (col, (&theta, &alpha)) in params.thetas_deg.iter().zip(&params.alphas).enumerate() {
        let a = steering_vector(theta, m)?;
        for row in 0..m {
            h[[row, col]] = alpha * a[row];
        }
    }
    Ok(h)
}

/// Steering matrix V(theta) with one column per angle.
pub fn steering_matrix(thetas_deg: &[f64], m: usize) -> Result<Array2<Complex64>> {
    let mut v = Array2::zeros((m, thetas_deg.len()));
    for (col, &theta) in thetas_deg.iter().enumerate() {
        let a = steering_vector(theta, m)?;
        for row in 0..m {
            v[[row, col]] = a[row];
        }
    }
    Ok(v)
}

/// Normalized DFT matrix, F[m, n] = exp(-2j pi m n / M) / sqrt(M), F^H F = I.
pub fn dft_matrix(m: usize) -> Array2<Complex64> {
    let scale = 1.0 / (m as f64).sqrt();
    let mut f = Array2::zeros((m, m));
    for r in 0..m {
        for c in 0..m {
            let phase = -2.0 * std::f64::consts::PI * ((r * c) % m) as f64 / m as f64;
            f[[r, c]] = Complex64::from_polar(scale, phase);
        }
    }
    f
}

/// X = F * H, the angular-domain image of a channel matrix.
pub fn dft_transform(h: &Array2<Complex64>) -> Array2<Complex64> {
    let f = dft_matrix(h.nrows());
    f.dot(h)
}

/// H = F^H * X, inverse of [`dft_transform`].
pub fn idft_transform(x: &Array2<Complex64>) -> Array2<Complex64> {
    let f = dft_matrix(x.nrows());
    let fh = f.t().mapv(|z| z.conj());
    fh.dot(x)
}

/// One-bit quantizer: sign of real and imaginary parts, sign(0) := +1.
pub fn quantize_one_bit(r: &Array1<Complex64>) -> Array1<Complex64> {
    r.mapv(|z| {
        let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        Complex64::new(sgn(z.re), sgn(z.im))
    })
}

/// Draw a circular complex Gaussian vector with per-entry variance `var`.
pub fn complex_awgn<R: Rng + ?Sized>(len: usize, var: f64, rng: &mut R) -> Array1<Complex64> {
    if var == 0.0 {
        return Array1::zeros(len);
    }
    let normal = Normal::new(0.0, (var / 2.0).sqrt()).expect("valid std");
    Array1::from_iter((0..len).map(|_| Complex64::new(normal.sample(rng), normal.sample(rng))))
}

/// Simulate one pilot transmission through the one-bit front end.
///
/// Builds the redundant coefficient matrix X (true angular columns first,
/// zero padding up to N columns), pushes vec(X) through the pilot/DFT
/// operator, adds AWGN, measures the pre-quantization power and quantizes.
pub fn simulate_measurement<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<SimulatedMeasurement> {
    cfg.validate()?;
    params.validate(cfg.total_paths())?;

    let h = effective_channel(params, cfg.m)?;
    let x_theta = dft_transform(&h);
    let mut x_true = Array2::zeros((cfg.m, cfg.n));
    for col in 0..cfg.total_paths() {
        for row in 0..cfg.m {
            x_true[[row, col]] = x_theta[[row, col]];
        }
    }

    let op = PilotDftOperator::new(cfg.m, cfg.n, cfg.n_p)?;
    let x_vec = crate::operator::vec_columns(&x_true);
    let mut r = op.apply(&x_vec.view())?;
    let noise = complex_awgn(r.len(), cfg.noise_var, rng);
    r += &noise;
    let pre_quantization_power = r.iter().map(|z| z.norm_sqr()).sum();
    let y = quantize_one_bit(&r);

    Ok(SimulatedMeasurement {
        measurement: Measurement { y, op },
        x_true,
        pre_quantization_power,
    })
}
