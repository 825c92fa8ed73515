//! Scalar channels for the message-passing engine: the one-bit probit output
//! channel and the Bernoulli Gaussian-mixture input channel with EM
//! hyperparameter learning.
//!
//! All channel evaluations are pure per-coefficient maps; the complex case
//! treats real and imaginary parts as independent real problems with half the
//! complex variance each.

use ndarray::{Array1, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamp::{InputChannel, OutputChannel};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Scaled complementary error function exp(x^2) * erfc(x).
///
/// Direct evaluation below x = 4 (no overflow, no cancellation there), the
/// Laplace continued fraction above. Negative arguments use the reflection
/// erfcx(-x) = 2 exp(x^2) - erfcx(x), which overflows to +inf below about
/// x = -26.6; callers in this module only need x > 0.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        let e = (x * x).exp();
        return 2.0 * e - erfcx(-x);
    }
    if x <= 4.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        // erfcx(x) = 1/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        let mut t = 0.0;
        for k in (1..=40).rev() {
            t = (k as f64 / 2.0) / (x + t);
        }
        1.0 / ((x + t) * std::f64::consts::PI.sqrt())
    }
}

/// Inverse Mills ratio phi(eta) / Phi(eta), stable over the whole real line.
///
/// For eta < -1 the naive ratio loses precision and underflows near -38;
/// there the identity phi/Phi = sqrt(2/pi) / erfcx(-eta/sqrt(2)) is used.
/// For eta >= -1 both phi and Phi are well scaled and the ratio is direct.
pub fn mills_ratio_stable(eta: f64) -> f64 {
    if eta < -1.0 {
        SQRT_2_OVER_PI / erfcx(-eta / SQRT_2)
    } else {
        let phi = FRAC_1_SQRT_2PI * (-0.5 * eta * eta).exp();
        let cdf = 0.5 * libm::erfc(-eta / SQRT_2);
        phi / cdf
    }
}

/// Posterior mean and variance of a real latent z under a one-bit sign
/// observation with probit likelihood and Gaussian pseudo-prior.
///
/// `y_sign` is the observed sign (+-1), the pseudo-prior is N(p_hat,
/// nu_p_half), and `sigma` is the std of the complex noise, so the per-part
/// noise variance is sigma^2 / 2.
pub fn probit_moments_real(
    y_sign: f64,
    p_hat: f64,
    nu_p_half: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    if !(nu_p_half > 0.0) {
        return Err(Error::Domain(format!("nu_p/2 = {nu_p_half} must be positive")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma = {sigma} must be nonnegative")));
    }
    debug_assert!(y_sign == 1.0 || y_sign == -1.0);
    let denom_sq = (sigma * sigma + 2.0 * nu_p_half) / 2.0;
    let denom = denom_sq.sqrt();
    let eta = y_sign * p_hat / denom;
    let mr = mills_ratio_stable(eta);
    let z_hat = p_hat + y_sign * nu_p_half / denom * mr;
    let nu_z = nu_p_half - nu_p_half * nu_p_half / denom_sq * mr * (eta + mr);
    Ok((z_hat, nu_z.clamp(0.0, nu_p_half)))
}

/// Complex one-bit posterior moments, real and imaginary parts decoupled.
///
/// `y` must be in the quantizer alphabet {+-1 +- j}; each part carries
/// pseudo-prior variance nu_p / 2 and the returned variance is the sum of the
/// two per-part variances.
pub fn probit_moments_complex(
    y: Complex64,
    p_hat: Complex64,
    nu_p: f64,
    sigma: f64,
) -> Result<(Complex64, f64)> {
    if y.re.abs() != 1.0 || y.im.abs() != 1.0 {
        return Err(Error::Domain(format!("y = {y} is not in the one-bit alphabet")));
    }
    let half = nu_p / 2.0;
    let (zr, vr) = probit_moments_real(y.re, p_hat.re, half, sigma)?;
    let (zi, vi) = probit_moments_real(y.im, p_hat.im, half, sigma)?;
    Ok((Complex64::new(zr, zi), vr + vi))
}

/// Bernoulli Gaussian-mixture prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmPrior {
    /// Probability that a coefficient is nonzero.
    pub lambda: f64,
    /// Mixture weights, nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// Component means.
    pub means: Vec<Complex64>,
    /// Component variances, strictly positive.
    pub vars: Vec<f64>,
}

impl GmPrior {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.weights.len();
        if l == 0 || self.means.len() != l || self.vars.len() != l {
            return Err(Error::Config("mixture parameter lengths disagree".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Domain(format!("weights sum to {wsum}, expected 1")));
        }
        if self.vars.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("every mixture variance must be positive".into()));
        }
        Ok(())
    }

    /// Prior mean of a coefficient, spike included.
    pub fn mean(&self) -> Complex64 {
        self.lambda
            * self
                .weights
                .iter()
                .zip(&self.means)
                .map(|(&w, &m)| w * m)
                .sum::<Complex64>()
    }

    /// Prior variance of a coefficient, spike included.
    pub fn variance(&self) -> f64 {
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(&w, (&m, &v))| w * (m.norm_sqr() + v))
            .sum();
        (self.lambda * second - self.mean().norm_sqr()).max(0.0)
    }
}

/// Per-coefficient posterior under the Bernoulli-GM prior and a Gaussian
/// pseudo-measurement, with the per-component statistics the EM step needs.
#[derive(Debug, Clone)]
pub struct BgmMoments {
    pub x_hat: Complex64,
    pub nu_x: f64,
    /// Posterior probability that the coefficient is nonzero.
    pub support: f64,
    /// Joint responsibility of (nonzero, component l); sums to `support`.
    pub comp_resp: Vec<f64>,
    /// Posterior mean within component l.
    pub comp_mean: Vec<Complex64>,
    /// Posterior variance within component l.
    pub comp_var: Vec<f64>,
}

/// Closed-form posterior moments of x under the spike-and-slab GM prior and
/// the pseudo-likelihood CN(x; r_hat, nu_r).
///
/// Responsibilities are computed in the log domain with max subtraction.
pub fn bgm_posterior_moments(r_hat: Complex64, nu_r: f64, q: &GmPrior) -> Result<BgmMoments> {
    if !(nu_r > 0.0) {
        return Err(Error::Domain(format!("nu_r = {nu_r} must be positive")));
    }
    q.validate()?;
    let l = q.components();

    let log_spike = if q.lambda < 1.0 {
        (1.0 - q.lambda).ln() - (std::f64::consts::PI * nu_r).ln() - r_hat.norm_sqr() / nu_r
    } else {
        f64::NEG_INFINITY
    };
    let log_lambda = if q.lambda > 0.0 { q.lambda.ln() } else { f64::NEG_INFINITY };

    let mut log_comp = vec![f64::NEG_INFINITY; l];
    let mut comp_mean = vec![Complex64::default(); l];
    let mut comp_var = vec![0.0; l];
    for k in 0..l {
        let v = q.vars[k] + nu_r;
        comp_mean[k] = (r_hat * q.vars[k] + q.means[k] * nu_r) / v;
        comp_var[k] = q.vars[k] * nu_r / v;
        if q.lambda > 0.0 && q.weights[k] > 0.0 {
            log_comp[k] = log_lambda + q.weights[k].ln()
                - (std::f64::consts::PI * v).ln()
                - (r_hat - q.means[k]).norm_sqr() / v;
        }
    }

    let max_log = log_comp.iter().copied().fold(log_spike, f64::max);
    let w_spike = (log_spike - max_log).exp();
    let w_comp: Vec<f64> = log_comp.iter().map(|&lw| (lw - max_log).exp()).collect();
    let z = w_spike + w_comp.iter().sum::<f64>();

    let comp_resp: Vec<f64> = w_comp.iter().map(|&w| w / z).collect();
    let x_hat: Complex64 = comp_resp.iter().zip(&comp_mean).map(|(&b, &g)| b * g).sum();
    let second: f64 = comp_resp
        .iter()
        .zip(comp_mean.iter().zip(&comp_var))
        .map(|(&b, (&g, &v))| b * (v + g.norm_sqr()))
        .sum();
    let nu_x = (second - x_hat.norm_sqr()).max(0.0);
    let support: f64 = comp_resp.iter().sum();

    Ok(BgmMoments { x_hat, nu_x, support, comp_resp, comp_mean, comp_var })
}

/// Running sums of the per-coefficient posterior statistics that the EM
/// M-step consumes. The reduction is a plain weighted sum, so accumulation
/// order does not matter.
#[derive(Debug, Clone)]
pub struct EmStats {
    weight: f64,
    support_sum: f64,
    mass: Vec<f64>,
    first: Vec<Complex64>,
    second: Vec<f64>,
}

impl EmStats {
    pub fn new(components: usize) -> Self {
        Self {
            weight: 0.0,
            support_sum: 0.0,
            mass: vec![0.0; components],
            first: vec![Complex64::default(); components],
            second: vec![0.0; components],
        }
    }

    pub fn push(&mut self, m: &BgmMoments) {
        self.push_weighted(m, 1.0);
    }

    pub fn push_weighted(&mut self, m: &BgmMoments, w: f64) {
        self.weight += w;
        self.support_sum += w * m.support;
        for k in 0..self.mass.len() {
            self.mass[k] += w * m.comp_resp[k];
            self.first[k] += m.comp_mean[k] * (w * m.comp_resp[k]);
            self.second[k] += w * m.comp_resp[k] * (m.comp_var[k] + m.comp_mean[k].norm_sqr());
        }
    }
}

/// EM M-step for the Bernoulli-GM hyperparameters.
///
/// Components whose accumulated responsibility mass is below 1e-12 keep their
/// previous parameters; if every component is starved only lambda moves.
pub fn em_update(q: &GmPrior, stats: &EmStats) -> GmPrior {
    const MASS_FLOOR: f64 = 1e-12;
    const VAR_FLOOR: f64 = 1e-12;
    let l = q.components();
    assert_eq!(stats.mass.len(), l, "statistics and prior disagree on component count");

    let lambda = if stats.weight > 0.0 {
        (stats.support_sum / stats.weight).clamp(0.0, 1.0)
    } else {
        q.lambda
    };

    let total_mass: f64 = stats.mass.iter().sum();
    if total_mass < MASS_FLOOR {
        return GmPrior { lambda, ..q.clone() };
    }

    let mut weights = q.weights.clone();
    let mut means = q.means.clone();
    let mut vars = q.vars.clone();
    for k in 0..l {
        if stats.mass[k] < MASS_FLOOR {
            continue;
        }
        weights[k] = stats.mass[k] / total_mass;
        means[k] = stats.first[k] / stats.mass[k];
        vars[k] = (stats.second[k] / stats.mass[k] - means[k].norm_sqr()).max(VAR_FLOOR);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    GmPrior { lambda, weights, means, vars }
}

/// Deterministic starting prior: sparsity 0.1, uniform weights, means on a
/// symmetric real grid and equal variances, scaled so the second moment of
/// the nonzero part equals the supplied power estimate.
pub fn init_prior(sigma_x2: f64, components: usize) -> GmPrior {
    let components = components.max(1);
    let sigma_x2 = sigma_x2.max(1e-12);
    let sx = sigma_x2.sqrt();

    let grid: Vec<f64> = if components == 1 {
        vec![0.0]
    } else {
        (0..components)
            .map(|k| -1.0 + 2.0 * k as f64 / (components - 1) as f64)
            .collect()
    };
    let mean_sq = grid.iter().map(|g| g * g).sum::<f64>() / components as f64;

    let (means, var) = if mean_sq > 0.0 {
        // Put half of the nonzero power into the means, half into the spread.
        let c = (0.5 / mean_sq).sqrt();
        let means = grid.iter().map(|&g| Complex64::new(sx * g * c, 0.0)).collect();
        (means, 0.5 * sigma_x2)
    } else {
        (vec![Complex64::default(); components], sigma_x2)
    };

    GmPrior {
        lambda: 0.1,
        weights: vec![1.0 / components as f64; components],
        means,
        vars: vec![var; components],
    }
}

/// One-bit probit output channel.
#[derive(Debug, Clone)]
pub struct OneBitProbitChannel {
    sigma: f64,
}

impl OneBitProbitChannel {
    /// `noise_var` is the complex noise variance per received sample.
    pub fn new(noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::Domain(format!("noise_var = {noise_var} must be >= 0")));
        }
        Ok(Self { sigma: noise_var.sqrt() })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl OutputChannel for OneBitProbitChannel {
    fn moments(&self, y: Complex64, p_hat: Complex64, nu_p: f64) -> Result<(Complex64, f64)> {
        probit_moments_complex(y, p_hat, nu_p, self.sigma)
    }
}

/// Unquantized AWGN output channel, used for diagnostics and sanity runs.
#[derive(Debug, Clone)]
pub struct GaussianOutputChannel {
    noise_var: f64,
}

impl GaussianOutputChannel {
    pub fn new(noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::Domain(format!("noise_var = {noise_var} must be >= 0")));
        }
        Ok(Self { noise_var })
    }
}

impl OutputChannel for GaussianOutputChannel {
    fn moments(&self, y: Complex64, p_hat: Complex64, nu_p: f64) -> Result<(Complex64, f64)> {
        if self.noise_var == 0.0 {
            return Ok((y, 0.0));
        }
        let gain = nu_p / (nu_p + self.noise_var);
        Ok((p_hat + gain * (y - p_hat), nu_p * self.noise_var / (nu_p + self.noise_var)))
    }
}

/// Bernoulli-GM input channel with optional per-iteration EM learning.
#[derive(Debug, Clone)]
pub struct BgmInputChannel {
    prior: GmPrior,
    learn: bool,
}

impl BgmInputChannel {
    pub fn new(prior: GmPrior, learn: bool) -> Result<Self> {
        prior.validate()?;
        Ok(Self { prior, learn })
    }

    pub fn prior(&self) -> &GmPrior {
        &self.prior
    }
}

impl InputChannel for BgmInputChannel {
    fn update(
        &mut self,
        r_hat: &ArrayView1<Complex64>,
        nu_r: &ArrayView1<f64>,
    ) -> Result<(Array1<Complex64>, Array1<f64>)> {
        if r_hat.len() != nu_r.len() {
            return Err(Error::Dimension(format!(
                "r_hat has {} entries, nu_r has {}",
                r_hat.len(),
                nu_r.len()
            )));
        }
        let n = r_hat.len();
        let mut x_hat = Array1::zeros(n);
        let mut nu_x = Array1::zeros(n);
        let mut stats = EmStats::new(self.prior.components());
        for i in 0..n {
            let m = bgm_posterior_moments(r_hat[i], nu_r[i], &self.prior)?;
            x_hat[i] = m.x_hat;
            nu_x[i] = m.nu_x;
            stats.push(&m);
        }
        if self.learn {
            self.prior = em_update(&self.prior, &stats);
        }
        Ok((x_hat, nu_x))
    }

    fn prior_mean(&self) -> Complex64 {
        self.prior.mean()
    }

    fn prior_variance(&self) -> f64 {
        self.prior.variance()
    }

    fn prior_snapshot(&self) -> Option<GmPrior> {
        Some(self.prior.clone())
    }
}
