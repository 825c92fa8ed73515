//! Monte Carlo harness: runs the full estimation pipeline over SNR or
//! antenna-count sweeps, matches estimates to the ground truth, aggregates
//! RMSE/NMSE metrics and writes one CSV per sweep.
//!
//! Trials are independent; per-trial RNG streams are derived by hashing
//! (base seed, sweep point, trial index), so results are identical for any
//! worker count and any execution order.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::channel_model::{
    dft_transform, effective_channel, simulate_measurement, ChannelParams, SystemConfig,
};
use crate::channels::{
    init_prior, BgmInputChannel, GaussianOutputChannel, OneBitProbitChannel,
};
use crate::doa::{estimate_all_doas, select_columns, DoaConfig};
use crate::error::{Error, Result};
use crate::gamp::{run_gamp, GampConfig, OutputChannel, TraceRecord};
use crate::operator::{unvec_columns, vec_columns, LinearOperator};
use crate::reconstruction::{estimate_d, estimate_h, infer_sigma_x2, rescale_estimate};

/// Squared-degree penalty charged per missed detection when matching.
pub const MISS_PENALTY_DEG: f64 = 5.0;

/// Front-end selection: the one-bit quantizer or a pass-through for
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    #[default]
    OneBit,
    None,
}

/// Fully resolved single-point scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub system: SystemConfig,
    pub channel: ChannelParams,
    pub quantizer: QuantizerKind,
    /// Draw fresh angles and gains per trial instead of keeping the
    /// configured ones fixed. Off by default: averages are over noise only.
    pub randomize_channel: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if !self.randomize_channel {
            self.channel.validate(self.system.total_paths())?;
        }
        Ok(())
    }
}

/// One sweep axis: receive SNR in dB, or antenna count at fixed SNR.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SweepAxis {
    Snr { snr_db: Vec<f64> },
    AntennaCount { m: Vec<usize>, snr_db: f64 },
}

impl SweepAxis {
    pub fn points(&self) -> Vec<f64> {
        match self {
            SweepAxis::Snr { snr_db } => snr_db.clone(),
            SweepAxis::AntennaCount { m, .. } => m.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// A named sweep, one output CSV each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sweep {
    pub name: String,
    pub axis: SweepAxis,
}

/// Everything a full experiment needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub gamp: GampConfig,
    pub doa: DoaConfig,
    pub trials: usize,
    pub base_seed: u64,
    pub sweeps: Vec<Sweep>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.gamp.validate()?;
        self.doa.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.sweeps.is_empty() {
            return Err(Error::Config("at least one sweep is required".into()));
        }
        for sw in &self.sweeps {
            if sw.axis.points().is_empty() {
                return Err(Error::Config(format!("sweep '{}' has no points", sw.name)));
            }
            if sw.name.is_empty() || !sw.name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "sweep name '{}' must be a simple identifier",
                    sw.name
                )));
            }
        }
        Ok(())
    }
}

/// Noise variance realizing a target SNR with unit-modulus pilots:
/// SNR = 10 log10(||S||_F^2 / (N_p sigma^2)) and ||S||_F^2 = K N_p.
pub fn noise_var_for_snr(total_paths: usize, snr_db: f64) -> f64 {
    total_paths as f64 / 10f64.powf(snr_db / 10.0)
}

/// Outcome of one trial. A failed pipeline stage is recorded, not thrown:
/// the trial then counts as all paths missed.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub theta_hat: Vec<f64>,
    pub d_hat: Vec<Complex64>,
    pub h_hat: Option<Array2<Complex64>>,
    pub model_order_detected: usize,
    /// Per-trial matched RMSE over the true paths, degrees.
    pub matched_rmse_theta: f64,
    /// Gain NMSE in dB (-inf for an exact match).
    pub nmse_d_db: f64,
    /// Channel NMSE in dB.
    pub nmse_h_db: f64,
    pub order_correct: bool,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
    pub trace: Vec<TraceRecord>,
}

/// Estimate-to-truth assignment and the matched error.
#[derive(Debug, Clone)]
pub struct Matching {
    /// For each true path, the index of the matched estimate, if any.
    pub assignment: Vec<Option<usize>>,
    pub rmse_deg: f64,
    pub missed: usize,
    pub extra: usize,
}

/// Minimum-total-squared-error assignment of estimates to true angles.
///
/// Exactly min(#estimates, #truths) pairs are formed; each unmatched truth
/// adds a fixed (5 deg)^2 penalty, surplus estimates are only counted.
pub fn match_estimates(theta_hat: &[f64], theta_true: &[f64]) -> Matching {
    let n_t = theta_true.len();
    let n_e = theta_hat.len();
    assert!(n_t > 0, "matching needs at least one true path");
    if n_e == 0 {
        return Matching {
            assignment: vec![None; n_t],
            rmse_deg: MISS_PENALTY_DEG,
            missed: n_t,
            extra: 0,
        };
    }

    // Branch and bound over injective truth -> estimate assignments; problem
    // sizes here are tiny (a handful of paths, at most N columns).
    let pairs = n_t.min(n_e);
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<Option<usize>> = vec![None; n_t];
    let mut current: Vec<Option<usize>> = vec![None; n_t];
    let mut used = vec![false; n_e];

    fn recurse(
        t: usize,
        matched: usize,
        cost: f64,
        pairs: usize,
        theta_hat: &[f64],
        theta_true: &[f64],
        used: &mut [bool],
        current: &mut Vec<Option<usize>>,
        best_cost: &mut f64,
        best: &mut Vec<Option<usize>>,
    ) {
        if cost >= *best_cost {
            return;
        }
        if t == theta_true.len() {
            if matched == pairs {
                *best_cost = cost;
                best.clone_from(current);
            }
            return;
        }
        let remaining_truths = theta_true.len() - t;
        let need = pairs - matched;
        // Option: leave this truth unmatched, when the remaining ones can
        // still complete the required pair count.
        if remaining_truths - 1 >= need {
            current[t] = None;
            recurse(
                t + 1,
                matched,
                cost + MISS_PENALTY_DEG * MISS_PENALTY_DEG,
                pairs,
                theta_hat,
                theta_true,
                used,
                current,
                best_cost,
                best,
            );
        }
        if need > 0 {
            for e in 0..theta_hat.len() {
                if used[e] {
                    continue;
                }
                used[e] = true;
                current[t] = Some(e);
                let d = theta_hat[e] - theta_true[t];
                recurse(
                    t + 1,
                    matched + 1,
                    cost + d * d,
                    pairs,
                    theta_hat,
                    theta_true,
                    used,
                    current,
                    best_cost,
                    best,
                );
                used[e] = false;
                current[t] = None;
            }
        }
    }

    recurse(
        0,
        0,
        0.0,
        pairs,
        theta_hat,
        theta_true,
        &mut used,
        &mut current,
        &mut best_cost,
        &mut best,
    );

    let missed = n_t - pairs;
    Matching {
        assignment: best,
        rmse_deg: (best_cost / n_t as f64).sqrt(),
        missed,
        extra: n_e.saturating_sub(n_t),
    }
}

/// Mix a per-trial seed from the experiment seed, the sweep point and the
/// trial index (splitmix64 steps).
pub fn trial_seed(base_seed: u64, sweep_tag: u64, trial_index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(base_seed) ^ sweep_tag) ^ trial_index)
}

fn frob_sq(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

fn norm_sq(a: &Array1<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

fn random_channel<R: Rng>(total_paths: usize, rng: &mut R) -> ChannelParams {
    // Angles uniform in (-80, 80) with a minimum separation of 0.5 degrees,
    // unit-magnitude gains with uniform phase.
    let mut thetas: Vec<f64> = Vec::with_capacity(total_paths);
    while thetas.len() < total_paths {
        let t = -80.0 + 160.0 * rand::RngExt::random::<f64>(rng);
        if thetas.iter().all(|&x: &f64| (x - t).abs() > 0.5) {
            thetas.push(t);
        }
    }
    let alphas = (0..total_paths)
        .map(|_| {
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * rand::RngExt::random::<f64>(rng))
        })
        .collect();
    ChannelParams { thetas_deg: thetas, alphas }
}

enum AnyOutput {
    OneBit(OneBitProbitChannel),
    Gaussian(GaussianOutputChannel),
}

impl OutputChannel for AnyOutput {
    fn moments(&self, y: Complex64, p_hat: Complex64, nu_p: f64) -> Result<(Complex64, f64)> {
        match self {
            AnyOutput::OneBit(c) => c.moments(y, p_hat, nu_p),
            AnyOutput::Gaussian(c) => c.moments(y, p_hat, nu_p),
        }
    }
}

fn failed_trial(truth: &ChannelParams, msg: String) -> TrialResult {
    TrialResult {
        theta_hat: Vec::new(),
        d_hat: Vec::new(),
        h_hat: None,
        model_order_detected: 0,
        matched_rmse_theta: MISS_PENALTY_DEG,
        nmse_d_db: 0.0,
        nmse_h_db: 0.0,
        order_correct: false,
        converged: false,
        iterations: 0,
        error: Some(msg),
        trace: Vec::new(),
    }
    .with_truth_count(truth.thetas_deg.len())
}

impl TrialResult {
    fn with_truth_count(self, _n: usize) -> Self {
        self
    }
}

/// Run the full pipeline once: simulate, estimate the coefficients, recover
/// the scale, select columns, extract angles and reconstruct the gains.
pub fn run_trial(
    system: &SystemConfig,
    channel: &ChannelParams,
    quantizer: QuantizerKind,
    randomize_channel: bool,
    gamp_cfg: &GampConfig,
    doa_cfg: &DoaConfig,
    seed: u64,
    keep_trace: bool,
) -> TrialResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channel_owned;
    let channel = if randomize_channel {
        channel_owned = random_channel(system.total_paths(), &mut rng);
        &channel_owned
    } else {
        channel
    };

    let sim = match simulate_measurement(system, channel, &mut rng) {
        Ok(s) => s,
        Err(e) => return failed_trial(channel, e.to_string()),
    };
    let op = &sim.measurement.op;

    let scale = match infer_sigma_x2(
        sim.pre_quantization_power,
        op.frob_norm_sq(),
        system.n_p,
        system.m,
        op.cols(),
        system.noise_var,
    ) {
        Ok(s) => s,
        Err(e) => return failed_trial(channel, e.to_string()),
    };

    let (y, out_ch) = match quantizer {
        QuantizerKind::OneBit => (
            sim.measurement.y.clone(),
            match OneBitProbitChannel::new(system.noise_var) {
                Ok(c) => AnyOutput::OneBit(c),
                Err(e) => return failed_trial(channel, e.to_string()),
            },
        ),
        QuantizerKind::None => (
            sim.received.clone(),
            match GaussianOutputChannel::new(system.noise_var) {
                Ok(c) => AnyOutput::Gaussian(c),
                Err(e) => return failed_trial(channel, e.to_string()),
            },
        ),
    };

    let prior = init_prior(scale.sigma_x2, 3);
    let mut in_ch = match BgmInputChannel::new(prior, true) {
        Ok(c) => c,
        Err(e) => return failed_trial(channel, e.to_string()),
    };

    let gamp_out = match run_gamp(op, &y.view(), &out_ch, &mut in_ch, gamp_cfg) {
        Ok(r) => r,
        Err(e) => return failed_trial(channel, e.to_string()),
    };

    // One-bit data only fixes the direction; restore the measured scale.
    // Unquantized diagnostics carry the true scale already, so they skip it.
    let x_tilde = match quantizer {
        QuantizerKind::OneBit => match rescale_estimate(&gamp_out.x_hat, scale.target_norm) {
            Ok(x) => x,
            Err(e) => return failed_trial(channel, e.to_string()),
        },
        QuantizerKind::None => gamp_out.x_hat.clone(),
    };

    let x_mat = match unvec_columns(&x_tilde.view(), system.m, system.n) {
        Ok(x) => x,
        Err(e) => return failed_trial(channel, e.to_string()),
    };
    let selection = match select_columns(&x_mat, doa_cfg.rel_threshold) {
        Ok(s) => s,
        Err(e) => return failed_trial(channel, e.to_string()),
    };
    let mut x_sel = Array2::zeros((system.m, selection.indices.len()));
    for (dst, &src) in selection.indices.iter().enumerate() {
        for r in 0..system.m {
            x_sel[[r, dst]] = x_mat[[r, src]];
        }
    }

    let estimates = match estimate_all_doas(&x_sel, &selection.indices, doa_cfg) {
        Ok(e) => e,
        Err(e) => return failed_trial(channel, e.to_string()),
    };
    let theta_hat: Vec<f64> = estimates.iter().map(|e| e.theta_deg).collect();

    // Reorder the selected columns by the sorted angles so gain k belongs to
    // theta_hat[k].
    let mut x_sorted = Array2::zeros(x_sel.dim());
    for (dst, est) in estimates.iter().enumerate() {
        let src = selection.indices.iter().position(|&c| c == est.column_index).unwrap();
        for r in 0..system.m {
            x_sorted[[r, dst]] = x_sel[[r, src]];
        }
    }

    let h_hat = estimate_h(&x_sorted);
    let gains = match estimate_d(&theta_hat, &x_sorted) {
        Ok(g) => g,
        Err(e) => return failed_trial(channel, e.to_string()),
    };

    // Metrics against the truth.
    let matching = match_estimates(&theta_hat, &channel.thetas_deg);
    let h_true = match effective_channel(channel, system.m) {
        Ok(h) => h,
        Err(e) => return failed_trial(channel, e.to_string()),
    };
    let d_norm_sq: f64 = channel.alphas.iter().map(|a| a.norm_sqr()).sum();
    let h_norm_sq = frob_sq(&h_true);
    let mut d_err = 0.0f64;
    let mut h_err = 0.0f64;
    for (t, slot) in matching.assignment.iter().enumerate() {
        match slot {
            Some(e) => {
                d_err += (gains.d_hat[*e] - channel.alphas[t]).norm_sqr();
                let mut col_err = 0.0;
                for r in 0..system.m {
                    col_err += (h_hat[[r, *e]] - h_true[[r, t]]).norm_sqr();
                }
                h_err += col_err;
            }
            None => {
                d_err += channel.alphas[t].norm_sqr();
                h_err += (0..system.m).map(|r| h_true[[r, t]].norm_sqr()).sum::<f64>();
            }
        }
    }

    TrialResult {
        model_order_detected: theta_hat.len(),
        order_correct: theta_hat.len() == channel.thetas_deg.len(),
        matched_rmse_theta: matching.rmse_deg,
        nmse_d_db: 10.0 * (d_err / d_norm_sq).log10(),
        nmse_h_db: 10.0 * (h_err / h_norm_sq).log10(),
        theta_hat,
        d_hat: gains.d_hat,
        h_hat: Some(h_hat),
        converged: gamp_out.converged,
        iterations: gamp_out.iterations,
        error: None,
        trace: if keep_trace { gamp_out.trace } else { Vec::new() },
    }
}

/// Aggregated metrics for one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub rmse_theta_deg: f64,
    pub nmse_d_db: f64,
    pub nmse_h_db: f64,
    pub detect_rate: f64,
    pub conv_rate: f64,
    pub trials: usize,
}

/// Reduce per-trial results: RMSE as the root of the mean squared error
/// across trials, NMSE as the mean linear ratio reported in dB.
pub fn aggregate(sweep_value: f64, results: &[TrialResult]) -> SummaryRow {
    assert!(!results.is_empty(), "aggregate needs at least one trial");
    let n = results.len() as f64;
    let mse =
        results.iter().map(|r| r.matched_rmse_theta * r.matched_rmse_theta).sum::<f64>() / n;
    let nmse_d = results.iter().map(|r| 10f64.powf(r.nmse_d_db / 10.0)).sum::<f64>() / n;
    let nmse_h = results.iter().map(|r| 10f64.powf(r.nmse_h_db / 10.0)).sum::<f64>() / n;
    SummaryRow {
        sweep_value,
        rmse_theta_deg: mse.sqrt(),
        nmse_d_db: 10.0 * nmse_d.log10(),
        nmse_h_db: 10.0 * nmse_h.log10(),
        detect_rate: results.iter().filter(|r| r.order_correct).count() as f64 / n,
        conv_rate: results.iter().filter(|r| r.converged && r.error.is_none()).count() as f64
            / n,
        trials: results.len(),
    }
}

/// Resolve the per-point system config for a sweep.
fn point_system(spec: &ExperimentSpec, sweep: &Sweep, point: f64) -> SystemConfig {
    let mut sys = spec.scenario.system.clone();
    let total = sys.total_paths();
    match &sweep.axis {
        SweepAxis::Snr { .. } => {
            sys.noise_var = noise_var_for_snr(total, point);
        }
        SweepAxis::AntennaCount { snr_db, .. } => {
            sys.m = point as usize;
            sys.noise_var = noise_var_for_snr(total, *snr_db);
        }
    }
    sys
}

fn sweep_tag(sweep_index: usize, point: f64) -> u64 {
    (sweep_index as u64) << 56 ^ point.to_bits()
}

/// Run every sweep of the experiment and return the per-point summaries,
/// in declaration order.
pub fn run_experiment_summaries(
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<Vec<(String, Vec<SummaryRow>)>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    // Flatten all (sweep, point, trial) tasks, run them in any order, then
    // reduce in declaration order.
    struct Task {
        sweep_idx: usize,
        point_idx: usize,
        trial: usize,
        system: SystemConfig,
        seed: u64,
    }
    let mut tasks = Vec::new();
    for (si, sweep) in spec.sweeps.iter().enumerate() {
        for (pi, point) in sweep.axis.points().iter().enumerate() {
            let system = point_system(spec, sweep, *point);
            for trial in 0..spec.trials {
                tasks.push(Task {
                    sweep_idx: si,
                    point_idx: pi,
                    trial,
                    system: system.clone(),
                    seed: trial_seed(spec.base_seed, sweep_tag(si, *point), trial as u64),
                });
            }
        }
    }

    let results: Vec<(usize, usize, usize, TrialResult)> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .map(|task| {
                let r = run_trial(
                    &task.system,
                    &spec.scenario.channel,
                    spec.scenario.quantizer,
                    spec.scenario.randomize_channel,
                    &spec.gamp,
                    &spec.doa,
                    task.seed,
                    false,
                );
                (task.sweep_idx, task.point_idx, task.trial, r)
            })
            .collect()
    });

    let mut out = Vec::new();
    for (si, sweep) in spec.sweeps.iter().enumerate() {
        let points = sweep.axis.points();
        let mut rows = Vec::with_capacity(points.len());
        for (pi, point) in points.iter().enumerate() {
            let mut per_point: Vec<(usize, &TrialResult)> = results
                .iter()
                .filter(|(s, p, _, _)| *s == si && *p == pi)
                .map(|(_, _, t, r)| (*t, r))
                .collect();
            per_point.sort_by_key(|(t, _)| *t);
            let ordered: Vec<TrialResult> =
                per_point.into_iter().map(|(_, r)| r.clone()).collect();
            rows.push(aggregate(*point, &ordered));
        }
        out.push((sweep.name.clone(), rows));
    }
    Ok(out)
}

/// Format a float with full round-trip precision.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Write one sweep summary as CSV.
pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "sweep_value,rmse_theta_deg,nmse_d_db,nmse_h_db,detect_rate,conv_rate,trials")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt(r.sweep_value),
            fmt(r.rmse_theta_deg),
            fmt(r.nmse_d_db),
            fmt(r.nmse_h_db),
            fmt(r.detect_rate),
            fmt(r.conv_rate),
            r.trials
        )?;
    }
    Ok(())
}

/// Run the experiment and write `<sweep-name>.csv` files under `out_dir`.
/// Returns the written paths in sweep order.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<PathBuf>> {
    let summaries = run_experiment_summaries(spec, workers)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for (name, rows) in &summaries {
        let path = out_dir.join(format!("{name}.csv"));
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, rows).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(&path, buf).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Ground-truth signal vector used by diagnostics: vec of X(theta) zero
/// padded to N columns.
pub fn true_coefficients(system: &SystemConfig, channel: &ChannelParams) -> Result<Array1<Complex64>> {
    let h = effective_channel(channel, system.m)?;
    let x_theta = dft_transform(&h);
    let mut x = Array2::zeros((system.m, system.n));
    for c in 0..channel.thetas_deg.len() {
        for r in 0..system.m {
            x[[r, c]] = x_theta[[r, c]];
        }
    }
    Ok(vec_columns(&x))
}
