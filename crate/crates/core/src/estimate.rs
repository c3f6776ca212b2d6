//! Nuisance parameters: the noise level from the high-frequency power
//! floor, and the dilation scale jointly with the power spectrum.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::moments::RawMoments;
use crate::signal_model::{DilationConstants, NoiseConvention, ObservationBatch, ETA_MAX};
use crate::spectra::{power_spectrum, DftPlan};
use crate::unbias::{assemble_power_data_term, center_power, noise_kernel, solve_power_rhs, PowerSolution, SolverConfig};

/// Frequencies above half the Nyquist band, where the test signals have
/// negligible energy.
fn in_tail(k: i64, grid: &Grid) -> bool {
    2 * k.unsigned_abs() as usize > grid.k_max()
}

/// `sigma` from a mean power spectrum: the tail average divided by the
/// noise power per unit `sigma^2`.
pub fn estimate_sigma_from_power(mean_power: &[f64], grid: &Grid, noise: NoiseConvention) -> f64 {
    let k_max = grid.k_max() as i64;
    let (sum, count) = mean_power
        .iter()
        .enumerate()
        .filter(|(i, _)| in_tail(*i as i64 - k_max, grid))
        .fold((0.0, 0usize), |(s, c), (_, p)| (s + p, c + 1));
    let unit = noise_kernel(0.0, noise.node_variance(1.0, grid), grid);
    (sum / count as f64 / unit).max(0.0).sqrt()
}

pub fn estimate_sigma(batch: &ObservationBatch, grid: &Grid, noise: NoiseConvention) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let plan = DftPlan::new(grid);
    let mut mean = vec![0.0; grid.omega().len()];
    for obs in &batch.observations {
        for (m, p) in mean.iter_mut().zip(power_spectrum(&plan.forward(&obs.values))) {
            *m += p / batch.len() as f64;
        }
    }
    Ok(estimate_sigma_from_power(&mean, grid, noise))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaSearchConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub coarse_points: usize,
    pub golden_steps: usize,
    /// Smoothing width for the power data term.
    pub smoothing_width: f64,
    pub solver: SolverConfig,
    /// A secondary local minimum of the coarse profile deeper than this
    /// fraction of the profile range makes the search fail.
    pub ambiguity: f64,
}

impl EtaSearchConfig {
    pub fn new(smoothing_width: f64) -> Self {
        Self {
            eta_min: 1e-3,
            eta_max: ETA_MAX,
            coarse_points: 7,
            golden_steps: 18,
            smoothing_width,
            solver: SolverConfig::default(),
            ambiguity: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EtaEstimate {
    pub eta: f64,
    pub power: Vec<f64>,
    pub loss: f64,
    /// Every evaluated `(eta, loss)`, sorted by `eta`.
    pub profile: Vec<(f64, f64)>,
}

/// Normalized loss `min_{p >= 0} ||(I - L_C0) p - C1 L_C2 q||^2 / eta^2` at one
/// candidate.
pub fn eta_profile_point(
    centered_power: &[f64],
    eta: f64,
    grid: &Grid,
    cfg: &EtaSearchConfig,
    warm: Option<&[f64]>,
) -> Result<PowerSolution> {
    if !(eta > 0.0 && eta <= ETA_MAX + 1e-12) {
        return Err(Error::InvalidEta(eta));
    }
    let c = DilationConstants::from_eta(eta);
    let step = grid.d_omega();
    let rhs = assemble_power_data_term(centered_power, step, cfg.smoothing_width, eta)?;
    let mut sol = solve_power_rhs(&rhs, c.c0, step, &cfg.solver, warm)?;
    sol.loss /= eta * eta;
    Ok(sol)
}

/// Joint estimate of the dilation scale and the power spectrum: a coarse
/// log-spaced scan followed by golden-section refinement around the best
/// coarse point.
pub fn joint_estimate_eta_power(centered_power: &[f64], grid: &Grid, cfg: &EtaSearchConfig) -> Result<EtaEstimate> {
    if !(cfg.eta_min > 0.0 && cfg.eta_min < cfg.eta_max) || cfg.coarse_points < 3 {
        return Err(Error::InvalidParameter("bad eta search range".into()));
    }
    let (lo, hi) = (cfg.eta_min.ln(), cfg.eta_max.min(ETA_MAX).ln());
    let mut evals: Vec<(f64, PowerSolution)> = Vec::new();
    let eval = |eta: f64, evals: &mut Vec<(f64, PowerSolution)>| -> Result<f64> {
        let warm = evals
            .iter()
            .min_by(|a, b| (a.0 - eta).abs().total_cmp(&(b.0 - eta).abs()))
            .map(|e| e.1.power.clone());
        let sol = eta_profile_point(centered_power, eta, grid, cfg, warm.as_deref())?;
        let loss = sol.loss;
        evals.push((eta, sol));
        Ok(loss)
    };
    let coarse: Vec<f64> = (0..cfg.coarse_points)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.coarse_points - 1) as f64)
        .collect();
    let mut losses = Vec::with_capacity(coarse.len());
    for &u in &coarse {
        losses.push(eval(u.exp(), &mut evals)?);
    }
    let best = (0..losses.len()).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
    let range = losses.iter().cloned().fold(f64::MIN, f64::max) - losses[best];
    let minima: Vec<usize> = (0..losses.len())
        .filter(|&i| {
            let left = i == 0 || losses[i] < losses[i - 1];
            let right = i + 1 == losses.len() || losses[i] < losses[i + 1];
            left && right
        })
        .collect();
    if minima
        .iter()
        .any(|&i| i != best && losses[i] - losses[best] < cfg.ambiguity * range)
    {
        let mut profile: Vec<(f64, f64)> = evals.iter().map(|(e, s)| (*e, s.loss)).collect();
        profile.sort_by(|a, b| a.0.total_cmp(&b.0));
        return Err(Error::SearchFailure { profile });
    }
    // Golden-section search on log eta inside the neighbouring coarse points.
    let mut a = coarse[best.saturating_sub(1)];
    let mut b = coarse[(best + 1).min(coarse.len() - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = eval(x1.exp(), &mut evals)?;
    let mut f2 = eval(x2.exp(), &mut evals)?;
    for _ in 2..cfg.golden_steps {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = eval(x1.exp(), &mut evals)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = eval(x2.exp(), &mut evals)?;
        }
    }
    let (eta, sol) = evals
        .iter()
        .min_by(|x, y| x.1.loss.total_cmp(&y.1.loss))
        .map(|(e, s)| (*e, s.clone()))
        .unwrap();
    let mut profile: Vec<(f64, f64)> = evals.iter().map(|(e, s)| (*e, s.loss)).collect();
    profile.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(EtaEstimate {
        eta,
        power: sol.power,
        loss: sol.loss,
        profile,
    })
}

/// Two-stage estimate from accumulated moments: `sigma` from the power tail
/// (unless given), then `(eta, Pf)` jointly.
pub fn estimate_from_moments(
    raw: &RawMoments,
    sigma: Option<f64>,
    noise: NoiseConvention,
    grid: &Grid,
    smoothing_width: f64,
) -> Result<(f64, EtaEstimate)> {
    let sigma = sigma.unwrap_or_else(|| estimate_sigma_from_power(&raw.mean_power, grid, noise));
    let centered = center_power(&raw.mean_power, sigma, noise, grid);
    let est = joint_estimate_eta_power(&centered, grid, &EtaSearchConfig::new(smoothing_width))?;
    Ok((sigma, est))
}
