//! Monte Carlo sweeps over sample size: synthesize, accumulate, estimate,
//! unbias, invert, score. Plus slope fitting and the CSV/SVG/manifest
//! outputs.
//!
//! One observation stream is drawn per `(sigma, trial)`. Moments for every
//! `M` in the sweep are prefixes of that stream, and every series (oracle or
//! estimated parameters, with or without unbiasing, each inversion method)
//! is computed from the same moments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_sigma_from_power, joint_estimate_eta_power, EtaSearchConfig};
use crate::grid::{Grid, Lattice};
use crate::invert::{aligned_relative_error, invert, ApsConfig, InversionMethod};
use crate::io::write_text;
use crate::moments::{accumulate_model, AccumulateOptions, RawMoments};
use crate::signal_model::{derive_seed, sample_hidden, ModelParams, NoiseConvention, Signal, SignalId, ETA_MAX};
use crate::spectra::{bispectrum, dft, BispectrumField};
use crate::unbias::{default_smoothing_width, omega_domain, solve_bispectrum_report, solve_power, CenteredMoments, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    /// True `sigma` and `eta`.
    Oracle,
    /// `sigma` from the power tail, `eta` from the joint search.
    Empirical,
}

impl ParamMode {
    pub fn name(self) -> &'static str {
        match self {
            ParamMode::Oracle => "oracle",
            ParamMode::Empirical => "empirical",
        }
    }
}

fn default_trials() -> usize {
    3
}

fn default_modes() -> Vec<ParamMode> {
    vec![ParamMode::Oracle]
}

fn default_unbias() -> Vec<bool> {
    vec![true, false]
}

fn default_eta() -> f64 {
    ETA_MAX
}

fn default_width_coefficient() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub signal: SignalId,
    pub sigmas: Vec<f64>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Sample sizes, strictly increasing powers of two.
    pub ms: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<ParamMode>,
    /// `true` for the unbiased estimate, `false` for the centered mean.
    #[serde(default = "default_unbias")]
    pub unbias: Vec<bool>,
    /// Inversion methods to score; empty scores bispectra only.
    #[serde(default)]
    pub inversion: Vec<InversionMethod>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConvention,
    #[serde(default)]
    pub lattice_stride: Option<usize>,
    #[serde(default)]
    pub lattice_half: Option<usize>,
    /// `c` in `L = c sigma M^{-1/6}`.
    #[serde(default = "default_width_coefficient")]
    pub width_coefficient: f64,
}

impl ExperimentSpec {
    pub fn new(signal: SignalId, sigmas: Vec<f64>, ms: Vec<usize>) -> Self {
        Self {
            name: String::new(),
            signal,
            sigmas,
            eta: ETA_MAX,
            ms,
            trials: default_trials(),
            modes: default_modes(),
            unbias: default_unbias(),
            inversion: Vec::new(),
            seed: 0,
            noise: NoiseConvention::default(),
            lattice_stride: None,
            lattice_half: None,
            width_coefficient: default_width_coefficient(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.ms.is_empty() || self.ms.windows(2).any(|w| w[0] >= w[1]) {
            return bad("M list must be nonempty and strictly increasing".into());
        }
        if let Some(m) = self.ms.iter().find(|m| !m.is_power_of_two()) {
            return bad(format!("M = {m} is not a power of two"));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma list must be nonempty and nonnegative".into());
        }
        if !(0.0..=ETA_MAX + 1e-12).contains(&self.eta) {
            return Err(Error::InvalidEta(self.eta));
        }
        if self.modes.is_empty() || self.unbias.is_empty() {
            return bad("at least one parameter mode and one unbias setting are required".into());
        }
        if !(self.width_coefficient > 0.0) {
            return bad("width coefficient must be positive".into());
        }
        Ok(())
    }

    pub fn lattice(&self, grid: &Grid) -> Result<Lattice> {
        let d = grid.default_lattice();
        let stride = self.lattice_stride.unwrap_or(d.stride());
        let half = self.lattice_half.unwrap_or(grid.k_max() / (2 * stride));
        Lattice::new(grid, stride, half)
    }

    fn stream_seed(&self, sigma_index: usize, trial: usize) -> u64 {
        derive_seed(derive_seed(self.seed, sigma_index as u64), trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    /// `<mode>-ub` or `<mode>-no-ub`.
    pub series: String,
    pub inversion: Option<InversionMethod>,
    pub sigma: f64,
    pub m: usize,
    pub trial: usize,
    pub bispectrum_rel_error: Option<f64>,
    pub signal_rel_error: Option<f64>,
    pub eta_hat: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub wall_time: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub spec: ExperimentSpec,
    pub rows: Vec<ResultRow>,
}

pub fn series_name(mode: ParamMode, unbias: bool) -> String {
    format!("{}-{}", mode.name(), if unbias { "ub" } else { "no-ub" })
}

fn inversion_name(m: Option<InversionMethod>) -> &'static str {
    match m {
        None => "none",
        Some(InversionMethod::Aps) => "aps",
        Some(InversionMethod::Fm) => "fm",
    }
}

/// Ground truth shared by every row of one experiment.
struct Truth {
    signal: Signal,
    bispectrum: BispectrumField,
    domain: Vec<bool>,
}

/// Parameters and estimates for one `(mode, M)` cell.
struct Fit {
    eta: f64,
    eta_hat: Option<f64>,
    sigma_hat: Option<f64>,
    width: f64,
    centered: CenteredMoments,
    /// Joint-search power spectrum, when the search ran.
    power: Option<Vec<f64>>,
}

fn fit_parameters(
    spec: &ExperimentSpec,
    raw: &RawMoments,
    sigma: f64,
    mode: ParamMode,
    grid: &Grid,
) -> Result<Fit> {
    let smoothing = |s: f64| {
        if s > 0.0 {
            default_smoothing_width(s, raw.count, grid) * spec.width_coefficient / 5.0
        } else {
            default_smoothing_width(0.0, raw.count, grid)
        }
    };
    match mode {
        ParamMode::Oracle => Ok(Fit {
            eta: spec.eta,
            eta_hat: None,
            sigma_hat: None,
            width: smoothing(sigma),
            centered: CenteredMoments::from_raw(raw, sigma, spec.noise, grid),
            power: None,
        }),
        ParamMode::Empirical => {
            let s = estimate_sigma_from_power(&raw.mean_power, grid, spec.noise);
            let width = smoothing(s);
            let centered = CenteredMoments::from_raw(raw, s, spec.noise, grid);
            let est = joint_estimate_eta_power(&centered.mean_power, grid, &EtaSearchConfig::new(width))?;
            Ok(Fit {
                eta: est.eta,
                eta_hat: Some(est.eta),
                sigma_hat: Some(s),
                width,
                centered,
                power: Some(est.power),
            })
        }
    }
}

/// Rows for one `(sigma, trial, M, mode)` cell.
fn analyze_cell(
    spec: &ExperimentSpec,
    raw: &RawMoments,
    sigma: f64,
    trial: usize,
    mode: ParamMode,
    grid: &Grid,
    truth: &Truth,
) -> Vec<ResultRow> {
    let start = Instant::now();
    let inversions: Vec<Option<InversionMethod>> = if spec.inversion.is_empty() {
        vec![None]
    } else {
        spec.inversion.iter().copied().map(Some).collect()
    };
    let row = |unbias: bool, inversion: Option<InversionMethod>| ResultRow {
        series: series_name(mode, unbias),
        inversion,
        sigma,
        m: raw.count,
        trial,
        bispectrum_rel_error: None,
        signal_rel_error: None,
        eta_hat: None,
        sigma_hat: None,
        wall_time: 0.0,
        failure: None,
    };
    let failed = |e: &Error| -> Vec<ResultRow> {
        spec.unbias
            .iter()
            .flat_map(|&ub| {
                inversions.iter().map(move |&inv| ResultRow {
                    failure: Some(e.to_string()),
                    wall_time: start.elapsed().as_secs_f64(),
                    ..row(ub, inv)
                })
            })
            .collect()
    };
    let fit = match fit_parameters(spec, raw, sigma, mode, grid) {
        Ok(f) => f,
        Err(e) => return failed(&e),
    };
    let mut rows = Vec::new();
    for &ub in &spec.unbias {
        let estimate = if ub && fit.eta > 0.0 {
            let cfg = SolverConfig::default().with_width(fit.width);
            solve_bispectrum_report(&fit.centered.mean_bispectrum, fit.eta, &cfg, Some(grid)).map(|(b, _)| b)
        } else {
            Ok(fit.centered.mean_bispectrum.clone())
        };
        let power = || -> Result<Vec<f64>> {
            if !ub || fit.eta == 0.0 {
                return Ok(fit.centered.mean_power.clone());
            }
            match &fit.power {
                Some(p) => Ok(p.clone()),
                None => solve_power(
                    &fit.centered.mean_power,
                    fit.eta,
                    grid,
                    &SolverConfig::default().with_width(fit.width),
                ),
            }
        };
        for &inv in &inversions {
            let mut r = row(ub, inv);
            r.eta_hat = fit.eta_hat;
            r.sigma_hat = fit.sigma_hat;
            let outcome = (|| -> Result<()> {
                let b = estimate.as_ref().map_err(|e| Error::InvalidParameter(e.to_string()))?;
                r.bispectrum_rel_error = Some(b.relative_error_on(&truth.bispectrum, &truth.domain)?);
                if let Some(method) = inv {
                    let signal = invert(b, &power()?, grid, method, &ApsConfig::default())?;
                    r.signal_rel_error = Some(aligned_relative_error(&truth.signal, &signal, grid)?);
                }
                Ok(())
            })();
            if let Err(e) = outcome {
                r.failure = Some(match &estimate {
                    Err(orig) => orig.to_string(),
                    Ok(_) => e.to_string(),
                });
            }
            r.wall_time = start.elapsed().as_secs_f64();
            rows.push(r);
        }
    }
    rows
}

/// Runs every `(sigma, trial)` stream and scores every series at every `M`.
/// Rows come back sorted by `(series, inversion, sigma, M, trial)`
/// regardless of scheduling.
pub fn run_experiment(spec: &ExperimentSpec, grid: &Grid) -> Result<ResultTable> {
    spec.validate()?;
    let lattice = spec.lattice(grid)?;
    let hidden = ModelParams::new(spec.signal, grid, 0.0, spec.eta)?;
    let signal = sample_hidden(&hidden, grid);
    let truth = Truth {
        bispectrum: bispectrum(&dft(&signal.values, grid), &lattice),
        domain: omega_domain(&lattice, None),
        signal,
    };
    let streams: Vec<(usize, usize)> = (0..spec.sigmas.len())
        .flat_map(|s| (0..spec.trials).map(move |t| (s, t)))
        .collect();
    let per_stream: Vec<Result<Vec<ResultRow>>> = streams
        .par_iter()
        .map(|&(si, trial)| {
            let sigma = spec.sigmas[si];
            let params = ModelParams::new(spec.signal, grid, sigma, spec.eta)?.with_noise(spec.noise);
            log::info!("{} sigma={sigma} trial={trial}: accumulating", spec.signal);
            let raws = accumulate_model(
                &params,
                grid,
                lattice,
                spec.stream_seed(si, trial),
                &spec.ms,
                AccumulateOptions::default(),
            )?;
            let cells: Vec<(usize, ParamMode)> = (0..raws.len())
                .flat_map(|i| spec.modes.iter().map(move |&m| (i, m)))
                .collect();
            Ok(cells
                .par_iter()
                .flat_map_iter(|&(i, mode)| analyze_cell(spec, &raws[i], sigma, trial, mode, grid, &truth))
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_stream {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        a.series
            .cmp(&b.series)
            .then(inversion_name(a.inversion).cmp(inversion_name(b.inversion)))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.m.cmp(&b.m))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(ResultTable { spec: spec.clone(), rows })
}

/// Least-squares slope of `log(mean error)` against `log M`, averaging
/// trials at each `M` first.
pub fn fit_loglog_slope(points: &[(usize, f64)]) -> Result<f64> {
    let mut by_m: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(m, e) in points {
        let entry = by_m.entry(m).or_insert((0.0, 0));
        entry.0 += e;
        entry.1 += 1;
    }
    if by_m.len() < 3 {
        return Err(Error::InsufficientPoints(by_m.len()));
    }
    let xy: Vec<(f64, f64)> = by_m
        .iter()
        .map(|(&m, &(s, c))| ((m as f64).ln(), (s / c as f64).ln()))
        .collect();
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xy.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Which error a curve tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Bispectrum,
    Signal,
    EtaRelative,
}

/// One plotted curve: a series at one noise level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CurveKey {
    pub series: String,
    pub inversion: &'static str,
    pub sigma_bits: u64,
}

impl CurveKey {
    pub fn sigma(&self) -> f64 {
        f64::from_bits(self.sigma_bits)
    }

    pub fn label(&self) -> String {
        if self.inversion == "none" {
            format!("{} sigma={}", self.series, self.sigma())
        } else {
            format!("{} {} sigma={}", self.series, self.inversion, self.sigma())
        }
    }
}

impl ResultTable {
    /// `(M, value)` pairs of successful rows, grouped by curve.
    pub fn curves(&self, metric: Metric) -> BTreeMap<CurveKey, Vec<(usize, f64)>> {
        let mut out: BTreeMap<CurveKey, Vec<(usize, f64)>> = BTreeMap::new();
        for r in &self.rows {
            let v = match metric {
                Metric::Bispectrum if r.inversion.is_none() || r.inversion == self.spec.inversion.first().copied() => {
                    r.bispectrum_rel_error
                }
                Metric::Bispectrum => None,
                Metric::Signal => r.signal_rel_error,
                Metric::EtaRelative => r.eta_hat.map(|e| (e - self.spec.eta).abs() / self.spec.eta),
            };
            if let Some(v) = v {
                let key = CurveKey {
                    series: r.series.clone(),
                    inversion: if metric == Metric::Signal { inversion_name(r.inversion) } else { "none" },
                    sigma_bits: r.sigma.to_bits(),
                };
                out.entry(key).or_default().push((r.m, v));
            }
        }
        out
    }

    pub fn slope(&self, metric: Metric, series: &str, inversion: Option<InversionMethod>, sigma: f64) -> Result<f64> {
        let key = CurveKey {
            series: series.to_string(),
            inversion: if metric == Metric::Signal { inversion_name(inversion) } else { "none" },
            sigma_bits: sigma.to_bits(),
        };
        let curves = self.curves(metric);
        fit_loglog_slope(curves.get(&key).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Mean over trials of a metric at one `M`.
    pub fn mean_at(&self, metric: Metric, series: &str, inversion: Option<InversionMethod>, sigma: f64, m: usize) -> Option<f64> {
        let key = CurveKey {
            series: series.to_string(),
            inversion: if metric == Metric::Signal { inversion_name(inversion) } else { "none" },
            sigma_bits: sigma.to_bits(),
        };
        let curves = self.curves(metric);
        let vals: Vec<f64> = curves.get(&key)?.iter().filter(|p| p.0 == m).map(|p| p.1).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failure.is_some()).count()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const RESULTS_HEADER: &str =
    "series,inversion,sigma,M,trial,bispectrum_rel_error,signal_rel_error,eta_hat,sigma_hat,failure";

/// Result rows as CSV. Wall times are left out so reruns are byte-identical;
/// they go to a separate timing file.
pub fn results_csv(table: &ResultTable) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &table.rows {
        let failure = r.failure.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.series,
            inversion_name(r.inversion),
            r.sigma,
            r.m,
            r.trial,
            opt(r.bispectrum_rel_error),
            opt(r.signal_rel_error),
            opt(r.eta_hat),
            opt(r.sigma_hat),
            failure
        );
    }
    out
}

fn timings_csv(table: &ResultTable) -> String {
    let mut out = String::from("series,inversion,sigma,M,trial,wall_time\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.series,
            inversion_name(r.inversion),
            r.sigma,
            r.m,
            r.trial,
            r.wall_time
        );
    }
    out
}

/// `(M, mean, standard error)` for one plotted point.
type PointStats = (f64, f64, f64);

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Log-log plot of trial means with standard-error bars and a fitted slope
/// per curve. `None` when there is nothing to plot.
pub fn render_svg(title: &str, y_label: &str, curves: &BTreeMap<CurveKey, Vec<(usize, f64)>>) -> Option<String> {
    let stats: Vec<(&CurveKey, Vec<PointStats>)> = curves
        .iter()
        .map(|(k, pts)| {
            let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &(m, v) in pts {
                if v > 0.0 {
                    by_m.entry(m).or_default().push(v);
                }
            }
            let s = by_m
                .into_iter()
                .map(|(m, v)| {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let se = if v.len() > 1 {
                        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                    } else {
                        0.0
                    };
                    ((m as f64).log2(), mean, se)
                })
                .collect();
            (k, s)
        })
        .filter(|(_, s): &(&CurveKey, Vec<_>)| !s.is_empty())
        .collect();
    if stats.is_empty() {
        return None;
    }
    let (w, h) = (720.0, 480.0);
    let (left, right, top, bottom) = (80.0, 250.0, 40.0, 60.0);
    let xs = stats.iter().flat_map(|(_, s)| s.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let ys = stats
        .iter()
        .flat_map(|(_, s)| s.iter().flat_map(|p| [(p.1 - p.2).max(p.1 * 0.5), p.1 + p.2]))
        .map(f64::log10);
    let (mut y0, mut y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), y| (a.min(y), b.max(y)));
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    let (x0, x1) = if x1 > x0 { (x0 - 0.5, x1 + 0.5) } else { (x0 - 1.0, x0 + 1.0) };
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - right + left) / 2.0, escape(title));
    let (bx0, bx1, by0, by1) = (px(x0), px(x1), py(y0), py(y1));
    let _ = writeln!(s, r#"<rect x="{bx0}" y="{by1}" width="{}" height="{}" fill="none" stroke="black"/>"#, bx1 - bx0, by0 - by1);
    let mut k = x0.ceil() as i64;
    while (k as f64) <= x1 {
        let x = px(k as f64);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{by0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">2^{k}</text>"#, by0 + 5.0, by0 + 20.0);
        k += 1;
    }
    let mut k = y0 as i64;
    while (k as f64) <= y1 {
        let y = py(k as f64);
        let _ = writeln!(s, r##"<line x1="{bx0}" y1="{y}" x2="{bx1}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">1e{k}</text>"##, bx0 - 6.0, y + 4.0);
        k += 1;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">M</text>"#, (bx0 + bx1) / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#, (by0 + by1) / 2.0, (by0 + by1) / 2.0, escape(y_label));
    for (i, (key, pts)) in stats.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1.log10()))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        for &(x, m, se) in pts {
            let (cx, cy) = (px(x), py(m.log10()));
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}"/>"#);
            if se > 0.0 {
                let lo = py((m - se).max(m * 0.5).log10());
                let hi = py((m + se).log10());
                let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="{color}"/>"#);
            }
        }
        let slope = fit_loglog_slope(&curves[*key]).map(|v| format!("{v:.3}")).unwrap_or_else(|_| "n/a".into());
        let ly = top + 18.0 * i as f64 + 10.0;
        let lx = w - right + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{} (slope {slope})</text>"#, lx + 25.0, ly + 4.0, escape(&key.label()));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10">bars: standard error over trials</text>"#,
        w - right + 15.0,
        h - 15.0
    );
    s.push_str("</svg>\n");
    Some(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub results: PathBuf,
    pub timings: PathBuf,
    pub manifest: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `<stem>.csv`, `<stem>.timings.csv`, `<stem>.manifest.txt` and one
/// SVG per metric that has data.
pub fn emit_outputs(table: &ResultTable, out_dir: &Path) -> Result<OutputPaths> {
    let stem = if table.spec.name.is_empty() { "experiment".to_string() } else { table.spec.name.clone() };
    let results = out_dir.join(format!("{stem}.csv"));
    write_text(&results, &results_csv(table))?;
    let timings = out_dir.join(format!("{stem}.timings.csv"));
    write_text(&timings, &timings_csv(table))?;
    let mut plots = Vec::new();
    for (metric, suffix, label) in [
        (Metric::Bispectrum, "bispectrum", "relative bispectrum error"),
        (Metric::Signal, "signal", "aligned relative signal error"),
        (Metric::EtaRelative, "eta", "relative eta error"),
    ] {
        let title = format!("{} {}", table.spec.signal, label);
        if let Some(svg) = render_svg(&title, label, &table.curves(metric)) {
            let p = out_dir.join(format!("{stem}.{suffix}.svg"));
            write_text(&p, &svg)?;
            plots.push(p);
        }
    }
    let manifest = out_dir.join(format!("{stem}.manifest.txt"));
    let spec_toml = toml::to_string(&table.spec).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut text = format!(
        "{} {}\nseed = {}\nrows = {}\nfailed rows = {}\n\n[spec]\n{spec_toml}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        table.spec.seed,
        table.rows.len(),
        table.failures()
    );
    text.push_str("\n[slopes]\n");
    for (metric, name) in [(Metric::Bispectrum, "bispectrum"), (Metric::Signal, "signal")] {
        for (key, pts) in table.curves(metric) {
            if let Ok(v) = fit_loglog_slope(&pts) {
                let _ = writeln!(text, "{name} {} = {v:.4}", key.label());
            }
        }
    }
    write_text(&manifest, &text)?;
    Ok(OutputPaths {
        results,
        timings,
        manifest,
        plots,
    })
}

/// Parses an experiment config file (TOML).
pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ExperimentSpec = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0);
        Error::parse(path, line, e.message().to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

fn powers(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}

pub const PRESET_NAMES: [&str; 18] = [
    "fig2a", "fig2b", "fig2c", "fig2d", "fig3a", "fig3b", "fig3c", "fig3d", "fig6a", "fig6b", "fig6c", "fig6d", "fig7a",
    "fig7b", "fig7c", "fig7d", "noiseless", "zero-dilation",
];

/// Named experiments. In `figNx`, the panel letter a-d picks signal f1-f4
/// and the number the experiment: 2 is oracle bispectrum
/// error, 3 the same with estimated parameters, 6 eta estimation, 7
/// signal recovery. `full` extends `M` to `2^20`.
pub fn preset(name: &str, full: bool) -> Option<ExperimentSpec> {
    let top = if full { 20 } else { 18 };
    let signal_of = |c: char| match c {
        'a' => Some(SignalId::F1),
        'b' => Some(SignalId::F2),
        'c' => Some(SignalId::F3),
        'd' => Some(SignalId::F4),
        _ => None,
    };
    let mut spec = match name {
        "noiseless" => {
            let mut s = ExperimentSpec::new(SignalId::F1, vec![0.0], powers(10, if full { 18 } else { 16 }));
            s.unbias = vec![true];
            s
        }
        "zero-dilation" => {
            let mut s = ExperimentSpec::new(SignalId::F1, vec![0.0], powers(8, 12));
            s.eta = 0.0;
            s.trials = 1;
            s
        }
        _ => {
            let (fig, panel) = name.strip_prefix("fig")?.split_at(1);
            let signal = signal_of(panel.chars().next()?).filter(|_| panel.len() == 1)?;
            let mut s = ExperimentSpec::new(signal, vec![0.5, 1.0], powers(12, top));
            match fig {
                "2" => {}
                "3" => s.modes = vec![ParamMode::Empirical],
                "6" => {
                    s.sigmas = vec![0.5];
                    s.modes = vec![ParamMode::Empirical];
                    s.unbias = vec![true];
                    s.ms = powers(14, top);
                    s.trials = 5;
                }
                "7" => {
                    s.sigmas = vec![0.5];
                    s.inversion = vec![InversionMethod::Aps, InversionMethod::Fm];
                }
                _ => return None,
            }
            s
        }
    };
    spec.name = name.to_string();
    Some(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_slope() {
        let pts: Vec<(usize, f64)> = (4..12).map(|e| (1usize << e, 3.0 * ((1u64 << e) as f64).powf(-0.5))).collect();
        assert!((fit_loglog_slope(&pts).unwrap() + 0.5).abs() < 1e-10);
        let flat: Vec<(usize, f64)> = (4..8).map(|e| (1usize << e, 0.2)).collect();
        assert!(fit_loglog_slope(&flat).unwrap().abs() < 1e-12);
        assert!(matches!(
            fit_loglog_slope(&[(4, 1.0), (8, 0.5), (4, 0.9)]),
            Err(Error::InsufficientPoints(2))
        ));
    }

    #[test]
    fn spec_validation() {
        let g = Grid::standard();
        let mut s = ExperimentSpec::new(SignalId::F1, vec![0.5], vec![16, 8]);
        assert!(s.validate().is_err());
        s.ms = vec![8, 12];
        assert!(s.validate().is_err());
        s.ms = vec![8, 16];
        s.trials = 0;
        assert!(s.validate().is_err());
        s.trials = 1;
        assert!(s.validate().is_ok());
        assert_eq!(s.lattice(&g).unwrap(), g.default_lattice());
    }

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let s = preset(name, false).unwrap_or_else(|| panic!("{name}"));
            s.validate().unwrap();
            assert_eq!(s.name, name);
        }
        assert!(preset("fig9a", false).is_none());
        assert!(preset("fig2e", false).is_none());
        assert_eq!(preset("fig2a", true).unwrap().ms.last(), Some(&(1 << 20)));
    }

    #[test]
    fn config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = preset("fig7b", false).unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(load_config(&path).unwrap(), spec);
        std::fs::write(&path, "signal = \"f1\"\nsigmas = [0.5]\nms = [4, 8, 16]\nbogus = 1\n").unwrap();
        assert!(matches!(load_config(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn degenerate_model_is_exact() {
        let g = Grid::standard();
        let mut spec = preset("zero-dilation", false).unwrap();
        spec.ms = vec![16, 32, 64];
        let t = run_experiment(&spec, &g).unwrap();
        assert_eq!(t.failures(), 0);
        for r in &t.rows {
            assert!(r.bispectrum_rel_error.unwrap() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn empty_table_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let t = ResultTable {
            spec: ExperimentSpec::new(SignalId::F1, vec![0.5], vec![8, 16, 32]),
            rows: vec![],
        };
        let out = emit_outputs(&t, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&out.results).unwrap(), format!("{RESULTS_HEADER}\n"));
        assert!(out.plots.is_empty());
    }
}
