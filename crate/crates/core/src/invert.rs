//! From a bispectrum and a power spectrum back to a signal.
//!
//! Phases come from the bispectrum relation
//! `arg B(w1, w2) = theta(w1) - theta(w2) + theta(w2 - w1)`, either marched
//! outward from the first frequency or found by a fixed-point iteration on
//! unit-modulus variables. Magnitudes come from the power spectrum. Both
//! live on the nonnegative half of a lattice; negative frequencies follow by
//! conjugate symmetry.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Lattice};
use crate::signal_model::Signal;
use crate::spectra::{BispectrumField, DftPlan, Spectrum};

/// Bispectrum entries below this fraction of the largest modulus carry no
/// usable phase.
pub const MODULUS_FLOOR: f64 = 1e-12;

/// Phases `theta(m)` for lattice nodes `m = 0..=half`. The gauge fixes
/// `theta(1) = 0`, which removes the translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector {
    pub lattice: Lattice,
    pub phases: Vec<f64>,
}

impl PhaseVector {
    pub fn zeros(lattice: Lattice) -> Self {
        Self {
            lattice,
            phases: vec![0.0; lattice.half() + 1],
        }
    }

    /// Phases of the given spectrum at the nonnegative lattice nodes, without
    /// any gauge fixing.
    pub fn from_spectrum(spectrum: &Spectrum, lattice: Lattice) -> Self {
        let phases = (0..=lattice.half() as i64)
            .map(|m| spectrum.at(lattice.grid_k(m)).arg())
            .collect();
        Self { lattice, phases }
    }

    fn unit(&self, m: i64) -> Complex64 {
        let z = Complex64::from_polar(1.0, self.phases[m.unsigned_abs() as usize]);
        if m < 0 {
            z.conj()
        } else {
            z
        }
    }
}

/// `sqrt(max(p, 0))`, entrywise.
pub fn magnitudes_from_power(power: &[f64]) -> Vec<f64> {
    power.iter().map(|p| p.max(0.0).sqrt()).collect()
}

/// Samples a grid-indexed vector (length `2K + 1`) at the nonnegative
/// lattice nodes.
pub fn sample_nonnegative(values: &[f64], lattice: &Lattice) -> Result<Vec<f64>> {
    let (k_max, _) = lattice.grid_params();
    if values.len() != 2 * k_max + 1 {
        return Err(Error::InvalidParameter(format!(
            "expected {} grid values, got {}",
            2 * k_max + 1,
            values.len()
        )));
    }
    Ok((0..=lattice.half() as i64)
        .map(|m| values[(lattice.grid_k(m) + k_max as i64) as usize])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarchReport {
    pub phases: PhaseVector,
    /// First node whose bispectrum entry fell below the floor; phases from
    /// there on are zero.
    pub halted_at: Option<usize>,
}

/// Frequency marching along the row `w1 = first positive frequency`.
pub fn frequency_marching(b: &BispectrumField) -> Result<MarchReport> {
    let lattice = b.lattice;
    let h = lattice.half();
    let floor = MODULUS_FLOOR * b.max_abs();
    if b.max_abs() == 0.0 || (1..=h as i64).all(|k| b.get(1, k).norm() <= floor) {
        return Err(Error::DegenerateBispectrum(
            "no entry above the modulus floor on the first-frequency row".into(),
        ));
    }
    let mut phases = PhaseVector::zeros(lattice);
    let b00 = b.get(0, 0);
    if b00.norm() > floor && b00.re < 0.0 {
        phases.phases[0] = PI;
    }
    let mut halted_at = None;
    for k in 2..=h {
        let entry = b.get(1, k as i64);
        if entry.norm() <= floor {
            log::warn!("frequency marching halted at lattice node {k}: bispectrum entry below floor");
            halted_at = Some(k);
            break;
        }
        phases.phases[k] = wrap(phases.phases[1] + phases.phases[k - 1] - entry.arg());
    }
    Ok(MarchReport { phases, halted_at })
}

/// How bispectrum entries weight each phase constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApsWeighting {
    /// `B / |B|`: every constraint counts equally.
    #[default]
    Unit,
    /// `B` itself. Under noise the plain iteration tends to oscillate with
    /// this weighting.
    Modulus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApsConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub weighting: ApsWeighting,
}

impl Default for ApsConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100,
            weighting: ApsWeighting::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApsReport {
    pub phases: PhaseVector,
    pub iterations: usize,
    /// Largest phase change in the last iteration, radians.
    pub residual: f64,
    pub converged: bool,
}

/// Iterative phase synchronization. Every iteration replaces each
/// `z(k)` by the normalized consensus `sum_l conj(W(l, k)) z(l) z(k - l)`
/// over all valid triples, then re-fixes the gauge.
pub fn phase_synchronization_report(b: &BispectrumField, init: &PhaseVector, cfg: &ApsConfig) -> Result<ApsReport> {
    let lattice = b.lattice;
    if init.lattice != lattice {
        return Err(Error::LatticeMismatch);
    }
    let h = lattice.half() as i64;
    let floor = MODULUS_FLOOR * b.max_abs();
    if b.max_abs() == 0.0 {
        return Err(Error::DegenerateBispectrum("all entries are zero".into()));
    }
    let weight = |v: Complex64| -> Option<Complex64> {
        let r = v.norm();
        if r <= floor {
            return None;
        }
        Some(match cfg.weighting {
            ApsWeighting::Unit => v.conj() / r,
            ApsWeighting::Modulus => v.conj(),
        })
    };
    let mut current = gauge_fixed(init.clone());
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let next: Vec<f64> = (0..=h)
            .into_par_iter()
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in (k - h).max(-h)..=(k + h).min(h) {
                    if !lattice.pair_valid(l, k) {
                        continue;
                    }
                    if let Some(w) = weight(b.get(l, k)) {
                        acc += w * current.unit(l) * current.unit(k - l);
                    }
                }
                if k == 0 {
                    if acc.re < 0.0 {
                        PI
                    } else {
                        0.0
                    }
                } else if acc.norm() > 0.0 {
                    acc.arg()
                } else {
                    current.phases[k as usize]
                }
            })
            .collect();
        let next = gauge_fixed(PhaseVector { lattice, phases: next });
        residual = next
            .phases
            .iter()
            .zip(&current.phases)
            .map(|(a, b)| wrap(a - b).abs())
            .fold(0.0, f64::max);
        current = next;
        iterations += 1;
        if residual < cfg.tol {
            break;
        }
    }
    Ok(ApsReport {
        phases: current,
        iterations,
        residual,
        converged: residual < cfg.tol,
    })
}

pub fn phase_synchronization(b: &BispectrumField, init: &PhaseVector, cfg: &ApsConfig) -> Result<PhaseVector> {
    let report = phase_synchronization_report(b, init, cfg)?;
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    Ok(report.phases)
}

/// Removes the linear phase ramp so that `theta(1) = 0`, and snaps
/// `theta(0)` to `0` or `pi`.
fn gauge_fixed(mut p: PhaseVector) -> PhaseVector {
    let slope = p.phases.get(1).copied().unwrap_or(0.0);
    for (m, t) in p.phases.iter_mut().enumerate() {
        *t = wrap(*t - slope * m as f64);
    }
    p.phases[0] = if p.phases[0].cos() < 0.0 { PI } else { 0.0 };
    p
}

fn wrap(t: f64) -> f64 {
    let r = (t + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Inverse transform of `mags * e^{i theta}` over the lattice band.
///
/// A lattice with stride `s` samples the spectrum of a signal that repeats
/// every `2N / s`, so the band is inverted as a periodic signal and then
/// rotated so its energy centroid sits at the origin before being read out
/// on the grid.
pub fn assemble_signal(mags: &[f64], phases: &PhaseVector, grid: &Grid) -> Result<Signal> {
    let lattice = phases.lattice;
    let h = lattice.half();
    if mags.len() != h + 1 {
        return Err(Error::InvalidParameter(format!(
            "expected {} magnitudes, got {}",
            h + 1,
            mags.len()
        )));
    }
    let two_k = 2 * grid.k_max();
    if !two_k.is_multiple_of(lattice.stride()) {
        return Err(Error::InvalidParameter("lattice stride must divide 2K".into()));
    }
    let len = two_k / lattice.stride();
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for m in -(h as i64)..=h as i64 {
        let v = mags[m.unsigned_abs() as usize] * phases.unit(m);
        let weight = if 2 * m.unsigned_abs() as usize == len { 0.5 } else { 1.0 };
        buf[m.rem_euclid(len as i64) as usize] += v * weight;
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    let period = 2.0 * grid.n() as f64 / lattice.stride() as f64;
    let values: Vec<f64> = buf.iter().map(|v| v.re / period).collect();
    let energy: f64 = values.iter().map(|v| v * v).sum();
    let imag: f64 = buf.iter().map(|v| (v.im / period).powi(2)).sum();
    if energy > 0.0 && imag > 1e-16 * energy {
        log::debug!("assembled signal has relative imaginary residue {:e}", (imag / energy).sqrt());
    }
    let centroid = values
        .iter()
        .enumerate()
        .map(|(j, v)| v * v * Complex64::from_polar(1.0, 2.0 * PI * j as f64 / len as f64))
        .sum::<Complex64>();
    let center = if centroid.norm() > 0.0 {
        (centroid.arg() * len as f64 / (2.0 * PI)).round() as i64
    } else {
        0
    };
    let n_x = grid.x().len() as i64;
    let mid = (n_x - 1) / 2;
    let out = (0..n_x)
        .map(|i| values[(center + i - mid).rem_euclid(len as i64) as usize])
        .collect();
    Signal::new(grid, out)
}

/// `min_t ||f - g(. - t)|| / ||f||`: integer shifts by cross-correlation,
/// then a golden-section refinement over one grid step either side using
/// spectral shifts.
pub fn aligned_relative_error(reference: &Signal, estimate: &Signal, grid: &Grid) -> Result<f64> {
    let ref_norm = reference.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    if estimate.values.len() != reference.values.len() {
        return Err(Error::InvalidParameter("signals sampled on different grids".into()));
    }
    let plan = DftPlan::new(grid);
    let f = plan.forward(&reference.values);
    let g = plan.forward(&estimate.values);
    let cross = Spectrum {
        values: f.values.iter().zip(&g.values).map(|(a, b)| a * b.conj()).collect(),
    };
    let corr = plan.inverse(&cross);
    let best = (0..corr.len()).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap();
    let t0 = grid.x()[best];
    let omega = grid.omega();
    let err = |t: f64| -> f64 {
        let shifted = Spectrum {
            values: g
                .values
                .iter()
                .zip(omega)
                .map(|(v, &w)| v * Complex64::from_polar(1.0, -w * t))
                .collect(),
        };
        let s = plan.inverse(&shifted);
        reference
            .values
            .iter()
            .zip(&s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (t0 - grid.dx(), t0 + grid.dx());
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (err(x1), err(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = err(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = err(x2);
        }
    }
    let direct: f64 = reference
        .values
        .iter()
        .zip(&estimate.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(f1.min(f2).min(err(t0)).min(direct) / ref_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMethod {
    #[default]
    Aps,
    Fm,
}

impl std::str::FromStr for InversionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aps" => Ok(InversionMethod::Aps),
            "fm" => Ok(InversionMethod::Fm),
            other => Err(Error::InvalidParameter(format!("unknown inversion method {other:?}"))),
        }
    }
}

/// Phases by the chosen method (APS starts from frequency marching and
/// keeps its last iterate if it does not reach tolerance), magnitudes from
/// the power spectrum, assembled into a signal.
pub fn invert(b: &BispectrumField, power: &[f64], grid: &Grid, method: InversionMethod, cfg: &ApsConfig) -> Result<Signal> {
    let fm = frequency_marching(b)?;
    let phases = match method {
        InversionMethod::Fm => fm.phases,
        InversionMethod::Aps => {
            let report = phase_synchronization_report(b, &fm.phases, cfg)?;
            if !report.converged {
                log::info!(
                    "phase synchronization stopped after {} iterations, residual {:e}",
                    report.iterations,
                    report.residual
                );
            }
            report.phases
        }
    };
    let mags = sample_nonnegative(&magnitudes_from_power(power), &b.lattice)?;
    assemble_signal(&mags, &phases, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{sample_hidden, ModelParams, SignalId, ETA_MAX};
    use crate::spectra::{bispectrum, dft, power_spectrum};

    fn exact(id: SignalId, g: &Grid, lattice: Lattice) -> (Signal, BispectrumField, Vec<f64>) {
        let p = ModelParams::new(id, g, 0.0, ETA_MAX).unwrap();
        let f = sample_hidden(&p, g);
        let s = dft(&f.values, g);
        (f, bispectrum(&s, &lattice), power_spectrum(&s))
    }

    #[test]
    fn magnitudes_clamp_negatives() {
        assert_eq!(magnitudes_from_power(&[4.0, -1e-3, 0.0]), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn even_positive_spectrum_has_zero_phases() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        let f: Vec<f64> = g.x().iter().map(|x| (-x * x).exp()).collect();
        let b = bispectrum(&dft(&f, &g), &lat);
        let r = frequency_marching(&b).unwrap();
        assert!(r.phases.phases.iter().all(|t| t.abs() < 1e-9));
    }

    #[test]
    fn marching_round_trip_on_full_lattice() {
        let g = Grid::standard();
        let lat = g.full_lattice();
        for id in [SignalId::F1, SignalId::F2] {
            let (f, b, p) = exact(id, &g, lat);
            let est = invert(&b, &p, &g, InversionMethod::Fm, &ApsConfig::default()).unwrap();
            let e = aligned_relative_error(&f, &est, &g).unwrap();
            assert!(e < 1e-6, "{id}: {e:e}");
        }
    }

    #[test]
    fn aps_from_zeros_round_trip() {
        let g = Grid::standard();
        let lat = g.full_lattice();
        let (f, b, p) = exact(SignalId::F2, &g, lat);
        let cfg = ApsConfig {
            max_iters: 500,
            ..ApsConfig::default()
        };
        let r = phase_synchronization_report(&b, &PhaseVector::zeros(lat), &cfg).unwrap();
        let mags = sample_nonnegative(&magnitudes_from_power(&p), &lat).unwrap();
        let est = assemble_signal(&mags, &r.phases, &g).unwrap();
        let e = aligned_relative_error(&f, &est, &g).unwrap();
        assert!(e < 1e-6, "{e:e} after {} iterations", r.iterations);
    }

    #[test]
    fn aps_truth_is_a_fixed_point() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        let p = ModelParams::new(SignalId::F1, &g, 0.0, ETA_MAX).unwrap();
        let s = dft(&sample_hidden(&p, &g).values, &g);
        let b = bispectrum(&s, &lat);
        let truth = PhaseVector::from_spectrum(&s, lat);
        let r = phase_synchronization_report(&b, &truth, &ApsConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2, "{}", r.iterations);
    }

    #[test]
    fn assemble_reproduces_the_samples() {
        let g = Grid::standard();
        let lat = g.full_lattice();
        let p = ModelParams::new(SignalId::F1, &g, 0.0, ETA_MAX).unwrap();
        let f = sample_hidden(&p, &g);
        let s = dft(&f.values, &g);
        let mags = sample_nonnegative(&magnitudes_from_power(&power_spectrum(&s)), &lat).unwrap();
        let out = assemble_signal(&mags, &PhaseVector::from_spectrum(&s, lat), &g).unwrap();
        let scale = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in f.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn assemble_zero_and_ramp() {
        let g = Grid::standard();
        let lat = g.full_lattice();
        let z = assemble_signal(&vec![0.0; lat.half() + 1], &PhaseVector::zeros(lat), &g).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));

        let p = ModelParams::new(SignalId::F2, &g, 0.0, ETA_MAX).unwrap();
        let f = sample_hidden(&p, &g);
        let s = dft(&f.values, &g);
        let mags = sample_nonnegative(&magnitudes_from_power(&power_spectrum(&s)), &lat).unwrap();
        let mut ramp = PhaseVector::from_spectrum(&s, lat);
        for (m, t) in ramp.phases.iter_mut().enumerate() {
            *t -= lat.freq(m as i64) * 1.7;
        }
        let out = assemble_signal(&mags, &ramp, &g).unwrap();
        assert!(aligned_relative_error(&f, &out, &g).unwrap() < 1e-8);
    }

    #[test]
    fn alignment_removes_subgrid_shift() {
        let g = Grid::standard();
        let p = ModelParams::new(SignalId::F1, &g, 0.0, ETA_MAX).unwrap();
        let f = sample_hidden(&p, &g);
        assert_eq!(aligned_relative_error(&f, &f, &g).unwrap(), 0.0);
        let shifted = Signal::new(&g, g.x().iter().map(|&x| p.hidden_value(&g, x - 0.3)).collect()).unwrap();
        let e = aligned_relative_error(&f, &shifted, &g).unwrap();
        assert!(e < 1e-6, "{e:e}");
    }

    #[test]
    fn zero_reference_is_an_error() {
        let g = Grid::standard();
        let z = Signal::zeros(&g);
        assert!(matches!(aligned_relative_error(&z, &z, &g), Err(Error::ZeroReference)));
    }

    #[test]
    fn degenerate_bispectrum_is_reported() {
        let g = Grid::standard();
        let b = BispectrumField::zeros(g.default_lattice());
        assert!(matches!(frequency_marching(&b), Err(Error::DegenerateBispectrum(_))));
    }
}
