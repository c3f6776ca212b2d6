//! Additive-noise centering and the dilation-unbiasing solve.
//!
//! With `C0, C1, C2` from [`DilationConstants`], the hidden bispectrum solves
//! `(I - L_C0) Bf = C1 L_C2 (4 g + omega . grad g)` where `g` is the mean
//! bispectrum of the dilated observations. The right-hand side is built from
//! smoothed data; the left-hand operator is inverted by conjugate gradients
//! on the normal equations, restricted to a disc `Omega` of frequency pairs.
//! Power spectra follow the same pattern with exponent 3 and coefficient 3.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Lattice};
use crate::moments::RawMoments;
use crate::signal_model::{DilationConstants, NoiseConvention, ETA_MAX};
use crate::spectra::{dilate_transpose_values, dilate_values, line, smoothed_data_term, BispectrumField, Spectrum};

/// Solver settings. `smoothing_width = None` picks the default rule from
/// the noise level and batch size, see [`default_smoothing_width`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    pub smoothing_width: Option<f64>,
    /// Radius of `Omega`; `None` uses the lattice half-width.
    pub omega_radius: Option<f64>,
    pub power_max_iters: usize,
    pub power_tol: f64,
    #[serde(default)]
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            residual_tol: 1e-8,
            smoothing_width: None,
            omega_radius: None,
            power_max_iters: 20_000,
            power_tol: 1e-10,
            verbose: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("residual_tol and max_iters must be positive".into()));
        }
        if let Some(l) = self.smoothing_width {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!("smoothing width {l}")));
            }
        }
        Ok(())
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.smoothing_width = Some(width);
        self
    }

    fn width(&self, grid_dx: f64) -> f64 {
        self.smoothing_width.unwrap_or(grid_dx)
    }
}

/// `L = 5 sigma M^{-1/6}` for noisy data, `dx` without noise.
pub fn default_smoothing_width(sigma: f64, m: usize, grid: &Grid) -> f64 {
    if sigma > 0.0 {
        5.0 * sigma * (m as f64).powf(-1.0 / 6.0)
    } else {
        grid.dx()
    }
}

/// `Omega`: valid lattice pairs inside the disc of the given radius.
pub fn omega_domain(lattice: &Lattice, radius: Option<f64>) -> Vec<bool> {
    let r = radius.unwrap_or_else(|| lattice.omega_max());
    let r2 = r * r * (1.0 + 1e-12);
    let template = BispectrumField::zeros(*lattice);
    let freqs = lattice.frequencies();
    let n = lattice.len();
    (0..n * n)
        .map(|i| {
            let (a, b) = (freqs[i / n], freqs[i % n]);
            template.mask[i] && a * a + b * b <= r2
        })
        .collect()
}

/// Noise cross-spectrum `E[eps(w1) conj(eps(w2))] = h(w1 - w2)` for per-node
/// variance `v`: `h(w) = v dx^2 sum_j cos(w x_j)`.
pub fn noise_kernel(omega: f64, node_variance: f64, grid: &Grid) -> f64 {
    if node_variance == 0.0 {
        return 0.0;
    }
    let dx = grid.dx();
    let nodes = grid.x().len() as f64;
    let theta = omega * dx / 2.0;
    let s = theta.sin();
    let dirichlet = if s.abs() > 1e-6 {
        (nodes * theta).sin() / s
    } else {
        grid.x().iter().map(|x| (omega * x).cos()).sum()
    };
    node_variance * dx * dx * dirichlet
}

/// [`noise_kernel`] under the continuum white-noise convention. On the
/// standard grid `h(0) = sigma^2 (N + dx)`.
pub fn noise_kernel_h(omega: f64, sigma: f64, grid: &Grid) -> f64 {
    noise_kernel(omega, NoiseConvention::Continuum.node_variance(sigma, grid), grid)
}

/// `h` at every grid frequency index `-K..=K`.
pub fn noise_kernel_grid(sigma: f64, noise: NoiseConvention, grid: &Grid) -> Vec<f64> {
    let v = noise.node_variance(sigma, grid);
    grid.omega().iter().map(|&w| noise_kernel(w, v, grid)).collect()
}

/// Subtracts `R(w1, w2) = mu(w1) h(w1) + conj(mu(w2)) h(w2) + mu(w2 - w1) h(w2 - w1)`.
pub fn center_bispectrum(
    mean_bispectrum: &BispectrumField,
    mean_ft: &Spectrum,
    sigma: f64,
    noise: NoiseConvention,
    grid: &Grid,
) -> BispectrumField {
    if sigma == 0.0 {
        return mean_bispectrum.clone();
    }
    let h = noise_kernel_grid(sigma, noise, grid);
    let k_max = grid.k_max() as i64;
    let lat = mean_bispectrum.lattice;
    let hk = |k: i64| h[(k + k_max) as usize];
    let mu = |k: i64| mean_ft.at(k);
    let n = lat.len();
    let mut out = mean_bispectrum.clone();
    for i1 in 0..n {
        let k1 = lat.grid_k(lat.signed(i1));
        for i2 in 0..n {
            let idx = i1 * n + i2;
            if !out.mask[idx] {
                continue;
            }
            let k2 = lat.grid_k(lat.signed(i2));
            let d = k2 - k1;
            out.values[idx] -= mu(k1) * hk(k1) + mu(k2).conj() * hk(k2) + mu(d) * hk(d);
        }
    }
    out
}

/// Subtracts the noise power `h(0)` from every entry.
pub fn center_power(mean_power: &[f64], sigma: f64, noise: NoiseConvention, grid: &Grid) -> Vec<f64> {
    let h0 = noise_kernel(0.0, noise.node_variance(sigma, grid), grid);
    mean_power.iter().map(|p| p - h0).collect()
}

/// Moments with the additive-noise bias removed.
#[derive(Debug, Clone)]
pub struct CenteredMoments {
    pub mean_bispectrum: BispectrumField,
    pub mean_power: Vec<f64>,
    pub mean_ft: Spectrum,
    pub m: usize,
}

impl CenteredMoments {
    pub fn from_raw(raw: &RawMoments, sigma: f64, noise: NoiseConvention, grid: &Grid) -> Self {
        Self {
            mean_bispectrum: center_bispectrum(&raw.mean_bispectrum, &raw.mean_ft, sigma, noise, grid),
            mean_power: center_power(&raw.mean_power, sigma, noise, grid),
            mean_ft: raw.mean_ft.clone(),
            m: raw.count,
        }
    }
}

fn check_eta(eta: f64) -> Result<DilationConstants> {
    if !(eta > 0.0 && eta <= ETA_MAX + 1e-12) {
        return Err(Error::InvalidEta(eta));
    }
    Ok(DilationConstants::from_eta(eta.min(ETA_MAX)))
}

/// Right-hand side `C1 L_C2 d` with `d` the smoothed data term of `centered`.
pub fn assemble_data_term(centered: &BispectrumField, width: f64, eta: f64) -> Result<BispectrumField> {
    let c = DilationConstants::from_eta(eta);
    let d = smoothed_data_term(centered, width)?;
    let values = dilate_values(&d.values, &d.mask, &d.lattice, c.c2, 4);
    Ok(BispectrumField {
        lattice: d.lattice,
        values: values.into_iter().map(|v| v * c.c1).collect(),
        mask: d.mask,
    })
}

/// `(I - L_C0) g` on `domain`, reading `g` only on `domain`.
fn apply_op(g: &[Complex64], domain: &[bool], lattice: &Lattice, c0: f64) -> Vec<Complex64> {
    let l = dilate_values(g, domain, lattice, c0, 4);
    g.iter()
        .zip(l)
        .zip(domain)
        .map(|((a, b), &d)| if d { a - b } else { Complex64::new(0.0, 0.0) })
        .collect()
}

/// Transpose of [`apply_op`].
fn apply_op_t(r: &[Complex64], domain: &[bool], lattice: &Lattice, c0: f64) -> Vec<Complex64> {
    let l = dilate_transpose_values(r, domain, lattice, c0, 4);
    r.iter()
        .zip(l)
        .zip(domain)
        .map(|((a, b), &d)| if d { a - b } else { Complex64::new(0.0, 0.0) })
        .collect()
}

fn norm_sq(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Quadratic loss `sum_Omega |(I - L_C0) g - rhs|^2 dA` and its gradient with
/// respect to the real and imaginary parts of `g` (packed as a complex field).
pub fn loss_and_gradient(
    g_hat: &BispectrumField,
    rhs: &BispectrumField,
    c0: f64,
    domain: &[bool],
) -> Result<(f64, BispectrumField)> {
    if g_hat.lattice != rhs.lattice {
        return Err(Error::LatticeMismatch);
    }
    if !(c0 > 0.0 && c0 < 1.0) {
        return Err(Error::InvalidParameter(format!("C0 = {c0} outside (0, 1)")));
    }
    let lat = g_hat.lattice;
    let area = lat.cell_area();
    let a = apply_op(&g_hat.values, domain, &lat, c0);
    let resid: Vec<Complex64> = a
        .iter()
        .zip(&rhs.values)
        .zip(domain)
        .map(|((x, y), &d)| if d { x - y } else { Complex64::new(0.0, 0.0) })
        .collect();
    let loss = norm_sq(&resid) * area;
    let grad = apply_op_t(&resid, domain, &lat, c0);
    Ok((
        loss,
        BispectrumField {
            lattice: lat,
            values: grad.into_iter().map(|v| v * (2.0 * area)).collect(),
            mask: g_hat.mask.clone(),
        },
    ))
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative normal-equation residual `||A^T (b - A x)|| / ||A^T b||`.
    pub residual: f64,
}

/// Solves `(I - L_C0) g = rhs` on `domain` by CGNR.
pub fn solve_operator(
    rhs: &BispectrumField,
    c0: f64,
    domain: &[bool],
    cfg: &SolverConfig,
) -> Result<(BispectrumField, SolveReport)> {
    cfg.validate()?;
    let lat = rhs.lattice;
    let size = rhs.values.len();
    let b: Vec<Complex64> = rhs
        .values
        .iter()
        .zip(domain)
        .map(|(v, &d)| if d { *v } else { Complex64::new(0.0, 0.0) })
        .collect();
    let mut x = vec![Complex64::new(0.0, 0.0); size];
    let field = |values: Vec<Complex64>| BispectrumField {
        lattice: lat,
        values,
        mask: rhs.mask.clone(),
    };
    let mut z = apply_op_t(&b, domain, &lat, c0);
    let z0 = norm_sq(&z).sqrt();
    if z0 == 0.0 {
        return Ok((field(x), SolveReport { iterations: 0, residual: 0.0 }));
    }
    let mut r = b;
    let mut p = z.clone();
    let mut zz = norm_sq(&z);
    for it in 1..=cfg.max_iters {
        let w = apply_op(&p, domain, &lat, c0);
        let ww = norm_sq(&w);
        if ww == 0.0 {
            break;
        }
        let alpha = zz / ww;
        for i in 0..size {
            x[i] += p[i] * alpha;
            r[i] -= w[i] * alpha;
        }
        z = apply_op_t(&r, domain, &lat, c0);
        let zz_new = norm_sq(&z);
        let residual = zz_new.sqrt() / z0;
        if cfg.verbose {
            eprintln!("cgnr iter {it} residual {residual:.3e}");
        }
        if !residual.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual });
        }
        if residual < cfg.residual_tol {
            return Ok((field(x), SolveReport { iterations: it, residual }));
        }
        let beta = zz_new / zz;
        for i in 0..size {
            p[i] = z[i] + p[i] * beta;
        }
        zz = zz_new;
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        residual: zz.sqrt() / z0,
    })
}

/// Dilation-unbiased bispectrum estimate from a centered mean bispectrum.
pub fn solve_bispectrum(centered: &BispectrumField, eta: f64, cfg: &SolverConfig) -> Result<BispectrumField> {
    solve_bispectrum_report(centered, eta, cfg, None).map(|(f, _)| f)
}

/// [`solve_bispectrum`] with an explicit grid spacing for the default
/// smoothing width and the solver report.
pub fn solve_bispectrum_report(
    centered: &BispectrumField,
    eta: f64,
    cfg: &SolverConfig,
    grid: Option<&Grid>,
) -> Result<(BispectrumField, SolveReport)> {
    let c = check_eta(eta)?;
    cfg.validate()?;
    let lat = centered.lattice;
    let dx = grid.map_or(lat.step() / 64.0, Grid::dx);
    let domain = omega_domain(&lat, cfg.omega_radius);
    let rhs = assemble_data_term(centered, cfg.width(dx), eta)?;
    let (g, report) = solve_operator(&rhs, c.c0, &domain, cfg)?;
    Ok((g.conj_symmetrized().restricted(&domain), report))
}

/// Power-spectrum analogue of [`assemble_data_term`]: `C1 L_C2 (3 q + omega q')`.
pub fn assemble_power_data_term(centered_power: &[f64], step: f64, width: f64, eta: f64) -> Result<Vec<f64>> {
    let c = DilationConstants::from_eta(eta);
    let d = line::smoothed_data_term(centered_power, step, width, 3.0)?;
    Ok(line::dilate(&d, c.c2, 3)?.into_iter().map(|v| v * c.c1).collect())
}

fn power_op(p: &[f64], c0: f64) -> Result<Vec<f64>> {
    Ok(p.iter().zip(line::dilate(p, c0, 3)?).map(|(a, b)| a - b).collect())
}

fn power_op_t(r: &[f64], c0: f64) -> Result<Vec<f64>> {
    Ok(r.iter().zip(line::dilate_transpose(r, c0, 3)?).map(|(a, b)| a - b).collect())
}

/// Nonnegative least-squares solution of `(I - L_C0) p = rhs` and its loss.
#[derive(Debug, Clone)]
pub struct PowerSolution {
    pub power: Vec<f64>,
    /// `sum |(I - L_C0) p - rhs|^2 d_omega`.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Accelerated projected gradient with adaptive restart for
/// `min_{p >= 0} ||(I - L_C0) p - rhs||^2`.
pub fn solve_power_rhs(rhs: &[f64], c0: f64, step: f64, cfg: &SolverConfig, warm: Option<&[f64]>) -> Result<PowerSolution> {
    let n = rhs.len();
    // Lipschitz constant of the gradient from a few power iterations.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut lip = 1.0;
    for _ in 0..30 {
        let w = power_op_t(&power_op(&v, c0)?, c0)?;
        let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        lip = nw / nv;
        v = w.iter().map(|a| a / nw).collect();
    }
    let t = 1.0 / (lip * 1.05);
    let mut x: Vec<f64> = match warm {
        Some(w) if w.len() == n => w.iter().map(|a| a.max(0.0)).collect(),
        _ => vec![0.0; n],
    };
    let mut y = x.clone();
    let mut theta: f64 = 1.0;
    let scale = rhs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    let mut converged = false;
    let mut iterations = cfg.power_max_iters;
    for it in 1..=cfg.power_max_iters {
        let ay = power_op(&y, c0)?;
        let resid: Vec<f64> = ay.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let grad = power_op_t(&resid, c0)?;
        let x_new: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| (a - t * g).max(0.0)).collect();
        let change = x_new.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let theta_new = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        // Restart momentum when it points uphill.
        let uphill: f64 = grad.iter().zip(x_new.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
        if uphill > 0.0 {
            theta = 1.0;
            y = x_new.clone();
        } else {
            let mom = (theta - 1.0) / theta_new;
            y = x_new.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
            theta = theta_new;
        }
        x = x_new;
        if change <= cfg.power_tol * scale {
            converged = true;
            iterations = it;
            break;
        }
    }
    let resid = power_op(&x, c0)?;
    let loss = resid.iter().zip(rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * step;
    if !loss.is_finite() {
        return Err(Error::NonConvergence {
            iterations,
            residual: loss,
        });
    }
    Ok(PowerSolution {
        power: x,
        loss,
        iterations,
        converged,
    })
}

/// Dilation-unbiased, nonnegative power spectrum from a centered mean power
/// spectrum on the full grid.
pub fn solve_power(centered_power: &[f64], eta: f64, grid: &Grid, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let c = check_eta(eta)?;
    cfg.validate()?;
    let step = grid.d_omega();
    let rhs = assemble_power_data_term(centered_power, step, cfg.width(grid.dx()), eta)?;
    let sol = solve_power_rhs(&rhs, c.c0, step, cfg, None)?;
    if !sol.converged {
        return Err(Error::NonConvergence {
            iterations: sol.iterations,
            residual: sol.loss,
        });
    }
    Ok(sol.power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(lat: Lattice, seed: u64) -> BispectrumField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = BispectrumField::zeros(lat);
        for (v, &m) in f.values.iter_mut().zip(&f.mask) {
            if m {
                *v = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        f
    }

    #[test]
    fn kernel_values() {
        let g = Grid::standard();
        assert!((noise_kernel_h(0.0, 1.0, &g) - (32.0 + 1.0 / 16.0)).abs() < 1e-12);
        assert_eq!(noise_kernel_h(1.0, 0.0, &g), 0.0);
        // Even grid indices give |h| = sigma^2 dx, odd ones do not vanish.
        let w2 = 2.0 * g.d_omega();
        assert!((noise_kernel_h(w2, 1.0, &g).abs() - g.dx()).abs() < 1e-9);
        let direct: f64 = g.x().iter().map(|x| (g.d_omega() * x).cos()).sum::<f64>() * g.dx();
        assert!((noise_kernel_h(g.d_omega(), 1.0, &g) - direct).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_centering_is_identity() {
        let g = Grid::new(16, 3).unwrap();
        let lat = g.default_lattice();
        let b = random_field(lat, 1);
        let mu = Spectrum {
            values: vec![Complex64::new(1.0, 2.0); g.omega().len()],
        };
        assert_eq!(center_bispectrum(&b, &mu, 0.0, NoiseConvention::Continuum, &g), b);
        let p = vec![1.0; g.omega().len()];
        assert_eq!(center_power(&p, 0.0, NoiseConvention::Continuum, &g), p);
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        let z = BispectrumField::zeros(lat);
        let out = solve_bispectrum(&z, ETA_MAX, &SolverConfig::default()).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        let (loss, grad) = loss_and_gradient(&z, &z, 1.0 / 3.0, &omega_domain(&lat, None)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
        assert!(solve_bispectrum(&z, 0.0, &SolverConfig::default()).is_err());
        let p = solve_power(&vec![0.0; g.omega().len()], ETA_MAX, &g, &SolverConfig::default()).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Grid::new(16, 3).unwrap();
        let lat = g.default_lattice();
        let domain = omega_domain(&lat, None);
        for seed in 0..3 {
            let x = random_field(lat, seed);
            let rhs = random_field(lat, seed + 100);
            let dir = random_field(lat, seed + 200);
            let (_, grad) = loss_and_gradient(&x, &rhs, 1.0 / 3.0, &domain).unwrap();
            let eps = 1e-4;
            let plus = x.zip_with(&dir, |a, d| a + d * eps).unwrap();
            let minus = x.zip_with(&dir, |a, d| a - d * eps).unwrap();
            let fd = (loss_and_gradient(&plus, &rhs, 1.0 / 3.0, &domain).unwrap().0
                - loss_and_gradient(&minus, &rhs, 1.0 / 3.0, &domain).unwrap().0)
                / (2.0 * eps);
            let an: f64 = grad.values.iter().zip(&dir.values).map(|(a, d)| (a * d.conj()).re).sum();
            assert!((an - fd).abs() / an.abs() < 1e-5, "{an} vs {fd}");
        }
    }

    #[test]
    fn power_solution_is_nonnegative() {
        let g = Grid::new(16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<f64> = (0..g.omega().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = solve_power(&q, 0.2, &g, &SolverConfig::default().with_width(0.2)).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
    }
}
