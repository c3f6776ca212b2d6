//! Brute-force reference computations for tests.
//!
//! Nothing here reuses the estimator's transform, interpolation or
//! differentiation code: transforms are direct sums, derivatives are
//! analytic, and the dilation inverse is a Neumann series with its own
//! interpolation routine.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::grid::{Grid, Lattice};
use crate::signal_model::{sample_hidden, DilationConstants, ModelParams};
use crate::spectra::{BispectrumField, Spectrum};

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `F(nu)` and `F'(nu)` of the sampled hidden signal by direct Riemann sums.
fn transform_with_derivative(samples: &[f64], grid: &Grid, nus: &[f64]) -> Vec<(Complex64, Complex64)> {
    let dx = grid.dx();
    let support: Vec<(f64, f64)> = grid
        .x()
        .iter()
        .zip(samples)
        .filter(|(_, v)| **v != 0.0)
        .map(|(&x, &v)| (x, v))
        .collect();
    nus.iter()
        .map(|&nu| {
            let mut f = Complex64::new(0.0, 0.0);
            let mut d = Complex64::new(0.0, 0.0);
            for &(x, v) in &support {
                let (s, c) = (nu * x).sin_cos();
                let e = Complex64::new(c, -s) * (v * dx);
                f += e;
                d += e * Complex64::new(0.0, -x);
            }
            (f, d)
        })
        .collect()
}

/// Bispectrum and Euler-derivative contributions at scale `s`:
/// `s^3 Bf(s omega)` and `s^3 (nu . grad Bf)(nu)` at `nu = s omega`, for
/// lattice frequencies scaled by `pre` (so `omega = pre * m * step`).
fn scaled_terms(samples: &[f64], grid: &Grid, lattice: &Lattice, s: f64, pre: f64) -> (Vec<Complex64>, Vec<Complex64>) {
    let h = lattice.half() as i64;
    let n = lattice.len();
    let nus: Vec<f64> = (-2 * h..=2 * h).map(|m| s * pre * lattice.freq(m)).collect();
    let fd = transform_with_derivative(samples, grid, &nus);
    let at = |m: i64| fd[(m + 2 * h) as usize];
    let s3 = s * s * s;
    let mut b = vec![Complex64::new(0.0, 0.0); n * n];
    let mut e = vec![Complex64::new(0.0, 0.0); n * n];
    for i1 in 0..n {
        let m1 = i1 as i64 - h;
        let (f1, d1) = at(m1);
        let nu1 = nus[(m1 + 2 * h) as usize];
        for i2 in 0..n {
            let m2 = i2 as i64 - h;
            if !lattice.pair_valid(m1, m2) {
                continue;
            }
            let (f2, d2) = at(m2);
            let (f3, d3) = at(m2 - m1);
            let nu2 = nus[(m2 + 2 * h) as usize];
            let nu3 = nus[(m2 - m1 + 2 * h) as usize];
            let f2c = f2.conj();
            b[i1 * n + i2] = f1 * f2c * f3 * s3;
            e[i1 * n + i2] = (d1 * f2c * f3 * nu1 + f1 * d2.conj() * f3 * nu2 + f1 * f2c * d3 * nu3) * s3;
        }
    }
    (b, e)
}

fn to_field(lattice: Lattice, values: Vec<Complex64>) -> BispectrumField {
    let mut out = BispectrumField::zeros(lattice);
    for (o, (v, &m)) in out.values.iter_mut().zip(values.iter().zip(&BispectrumField::zeros(lattice).mask)) {
        if m {
            *o = *v;
        }
    }
    out
}

/// `E_tau[(1-tau)^3 Bf((1-tau) omega)]` and the matching data term
/// `E_tau[(1-tau)^3 (4 Bf + nu . grad Bf)((1-tau) omega)]`, by Gauss-Legendre
/// quadrature over the uniform law on `[-sqrt(3) eta, sqrt(3) eta]`.
/// Frequencies are the lattice frequencies times `pre`.
fn quadrature_terms(
    params: &ModelParams,
    eta: f64,
    grid: &Grid,
    lattice: &Lattice,
    nodes: usize,
    pre: f64,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let samples = sample_hidden(params, grid).values;
    let a = 3f64.sqrt() * eta;
    let (t, w) = if a == 0.0 { (vec![0.0], vec![2.0]) } else { gauss_legendre(nodes) };
    let size = lattice.len() * lattice.len();
    let mut g = vec![Complex64::new(0.0, 0.0); size];
    let mut d = vec![Complex64::new(0.0, 0.0); size];
    let block = 16;
    for chunk in t.chunks(block).zip(w.chunks(block)).collect::<Vec<_>>() {
        let parts: Vec<(Vec<Complex64>, Vec<Complex64>, f64)> = chunk
            .0
            .par_iter()
            .zip(chunk.1)
            .map(|(&ti, &wi)| {
                let (b, e) = scaled_terms(&samples, grid, lattice, 1.0 - a * ti, pre);
                (b, e, wi / 2.0)
            })
            .collect();
        for (b, e, wi) in parts {
            for k in 0..size {
                g[k] += b[k] * wi;
                d[k] += (b[k] * 4.0 + e[k]) * wi;
            }
        }
    }
    (g, d)
}

/// Expected bispectrum `g_eta` of a dilated observation, by quadrature.
pub fn quadrature_g_eta(params: &ModelParams, eta: f64, grid: &Grid, lattice: &Lattice, nodes: usize) -> BispectrumField {
    to_field(*lattice, quadrature_terms(params, eta, grid, lattice, nodes, 1.0).0)
}

/// Bispectrum of the sampled hidden signal by direct sums.
pub fn hidden_bispectrum(params: &ModelParams, grid: &Grid, lattice: &Lattice) -> BispectrumField {
    let samples = sample_hidden(params, grid).values;
    to_field(*lattice, scaled_terms(&samples, grid, lattice, 1.0, 1.0).0)
}

/// Exact right-hand side `C1 L_C2 (4 g_eta + omega . grad g_eta)`, with the
/// data term evaluated directly at `C2 omega` and the Euler derivative taken
/// analytically.
pub fn exact_rhs(params: &ModelParams, eta: f64, grid: &Grid, lattice: &Lattice, nodes: usize) -> BispectrumField {
    let c = DilationConstants::from_eta(eta);
    let (_, d) = quadrature_terms(params, eta, grid, lattice, nodes, c.c2);
    let scale = c.c1 * c.c2.powi(4);
    to_field(*lattice, d.into_iter().map(|v| v * scale).collect())
}

/// Bilinear sample at fractional lattice coordinates; outside reads as 0.
fn bilinear(values: &[Complex64], n: usize, h: f64, u1: f64, u2: f64) -> Complex64 {
    let p1 = u1 + h;
    let p2 = u2 + h;
    let last = (n - 1) as f64;
    if !(0.0..=last).contains(&p1) || !(0.0..=last).contains(&p2) {
        return Complex64::new(0.0, 0.0);
    }
    let a0 = (p1.floor() as usize).min(n - 1);
    let b0 = (p2.floor() as usize).min(n - 1);
    let a1 = (a0 + 1).min(n - 1);
    let b1 = (b0 + 1).min(n - 1);
    let s = p1 - a0 as f64;
    let t = p2 - b0 as f64;
    values[a0 * n + b0] * ((1.0 - s) * (1.0 - t))
        + values[a1 * n + b0] * (s * (1.0 - t))
        + values[a0 * n + b1] * ((1.0 - s) * t)
        + values[a1 * n + b1] * (s * t)
}

/// `sum_{k <= kmax} L_C0^k field`, stopping once a term's norm drops below
/// `tol ||field||`.
pub fn neumann_inverse(field: &BispectrumField, c0: f64, degree: i32, kmax: usize, tol: f64) -> BispectrumField {
    let lat = field.lattice;
    let n = lat.len();
    let h = lat.half() as f64;
    let scale = c0.powi(degree);
    let base = field.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let mut term = field.values.clone();
    let mut total = field.values.clone();
    for _ in 0..kmax {
        let mut next = vec![Complex64::new(0.0, 0.0); n * n];
        for i1 in 0..n {
            for i2 in 0..n {
                if field.mask[i1 * n + i2] {
                    let u1 = c0 * (i1 as f64 - h);
                    let u2 = c0 * (i2 as f64 - h);
                    next[i1 * n + i2] = bilinear(&term, n, h, u1, u2) * scale;
                }
            }
        }
        term = next;
        let tn = term.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for (t, v) in total.iter_mut().zip(&term) {
            *t += v;
        }
        if tn < tol * base {
            break;
        }
    }
    BispectrumField {
        lattice: lat,
        values: total,
        mask: field.mask.clone(),
    }
}

/// Closed forms for `f(x) = exp(-a x^2)`: `f^(w) = sqrt(pi/a) exp(-w^2 / 4a)`,
/// its power spectrum and its bispectrum
/// `(pi/a)^{3/2} exp(-(w1^2 + w2^2 + (w2-w1)^2) / 4a)`.
pub fn gaussian_reference_spectra(a: f64, grid: &Grid, lattice: &Lattice) -> (Spectrum, Vec<f64>, BispectrumField) {
    let ft = |w: f64| (PI / a).sqrt() * (-w * w / (4.0 * a)).exp();
    let spectrum = Spectrum {
        values: grid.omega().iter().map(|&w| Complex64::new(ft(w), 0.0)).collect(),
    };
    let power = grid.omega().iter().map(|&w| ft(w).powi(2)).collect();
    let b = BispectrumField::from_fn(*lattice, |w1, w2| {
        let q = w1 * w1 + w2 * w2 + (w2 - w1) * (w2 - w1);
        Complex64::new((PI / a).powf(1.5) * (-q / (4.0 * a)).exp(), 0.0)
    });
    (spectrum, power, b)
}

/// Power-spectrum quadratures: `E_tau[(1-tau)^2 Pf((1-tau) omega)]` at the
/// grid frequencies, and the exact power right-hand side
/// `C1 L_C2 (3 q + omega q')`.
pub fn quadrature_power(params: &ModelParams, eta: f64, grid: &Grid, nodes: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let samples = sample_hidden(params, grid).values;
    let a = 3f64.sqrt() * eta;
    let c = DilationConstants::from_eta(eta);
    let (t, w) = if a == 0.0 { (vec![0.0], vec![2.0]) } else { gauss_legendre(nodes) };
    let omegas = grid.omega();
    let mut q = vec![0.0; omegas.len()];
    let mut rhs = vec![0.0; omegas.len()];
    let exact: Vec<f64> = transform_with_derivative(&samples, grid, omegas)
        .iter()
        .map(|(f, _)| f.norm_sqr())
        .collect();
    for (&ti, &wi) in t.iter().zip(&w) {
        let s = 1.0 - a * ti;
        let nus: Vec<f64> = omegas.iter().map(|w| s * w).collect();
        let nus2: Vec<f64> = omegas.iter().map(|w| s * c.c2 * w).collect();
        let fd = transform_with_derivative(&samples, grid, &nus);
        let fd2 = transform_with_derivative(&samples, grid, &nus2);
        for i in 0..omegas.len() {
            let (f, _) = fd[i];
            q[i] += wi / 2.0 * s * s * f.norm_sqr();
            // 3 P(nu) + nu P'(nu), P = |F|^2, at nu = s C2 omega, times s^2.
            let (f2, d2) = fd2[i];
            let p = f2.norm_sqr();
            let dp = 2.0 * (f2.conj() * d2).re;
            rhs[i] += wi / 2.0 * s * s * (3.0 * p + nus2[i] * dp);
        }
    }
    let scale = c.c1 * c.c2.powi(3);
    (q, rhs.into_iter().map(|v| v * scale).collect(), exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{SignalId, ETA_MAX};

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(64);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((i - 2.0 / 11.0).abs() < 1e-13);
        let (x, w) = gauss_legendre(5);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((i - 2.0 * 1f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_eta_matches_hidden() {
        let g = Grid::standard();
        let lat = Lattice::new(&g, 16, 16).unwrap();
        let p = ModelParams::new(SignalId::F1, &g, 0.0, 0.0).unwrap();
        let b = hidden_bispectrum(&p, &g, &lat);
        let q = quadrature_g_eta(&p, 1e-6, &g, &lat, 64);
        assert!(q.relative_error_on(&b, &b.mask).unwrap() < 1e-4);
    }

    #[test]
    fn gaussian_reference_values() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        let (s, p, b) = gaussian_reference_spectra(1.0, &g, &lat);
        let k0 = g.k_max();
        assert!((s.values[k0].re - PI.sqrt()).abs() < 1e-15);
        assert!((b.get(0, 0).re - PI.powf(1.5)).abs() < 1e-12);
        assert!((p[k0 + 10] - PI * (-(10.0 * g.d_omega()).powi(2) / 2.0).exp()).abs() < 1e-14);
    }

    #[test]
    fn neumann_geometric_on_constants() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        let ones = BispectrumField::from_fn(lat, |_, _| Complex64::new(1.0, 0.0));
        let out = neumann_inverse(&ones, 1.0 / 3.0, 4, 30, 1e-14);
        let expect = 1.0 / (1.0 - (1.0f64 / 3.0).powi(4));
        assert!((out.get(0, 0).re - expect).abs() < 1e-12);
        let _ = ETA_MAX;
    }
}
