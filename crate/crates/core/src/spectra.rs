//! Fourier transforms on the grid, power spectra and bispectra, and the
//! operators that act on bispectrum fields: dilation `L_C`, its adjoint and
//! transpose, the Euler radial derivative `omega . grad`, and Gaussian
//! smoothing with derivative-of-Gaussian kernels.
//!
//! The transform is the Riemann sum `S(omega_k) = dx sum_j f(x_j) e^{-i omega_k x_j}`.
//! With `omega_k x_j = -k pi / 2 + 2 pi k j / (2K)` it is a length-`2K` FFT of the
//! zero-padded samples times `dx i^k`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{Grid, Lattice};

const I_POW: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

fn i_pow(k: i64) -> Complex64 {
    I_POW[k.rem_euclid(4) as usize]
}

/// Complex samples on every grid frequency, index `k + K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn k_max(&self) -> usize {
        (self.values.len() - 1) / 2
    }

    pub fn at(&self, k: i64) -> Complex64 {
        self.values[(k + self.k_max() as i64) as usize]
    }
}

/// Reusable forward/inverse transform for one grid.
#[derive(Clone)]
pub struct DftPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k_max: usize,
    n_x: usize,
    dx: f64,
    extent: f64,
}

impl std::fmt::Debug for DftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DftPlan").field("k_max", &self.k_max).finish()
    }
}

impl DftPlan {
    pub fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let len = 2 * grid.k_max();
        Self {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            k_max: grid.k_max(),
            n_x: grid.x().len(),
            dx: grid.dx(),
            extent: grid.extent(),
        }
    }

    /// Scratch length needed by [`DftPlan::forward_into`].
    pub fn buffer_len(&self) -> usize {
        2 * self.k_max
    }

    /// Writes the spectrum of `values` into `out` (length `2K + 1`), using
    /// `buf` (length `2K`) as workspace.
    pub fn forward_into(&self, values: &[f64], buf: &mut [Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(values.len(), self.n_x);
        let len = 2 * self.k_max;
        for (b, &v) in buf.iter_mut().zip(values) {
            *b = Complex64::new(v, 0.0);
        }
        for b in &mut buf[values.len()..len] {
            *b = Complex64::new(0.0, 0.0);
        }
        self.forward.process(&mut buf[..len]);
        let k_max = self.k_max as i64;
        for (i, o) in out.iter_mut().enumerate() {
            let k = i as i64 - k_max;
            *o = buf[k.rem_euclid(2 * k_max) as usize] * i_pow(k) * self.dx;
        }
    }

    pub fn forward(&self, values: &[f64]) -> Spectrum {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.buffer_len()];
        let mut out = vec![Complex64::new(0.0, 0.0); 2 * self.k_max + 1];
        self.forward_into(values, &mut buf, &mut out);
        Spectrum { values: out }
    }

    /// Inverse of [`DftPlan::forward`]: `f(x_j) = (1/2pi) sum_k S_k e^{i omega_k x_j} d_omega`
    /// with the two endpoint frequencies weighted by 1/2. Returns complex
    /// samples; the imaginary part vanishes for conjugate-symmetric input.
    pub fn inverse_complex(&self, spectrum: &Spectrum) -> Vec<Complex64> {
        let k_max = self.k_max as i64;
        let len = 2 * self.k_max;
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for k in (-k_max + 1)..k_max {
            buf[k.rem_euclid(2 * k_max) as usize] = spectrum.at(k) * i_pow(-k);
        }
        // k = K and k = -K alias to the same bin.
        buf[self.k_max] = (spectrum.at(k_max) * i_pow(-k_max) + spectrum.at(-k_max) * i_pow(k_max)) * 0.5;
        self.inverse.process(&mut buf);
        let scale = 1.0 / (2.0 * self.extent);
        buf[..self.n_x].iter().map(|v| v * scale).collect()
    }

    pub fn inverse(&self, spectrum: &Spectrum) -> Vec<f64> {
        self.inverse_complex(spectrum).into_iter().map(|v| v.re).collect()
    }
}

pub fn dft(values: &[f64], grid: &Grid) -> Spectrum {
    DftPlan::new(grid).forward(values)
}

pub fn idft(spectrum: &Spectrum, grid: &Grid) -> Vec<f64> {
    DftPlan::new(grid).inverse(spectrum)
}

pub fn power_spectrum(spectrum: &Spectrum) -> Vec<f64> {
    spectrum.values.iter().map(|v| v.norm_sqr()).collect()
}

/// Spectrum values at lattice indices `-2h..=2h`, zero where the grid ends.
pub fn lattice_spectrum(spectrum: &Spectrum, lattice: &Lattice) -> Vec<Complex64> {
    let h = lattice.half() as i64;
    let k_max = spectrum.k_max() as i64;
    (-2 * h..=2 * h)
        .map(|m| {
            let k = lattice.grid_k(m);
            if k.abs() <= k_max {
                spectrum.at(k)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Complex field over lattice frequency pairs, row `omega1`, column `omega2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BispectrumField {
    pub lattice: Lattice,
    pub values: Vec<Complex64>,
    /// `false` where `omega2 - omega1` leaves the grid; such entries hold 0.
    pub mask: Vec<bool>,
}

impl BispectrumField {
    pub fn zeros(lattice: Lattice) -> Self {
        let n = lattice.len();
        let h = lattice.half() as i64;
        let mut mask = vec![true; n * n];
        for i1 in 0..n {
            for i2 in 0..n {
                mask[i1 * n + i2] = lattice.pair_valid(i1 as i64 - h, i2 as i64 - h);
            }
        }
        Self {
            lattice,
            values: vec![Complex64::new(0.0, 0.0); n * n],
            mask,
        }
    }

    /// Field with entries `f(omega1, omega2)` on valid pairs.
    pub fn from_fn(lattice: Lattice, f: impl Fn(f64, f64) -> Complex64 + Sync) -> Self {
        let mut out = Self::zeros(lattice);
        let n = out.n();
        let freqs = lattice.frequencies();
        out.values.par_chunks_mut(n).enumerate().for_each(|(i1, row)| {
            for (i2, v) in row.iter_mut().enumerate() {
                if lattice.pair_valid(lattice.signed(i1), lattice.signed(i2)) {
                    *v = f(freqs[i1], freqs[i2]);
                }
            }
        });
        out
    }

    pub fn n(&self) -> usize {
        self.lattice.len()
    }

    pub fn index(&self, m1: i64, m2: i64) -> usize {
        self.lattice.index(m1) * self.n() + self.lattice.index(m2)
    }

    pub fn get(&self, m1: i64, m2: i64) -> Complex64 {
        self.values[self.index(m1, m2)]
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.lattice != other.lattice {
            return Err(Error::LatticeMismatch);
        }
        Ok(())
    }

    /// `sum |v|^2 dA` over entries where `domain` is true.
    pub fn norm_sq_on(&self, domain: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(domain)
            .filter(|(_, &d)| d)
            .map(|(v, _)| v.norm_sqr())
            .sum::<f64>()
            * self.lattice.cell_area()
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq_on(&self.mask)
    }

    /// `||self - reference|| / ||reference||` over `domain`.
    pub fn relative_error_on(&self, reference: &Self, domain: &[bool]) -> Result<f64> {
        self.check_same(reference)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for ((a, b), &d) in self.values.iter().zip(&reference.values).zip(domain) {
            if d {
                num += (a - b).norm_sqr();
                den += b.norm_sqr();
            }
        }
        if den == 0.0 {
            return Err(Error::ZeroReference);
        }
        Ok((num / den).sqrt())
    }

    /// Inner product `sum a conj(b) dA` over valid entries.
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        self.check_same(other)?;
        let s: Complex64 = self
            .values
            .iter()
            .zip(&other.values)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| a * b.conj())
            .sum();
        Ok(s * self.lattice.cell_area())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            lattice: self.lattice,
            values: self.values.iter().map(|&v| f(v)).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            lattice: self.lattice,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            mask: self.mask.clone(),
        })
    }

    /// Averages `B(w1, w2)` with `conj B(-w1, -w2)`.
    pub fn conj_symmetrized(&self) -> Self {
        let n = self.n();
        let mut out = self.clone();
        for i in 0..n * n {
            let j = n * n - 1 - i;
            out.values[i] = (self.values[i] + self.values[j].conj()) * 0.5;
        }
        out
    }

    /// Zeroes entries outside `domain`.
    pub fn restricted(&self, domain: &[bool]) -> Self {
        let mut out = self.clone();
        for (v, &d) in out.values.iter_mut().zip(domain) {
            if !d {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Bispectrum `S(w1) conj(S(w2)) S(w2 - w1)` on a lattice.
pub fn bispectrum(spectrum: &Spectrum, lattice: &Lattice) -> BispectrumField {
    let f = lattice_spectrum(spectrum, lattice);
    bispectrum_from_lattice(&f, lattice)
}

/// Bispectrum from lattice samples `F(m)`, `m` in `-2h..=2h`.
pub fn bispectrum_from_lattice(f: &[Complex64], lattice: &Lattice) -> BispectrumField {
    let h = lattice.half() as i64;
    let at = |m: i64| f[(m + 2 * h) as usize];
    let mut out = BispectrumField::zeros(*lattice);
    let n = out.n();
    let mask = out.mask.clone();
    out.values.par_chunks_mut(n).enumerate().for_each(|(i1, row)| {
        let m1 = i1 as i64 - h;
        let a = at(m1);
        for (i2, v) in row.iter_mut().enumerate() {
            if mask[i1 * n + i2] {
                let m2 = i2 as i64 - h;
                *v = a * at(m2).conj() * at(m2 - m1);
            }
        }
    });
    out
}

fn check_scale(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidParameter(format!("dilation factor {c} outside (0, 1]")));
    }
    Ok(())
}

/// Bilinear weights for sampling at signed index coordinate `u` on an axis
/// with indices `0..n` centered at `h`: up to two `(index, weight)` pairs.
fn linear_taps(u: f64, h: usize, n: usize) -> [(usize, f64); 2] {
    let p = u + h as f64;
    if p < 0.0 || p > (n - 1) as f64 {
        return [(0, 0.0), (0, 0.0)];
    }
    let i0 = p.floor() as usize;
    let t = p - i0 as f64;
    if i0 + 1 >= n {
        [(i0, 1.0), (i0, 0.0)]
    } else {
        [(i0, 1.0 - t), (i0 + 1, t)]
    }
}

/// `C^deg g(C omega)` by bilinear interpolation, evaluated on entries where
/// `domain` is true and reading only entries where `domain` is true.
pub(crate) fn dilate_values(values: &[Complex64], domain: &[bool], lattice: &Lattice, c: f64, degree: i32) -> Vec<Complex64> {
    let n = lattice.len();
    let h = lattice.half();
    let scale = c.powi(degree);
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    if c == 1.0 {
        for i in 0..n * n {
            if domain[i] {
                out[i] = values[i] * scale;
            }
        }
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i1, row)| {
        let t1 = linear_taps(c * lattice.signed(i1) as f64, h, n);
        for (i2, o) in row.iter_mut().enumerate() {
            if !domain[i1 * n + i2] {
                continue;
            }
            let t2 = linear_taps(c * lattice.signed(i2) as f64, h, n);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(a, wa) in &t1 {
                for &(b, wb) in &t2 {
                    let w = wa * wb;
                    if w != 0.0 && domain[a * n + b] {
                        acc += values[a * n + b] * w;
                    }
                }
            }
            *o = acc * scale;
        }
    });
    out
}

/// Exact matrix transpose of [`dilate_values`] for the same domain.
pub(crate) fn dilate_transpose_values(
    values: &[Complex64],
    domain: &[bool],
    lattice: &Lattice,
    c: f64,
    degree: i32,
) -> Vec<Complex64> {
    let n = lattice.len();
    let h = lattice.half();
    let scale = c.powi(degree);
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    if c == 1.0 {
        for i in 0..n * n {
            if domain[i] {
                out[i] = values[i] * scale;
            }
        }
        return out;
    }
    // Sequential scatter keeps the summation order fixed.
    for i1 in 0..n {
        let t1 = linear_taps(c * lattice.signed(i1) as f64, h, n);
        for i2 in 0..n {
            let idx = i1 * n + i2;
            if !domain[idx] {
                continue;
            }
            let v = values[idx] * scale;
            let t2 = linear_taps(c * lattice.signed(i2) as f64, h, n);
            for &(a, wa) in &t1 {
                for &(b, wb) in &t2 {
                    let w = wa * wb;
                    if w != 0.0 && domain[a * n + b] {
                        out[a * n + b] += v * w;
                    }
                }
            }
        }
    }
    out
}

/// `L_C g(omega) = C^degree g(C omega)`; `C = 1` is the identity up to the
/// factor `C^degree = 1`.
pub fn dilate_field(field: &BispectrumField, c: f64, degree: i32) -> Result<BispectrumField> {
    check_scale(c)?;
    Ok(BispectrumField {
        lattice: field.lattice,
        values: dilate_values(&field.values, &field.mask, &field.lattice, c, degree),
        mask: field.mask.clone(),
    })
}

/// Continuum adjoint of [`dilate_field`]: `C^{degree-2} h(omega / C)`, with
/// arguments beyond the lattice contributing 0.
pub fn dilate_adjoint(field: &BispectrumField, c: f64, degree: i32) -> Result<BispectrumField> {
    check_scale(c)?;
    let lattice = field.lattice;
    let n = lattice.len();
    let h = lattice.half();
    let scale = c.powi(degree - 2);
    let mut out = BispectrumField::zeros(lattice);
    let src = &field.values;
    let mask = &field.mask;
    out.values.par_chunks_mut(n).enumerate().for_each(|(i1, row)| {
        let t1 = linear_taps(lattice.signed(i1) as f64 / c, h, n);
        for (i2, o) in row.iter_mut().enumerate() {
            if !mask[i1 * n + i2] {
                continue;
            }
            let t2 = linear_taps(lattice.signed(i2) as f64 / c, h, n);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(a, wa) in &t1 {
                for &(b, wb) in &t2 {
                    let w = wa * wb;
                    if w != 0.0 && mask[a * n + b] {
                        acc += src[a * n + b] * w;
                    }
                }
            }
            *o = acc * scale;
        }
    });
    Ok(out)
}

/// Exact transpose of the discrete [`dilate_field`] matrix.
pub fn dilate_transpose(field: &BispectrumField, c: f64, degree: i32) -> Result<BispectrumField> {
    check_scale(c)?;
    Ok(BispectrumField {
        lattice: field.lattice,
        values: dilate_transpose_values(&field.values, &field.mask, &field.lattice, c, degree),
        mask: field.mask.clone(),
    })
}

/// Derivative along one axis of a line with spacing `step`: central in the
/// interior, second-order one-sided at the ends.
fn diff_line(line: &[Complex64], step: f64, out: &mut [Complex64]) {
    let n = line.len();
    if n < 3 {
        out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
        return;
    }
    out[0] = (line[0] * -3.0 + line[1] * 4.0 - line[2]) / (2.0 * step);
    out[n - 1] = (line[n - 1] * 3.0 - line[n - 2] * 4.0 + line[n - 3]) / (2.0 * step);
    for i in 1..n - 1 {
        out[i] = (line[i + 1] - line[i - 1]) / (2.0 * step);
    }
}

fn transpose(values: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = values[i * n + j];
        }
    }
    out
}

/// Applies `op` to every row.
fn rows(values: &[Complex64], n: usize, op: &(dyn Fn(&[Complex64], &mut [Complex64]) + Sync)) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    out.par_chunks_mut(n)
        .zip(values.par_chunks(n))
        .for_each(|(o, row)| op(row, o));
    out
}

/// Applies `op` to every column.
fn cols(values: &[Complex64], n: usize, op: &(dyn Fn(&[Complex64], &mut [Complex64]) + Sync)) -> Vec<Complex64> {
    transpose(&rows(&transpose(values, n), n, op), n)
}

/// `omega1 d/d omega1 + omega2 d/d omega2` by finite differences.
pub fn euler_radial_derivative(field: &BispectrumField) -> BispectrumField {
    let lattice = field.lattice;
    let n = lattice.len();
    let step = lattice.step();
    let d2 = rows(&field.values, n, &|l, o| diff_line(l, step, o));
    let d1 = cols(&field.values, n, &|l, o| diff_line(l, step, o));
    let freqs = lattice.frequencies();
    let mut out = BispectrumField::zeros(lattice);
    for i1 in 0..n {
        for i2 in 0..n {
            let idx = i1 * n + i2;
            if out.mask[idx] {
                out.values[idx] = d1[idx] * freqs[i1] + d2[idx] * freqs[i2];
            }
        }
    }
    out
}

/// Truncated Gaussian weights `exp(-(k step)^2 / 2L^2)`, `k` in `0..=r`.
fn gaussian_weights(step: f64, width: f64, max_radius: usize) -> Vec<f64> {
    let r = ((5.0 * width / step).ceil() as usize).min(max_radius);
    (0..=r)
        .map(|k| (-(k as f64 * step).powi(2) / (2.0 * width * width)).exp())
        .collect()
}

/// Normalized moving average with the weights renormalized over the taps
/// that fall inside the line.
fn smooth_line(line: &[Complex64], w: &[f64], out: &mut [Complex64]) {
    let n = line.len() as i64;
    let r = (w.len() - 1) as i64;
    for i in 0..n {
        let lo = (i - r).max(0);
        let hi = (i + r).min(n - 1);
        let mut acc = Complex64::new(0.0, 0.0);
        let mut mass = 0.0;
        for j in lo..=hi {
            let wk = w[(j - i).unsigned_abs() as usize];
            acc += line[j as usize] * wk;
            mass += wk;
        }
        out[i as usize] = acc / mass;
    }
}

/// Derivative of the Gaussian-smoothed line, as the Gaussian-weighted
/// least-squares slope over the available taps. In the interior this is the
/// convolution with the derivative-of-Gaussian kernel normalized to be exact
/// on linear functions.
fn smooth_deriv_line(line: &[Complex64], w: &[f64], step: f64, out: &mut [Complex64]) {
    let n = line.len() as i64;
    let r = (w.len() - 1) as i64;
    for i in 0..n {
        let lo = (i - r).max(0);
        let hi = (i + r).min(n - 1);
        let mut mass = 0.0;
        let mut first = 0.0;
        for j in lo..=hi {
            let wk = w[(j - i).unsigned_abs() as usize];
            mass += wk;
            first += wk * (j - i) as f64 * step;
        }
        let mean = first / mass;
        let mut acc = Complex64::new(0.0, 0.0);
        let mut second = 0.0;
        for j in lo..=hi {
            let wk = w[(j - i).unsigned_abs() as usize];
            let u = (j - i) as f64 * step - mean;
            acc += line[j as usize] * (wk * u);
            second += wk * u * u;
        }
        out[i as usize] = if second > 0.0 { acc / second } else { Complex64::new(0.0, 0.0) };
    }
}

/// Convolution with a unit-mass isotropic Gaussian of standard deviation `width`.
pub fn gaussian_smooth(field: &BispectrumField, width: f64) -> Result<BispectrumField> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidParameter(format!("smoothing width {width}")));
    }
    let lattice = field.lattice;
    let n = lattice.len();
    let w = gaussian_weights(lattice.step(), width, n - 1);
    let s = rows(&field.values, n, &|l, o| smooth_line(l, &w, o));
    let s = cols(&s, n, &|l, o| smooth_line(l, &w, o));
    Ok(BispectrumField {
        lattice,
        values: s,
        mask: field.mask.clone(),
    }
    .restricted(&field.mask))
}

/// `4 (g * phi_L) + omega1 (g * d1 phi_L) + omega2 (g * d2 phi_L)`.
///
/// When `width` is below a quarter of the lattice step the kernel is a
/// delta on the lattice and the result falls back to `4 g + omega . grad g`.
pub fn smoothed_data_term(field: &BispectrumField, width: f64) -> Result<BispectrumField> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidParameter(format!("smoothing width {width}")));
    }
    let lattice = field.lattice;
    if width < lattice.step() / 4.0 {
        let e = euler_radial_derivative(field);
        return field.zip_with(&e, |g, d| g * 4.0 + d);
    }
    let n = lattice.len();
    let step = lattice.step();
    let w = gaussian_weights(step, width, n - 1);
    let s_rows = rows(&field.values, n, &|l, o| smooth_line(l, &w, o));
    let s_cols = cols(&field.values, n, &|l, o| smooth_line(l, &w, o));
    let smooth = cols(&s_rows, n, &|l, o| smooth_line(l, &w, o));
    let d1 = cols(&s_rows, n, &|l, o| smooth_deriv_line(l, &w, step, o));
    let d2 = rows(&s_cols, n, &|l, o| smooth_deriv_line(l, &w, step, o));
    let freqs = lattice.frequencies();
    let mut out = BispectrumField::zeros(lattice);
    for i1 in 0..n {
        for i2 in 0..n {
            let idx = i1 * n + i2;
            if out.mask[idx] {
                out.values[idx] = smooth[idx] * 4.0 + d1[idx] * freqs[i1] + d2[idx] * freqs[i2];
            }
        }
    }
    Ok(out)
}

/// Real vectors over all grid frequencies (`index = k + K`, step `d_omega`).
pub mod line {
    use super::*;

    fn taps(u: f64, h: usize, n: usize) -> [(usize, f64); 2] {
        linear_taps(u, h, n)
    }

    /// `C^degree p(C omega)` by linear interpolation.
    pub fn dilate(p: &[f64], c: f64, degree: i32) -> Result<Vec<f64>> {
        check_scale(c)?;
        let n = p.len();
        let h = (n - 1) / 2;
        let scale = c.powi(degree);
        Ok((0..n)
            .map(|i| {
                let u = c * (i as f64 - h as f64);
                taps(u, h, n).iter().map(|&(j, w)| w * p[j]).sum::<f64>() * scale
            })
            .collect())
    }

    /// Continuum adjoint `C^{degree-1} p(omega / C)`.
    pub fn dilate_adjoint(p: &[f64], c: f64, degree: i32) -> Result<Vec<f64>> {
        check_scale(c)?;
        let n = p.len();
        let h = (n - 1) / 2;
        let scale = c.powi(degree - 1);
        Ok((0..n)
            .map(|i| {
                let u = (i as f64 - h as f64) / c;
                taps(u, h, n).iter().map(|&(j, w)| w * p[j]).sum::<f64>() * scale
            })
            .collect())
    }

    /// Exact transpose of [`dilate`].
    pub fn dilate_transpose(p: &[f64], c: f64, degree: i32) -> Result<Vec<f64>> {
        check_scale(c)?;
        let n = p.len();
        let h = (n - 1) / 2;
        let scale = c.powi(degree);
        let mut out = vec![0.0; n];
        for (i, &v) in p.iter().enumerate() {
            let u = c * (i as f64 - h as f64);
            for (j, w) in taps(u, h, n) {
                out[j] += w * v * scale;
            }
        }
        Ok(out)
    }

    /// `omega p'(omega)` by finite differences.
    pub fn euler_derivative(p: &[f64], step: f64) -> Vec<f64> {
        let n = p.len();
        let h = (n - 1) / 2;
        let line: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut d = vec![Complex64::new(0.0, 0.0); n];
        diff_line(&line, step, &mut d);
        d.iter()
            .enumerate()
            .map(|(i, v)| v.re * (i as f64 - h as f64) * step)
            .collect()
    }

    pub fn gaussian_smooth(p: &[f64], step: f64, width: f64) -> Result<Vec<f64>> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothing width {width}")));
        }
        let w = gaussian_weights(step, width, p.len() - 1);
        let line: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); p.len()];
        smooth_line(&line, &w, &mut out);
        Ok(out.into_iter().map(|v| v.re).collect())
    }

    /// `coef (p * phi_L) + omega (p * phi_L')`, falling back to finite
    /// differences for widths below a quarter step.
    pub fn smoothed_data_term(p: &[f64], step: f64, width: f64, coef: f64) -> Result<Vec<f64>> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothing width {width}")));
        }
        let n = p.len();
        let h = (n - 1) / 2;
        if width < step / 4.0 {
            let e = euler_derivative(p, step);
            return Ok(p.iter().zip(e).map(|(v, d)| coef * v + d).collect());
        }
        let w = gaussian_weights(step, width, n - 1);
        let line: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut s = vec![Complex64::new(0.0, 0.0); n];
        let mut d = vec![Complex64::new(0.0, 0.0); n];
        smooth_line(&line, &w, &mut s);
        smooth_deriv_line(&line, &w, step, &mut d);
        Ok((0..n)
            .map(|i| coef * s[i].re + (i as f64 - h as f64) * step * d[i].re)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn wide() -> Grid {
        Grid::new(32, 4).unwrap()
    }

    fn direct(values: &[f64], grid: &Grid, omega: f64) -> Complex64 {
        grid.x()
            .iter()
            .zip(values)
            .map(|(&x, &v)| Complex64::from_polar(v * grid.dx(), -omega * x))
            .sum()
    }

    fn gauss_samples(grid: &Grid, shift: f64) -> Vec<f64> {
        grid.x().iter().map(|x| (-(x - shift).powi(2)).exp()).collect()
    }

    #[test]
    fn fft_matches_direct_riemann_sum() {
        let g = Grid::new(8, 3).unwrap();
        let v: Vec<f64> = g.x().iter().map(|x| (x * 1.3).sin() + 0.1 * x * x).collect();
        let s = dft(&v, &g);
        for (i, &w) in g.omega().iter().enumerate() {
            let d = direct(&v, &g, w);
            assert!((s.values[i] - d).norm() < 1e-11, "omega {w}");
        }
    }

    #[test]
    fn gaussian_transform_closed_form() {
        let g = wide();
        let s = dft(&gauss_samples(&g, 0.0), &g);
        for (i, &w) in g.omega().iter().enumerate() {
            if w.abs() <= 8.0 {
                let exact = PI.sqrt() * (-w * w / 4.0).exp();
                assert!((s.values[i].re - exact).abs() / exact < 1e-6);
                assert!(s.values[i].im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_multiplies_by_phase() {
        let g = wide();
        let s0 = dft(&gauss_samples(&g, 0.0), &g);
        let s1 = dft(&gauss_samples(&g, 1.0), &g);
        for (i, &w) in g.omega().iter().enumerate() {
            let expect = s0.values[i] * Complex64::from_polar(1.0, -w);
            assert!((s1.values[i] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let g = Grid::new(16, 3).unwrap();
        let v: Vec<f64> = g.x().iter().map(|x| (x * 0.7).cos() * (-0.1 * x * x).exp() + 0.3).collect();
        let back = idft(&dft(&v, &g), &g);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conjugate_symmetry_and_plancherel() {
        let g = wide();
        let v: Vec<f64> = g.x().iter().map(|x| (-2.0 * x * x).exp() * (3.0 * x).sin()).collect();
        let s = dft(&v, &g);
        let k = g.k_max() as i64;
        let peak = s.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for kk in 0..=k {
            assert!((s.at(kk) - s.at(-kk).conj()).norm() <= 1e-10 * peak);
        }
        let e_x = g.dx() * v.iter().map(|a| a * a).sum::<f64>();
        let e_w = g.d_omega() / (2.0 * PI)
            * s.values
                .iter()
                .enumerate()
                .map(|(i, z)| if i == 0 || i == s.values.len() - 1 { 0.5 } else { 1.0 } * z.norm_sqr())
                .sum::<f64>();
        assert!((e_x - e_w).abs() < 1e-4 * e_x);
    }

    #[test]
    fn bispectrum_is_translation_invariant() {
        let g = wide();
        let lat = g.default_lattice();
        let b0 = bispectrum(&dft(&gauss_samples(&g, 0.0), &g), &lat);
        let b1 = bispectrum(&dft(&gauss_samples(&g, 1.5), &g), &lat);
        let p0 = power_spectrum(&dft(&gauss_samples(&g, 0.0), &g));
        let p1 = power_spectrum(&dft(&gauss_samples(&g, 1.5), &g));
        let scale = b0.max_abs();
        for (a, b) in b0.values.iter().zip(&b1.values) {
            assert!((a - b).norm() < 1e-10 * scale);
        }
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-10 * PI);
        }
        let origin = b0.get(0, 0);
        assert!(origin.im.abs() < 1e-12);
        assert!((origin.re - PI.powf(1.5)).abs() < 1e-9);
    }

    fn gauss_field(lat: Lattice, s: f64) -> BispectrumField {
        BispectrumField::from_fn(lat, |a, b| Complex64::new((-(a * a + b * b) / (2.0 * s * s)).exp(), 0.0))
    }

    #[test]
    fn dilation_identity_and_constant() {
        let lat = wide().default_lattice();
        let f = gauss_field(lat, 4.0);
        assert_eq!(dilate_field(&f, 1.0, 4).unwrap(), f);
        let ones = BispectrumField::from_fn(lat, |_, _| Complex64::new(1.0, 0.0));
        let d = dilate_field(&ones, 0.5, 4).unwrap();
        for v in &d.values {
            assert!((v.re - 1.0 / 16.0).abs() < 1e-15);
        }
        assert!(dilate_field(&f, 1.5, 4).is_err());
        assert!(dilate_field(&f, 0.0, 4).is_err());
    }

    #[test]
    fn adjoint_moves_bump_outward() {
        let lat = wide().default_lattice();
        let mut f = BispectrumField::zeros(lat);
        let i = f.index(10, -6);
        f.values[i] = Complex64::new(1.0, 0.0);
        let a = dilate_adjoint(&f, 0.5, 4).unwrap();
        // h(omega / C) is nonzero where omega / C hits the bump, at omega = C omega0.
        assert!((a.get(5, -3).re - 0.25).abs() < 1e-15);
        let total: f64 = a.values.iter().map(|v| v.re).sum();
        assert!((total - 0.25).abs() < 1e-15);
    }

    #[test]
    fn euler_on_quadratic_and_constant() {
        let lat = wide().default_lattice();
        let r2 = BispectrumField::from_fn(lat, |a, b| Complex64::new(a * a + b * b, 0.0));
        let e = euler_radial_derivative(&r2);
        for (v, r) in e.values.iter().zip(&r2.values) {
            assert!((v.re - 2.0 * r.re).abs() <= 1e-6 * r.re.max(1e-12) + 1e-9);
        }
        let c = BispectrumField::from_fn(lat, |_, _| Complex64::new(3.0, -1.0));
        assert!(euler_radial_derivative(&c).max_abs() < 1e-9);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let lat = wide().default_lattice();
        let c = BispectrumField::from_fn(lat, |_, _| Complex64::new(2.0, 1.0));
        let s = gaussian_smooth(&c, 1.3).unwrap();
        for v in &s.values {
            assert!((v - Complex64::new(2.0, 1.0)).norm() < 1e-8);
        }
        let d = smoothed_data_term(&c, 1.3).unwrap();
        for v in &d.values {
            assert!((v - Complex64::new(8.0, 4.0)).norm() < 1e-4);
        }
        let f = gauss_field(lat, 3.0);
        let tiny = gaussian_smooth(&f, 1.0 / 160.0).unwrap();
        for (a, b) in tiny.values.iter().zip(&f.values) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn smoothing_widens_gaussians() {
        let g = Grid::new(32, 4).unwrap();
        let lat = Lattice::new(&g, 1, 400).unwrap();
        let s = 2.0;
        let l = 1.0;
        let f = gauss_field(lat, s);
        let out = gaussian_smooth(&f, l).unwrap();
        let ratio = s * s / (s * s + l * l);
        assert!((out.get(0, 0).re - ratio).abs() < 1e-3);
        let w2 = s * s + l * l;
        let m = 40;
        let w = lat.freq(m);
        assert!((out.get(m, 0).re - ratio * (-w * w / (2.0 * w2)).exp()).abs() < 1e-3);
    }

    #[test]
    fn data_term_paths_agree() {
        let lat = wide().default_lattice();
        let f = gauss_field(lat, 5.0);
        let smooth = smoothed_data_term(&f, lat.step() / 2.0).unwrap();
        let fd = smoothed_data_term(&f, lat.step() / 8.0).unwrap();
        let err = smooth.relative_error_on(&fd, &f.mask).unwrap();
        assert!(err < 1e-2, "{err}");
        let r2 = BispectrumField::from_fn(lat, |a, b| Complex64::new(a * a + b * b, 0.0));
        let d = smoothed_data_term(&r2, 0.5).unwrap();
        let i = d.index(20, 7);
        let r = r2.values[i].re;
        // 6 r^2 plus the 4 * 2 L^2 smoothing bias.
        assert!((d.values[i].re - 6.0 * r - 8.0 * 0.25).abs() < 1e-6 * r);
    }

    #[test]
    fn line_operators() {
        let p: Vec<f64> = (0..201).map(|i| (-(((i as f64) - 100.0) * 0.05).powi(2)).exp()).collect();
        assert_eq!(line::dilate(&p, 1.0, 3).unwrap(), p);
        let q: Vec<f64> = (0..201).map(|i| (-(((i as f64) - 100.0) * 0.07).powi(2)).exp()).collect();
        for c in [1.0 / 3.0, 0.5, 2.0 / 3.0] {
            let lp = line::dilate(&p, c, 3).unwrap();
            let aq = line::dilate_adjoint(&q, c, 3).unwrap();
            let tq = line::dilate_transpose(&q, c, 3).unwrap();
            let a: f64 = lp.iter().zip(&q).map(|(x, y)| x * y).sum();
            let b: f64 = p.iter().zip(&aq).map(|(x, y)| x * y).sum();
            let t: f64 = p.iter().zip(&tq).map(|(x, y)| x * y).sum();
            assert!((a - b).abs() < 1e-3 * a.abs());
            assert!((a - t).abs() < 1e-12 * a.abs());
        }
    }
}
