//! Spatial and frequency sampling.
//!
//! A [`Grid`] samples space on `[-N/2, N/2]` with step `2^-ell` and frequency on
//! `[-2^ell pi, 2^ell pi]` with step `pi/N`. Frequency node `k` (signed, in
//! `-K..=K` with `K = N 2^ell`) sits at `k pi / N`.
//!
//! Bispectrum work happens on a [`Lattice`]: a strided, truncated subset of the
//! grid frequencies. Full-grid bispectra are `(2K+1)^2`, which is too
//! large to accumulate over hundreds of thousands of observations.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n: usize,
    ell: u32,
    dx: f64,
    x: Vec<f64>,
    omega: Vec<f64>,
}

impl Grid {
    /// Builds the grid for spatial extent `n` (a power of two) and dyadic
    /// sampling exponent `ell`.
    pub fn new(n: usize, ell: u32) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!("N = {n} is not a power of two")));
        }
        if ell == 0 || ell > 20 {
            return Err(Error::InvalidGrid(format!("ell = {ell} outside 1..=20")));
        }
        let k_max = n << ell;
        let n_freq = 2 * k_max + 1;
        if n_freq < 8 {
            return Err(Error::InvalidGrid(format!(
                "N = {n}, ell = {ell} gives only {n_freq} frequency nodes"
            )));
        }
        let dx = 1.0 / (1u64 << ell) as f64;
        let half = n as f64 / 2.0;
        let x = (0..=k_max).map(|j| -half + j as f64 * dx).collect();
        let d_omega = PI / n as f64;
        let omega = (0..n_freq)
            .map(|i| (i as i64 - k_max as i64) as f64 * d_omega)
            .collect();
        Ok(Self {
            n,
            ell,
            dx,
            x,
            omega,
        })
    }

    /// The configuration used throughout the experiments: `N = 32`, `ell = 4`.
    pub fn standard() -> Self {
        Self::new(32, 4).expect("standard grid is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Spatial extent `N` of the observation window.
    pub fn extent(&self) -> f64 {
        self.n as f64
    }

    /// Largest signed frequency index `K = N 2^ell`.
    pub fn k_max(&self) -> usize {
        self.n << self.ell
    }

    pub fn d_omega(&self) -> f64 {
        PI / self.n as f64
    }

    pub fn omega_max(&self) -> f64 {
        self.k_max() as f64 * self.d_omega()
    }

    /// Position of signed frequency index `k` inside [`Grid::omega`].
    pub fn freq_index(&self, k: i64) -> usize {
        debug_assert!(k.unsigned_abs() as usize <= self.k_max());
        (k + self.k_max() as i64) as usize
    }

    /// Half-width of the region on which hidden signals are defined.
    pub fn hidden_half_width(&self) -> f64 {
        self.n as f64 / 4.0
    }

    /// Frequency lattice used by default for bispectrum work: the square
    /// `|omega| <= omega_max / 2`, strided so each axis carries 257 nodes on
    /// the standard grid. On that square every difference `omega2 - omega1`
    /// stays on the grid, so nothing is masked.
    pub fn default_lattice(&self) -> Lattice {
        let k = self.k_max();
        let stride = (k / 256).max(1);
        Lattice::new(self, stride, (k / (2 * stride)).max(1)).expect("default lattice is valid")
    }

    /// Every grid frequency, unstrided. Entries whose difference frequency
    /// leaves the grid are masked.
    pub fn full_lattice(&self) -> Lattice {
        Lattice::new(self, 1, self.k_max()).expect("full lattice is valid")
    }
}

/// Frequencies `m * stride * pi / N` for `m` in `-half..=half`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    k_max: usize,
    d_omega: f64,
    stride: usize,
    half: usize,
}

impl Lattice {
    pub fn new(grid: &Grid, stride: usize, half: usize) -> Result<Self> {
        if stride == 0 || half == 0 || stride * half > grid.k_max() {
            return Err(Error::InvalidParameter(format!(
                "lattice stride {stride}, half-width {half} does not fit a grid with K = {}",
                grid.k_max()
            )));
        }
        Ok(Self {
            k_max: grid.k_max(),
            d_omega: grid.d_omega(),
            stride,
            half,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn half(&self) -> usize {
        self.half
    }

    /// Nodes per axis.
    pub fn len(&self) -> usize {
        2 * self.half + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.stride as f64 * self.d_omega
    }

    pub fn freq(&self, m: i64) -> f64 {
        m as f64 * self.step()
    }

    pub fn index(&self, m: i64) -> usize {
        (m + self.half as i64) as usize
    }

    pub fn signed(&self, idx: usize) -> i64 {
        idx as i64 - self.half as i64
    }

    /// Largest lattice frequency.
    pub fn omega_max(&self) -> f64 {
        self.freq(self.half as i64)
    }

    /// Grid frequency index of lattice node `m`.
    pub fn grid_k(&self, m: i64) -> i64 {
        m * self.stride as i64
    }

    /// Largest `|m|` whose grid frequency exists (`|m| stride <= K`).
    pub fn reach(&self) -> usize {
        self.k_max / self.stride
    }

    /// Whether `omega2 - omega1` is a sampled frequency.
    pub fn pair_valid(&self, m1: i64, m2: i64) -> bool {
        ((m2 - m1).unsigned_abs() as usize) <= self.reach()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (-(self.half as i64)..=self.half as i64)
            .map(|m| self.freq(m))
            .collect()
    }

    pub fn cell_area(&self) -> f64 {
        self.step() * self.step()
    }

    pub fn grid_params(&self) -> (usize, f64) {
        (self.k_max, self.d_omega)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_dimensions() {
        let g = Grid::standard();
        assert_eq!(g.dx(), 1.0 / 16.0);
        assert!((g.d_omega() - PI / 32.0).abs() < 1e-15);
        assert!((g.omega()[0] + 16.0 * PI).abs() < 1e-12);
        assert!((g.omega().last().unwrap() - 16.0 * PI).abs() < 1e-12);
        assert_eq!(g.x().len(), 513);
        assert_eq!(g.omega().len(), 1025);
    }

    #[test]
    fn tiny_grid_enumerates_nodes() {
        let g = Grid::new(2, 1).unwrap();
        assert_eq!(g.x(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn grid_invariants() {
        for (n, ell) in [(2, 1), (4, 2), (32, 4), (16, 3)] {
            let g = Grid::new(n, ell).unwrap();
            let span = g.dx() * (g.x().len() - 1) as f64;
            assert!((span - n as f64).abs() < 1e-12);
            let zeros = g.omega().iter().filter(|w| **w == 0.0).count();
            assert_eq!(zeros, 1);
            let len = g.omega().len();
            for i in 0..len {
                assert!((g.omega()[i] + g.omega()[len - 1 - i]).abs() < 1e-12);
            }
            for w in g.omega().windows(2) {
                assert!((w[1] - w[0] - PI / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(3, 2).is_err());
        assert!(Grid::new(0, 2).is_err());
        assert!(Grid::new(4, 0).is_err());
        assert!(Grid::new(1, 1).is_err());
    }

    #[test]
    fn default_lattice_has_no_masked_pairs() {
        let g = Grid::standard();
        let lat = g.default_lattice();
        assert_eq!(lat.stride(), 2);
        assert_eq!(lat.len(), 257);
        assert!((lat.omega_max() - 8.0 * PI).abs() < 1e-12);
        let h = lat.half() as i64;
        assert!(lat.pair_valid(-h, h));
        let full = g.full_lattice();
        assert!(!full.pair_valid(-512, 512));
        assert!(full.pair_valid(0, 512));
    }
}
