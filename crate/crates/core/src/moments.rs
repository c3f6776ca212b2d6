//! Streaming accumulation of the first three empirical moments of a batch:
//! mean spectrum, mean power spectrum and mean bispectrum.
//!
//! Observations are generated (or read) one at a time and never stored, so
//! batch sizes in the hundreds of thousands fit in memory. Work is split into
//! fixed chunks whose partial sums are added in chunk order, which makes the
//! result independent of the thread count. Nested batch sizes are snapshots
//! of a single pass.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Lattice};
use crate::signal_model::{render_indexed, ModelParams, ObservationBatch};
use crate::spectra::{BispectrumField, DftPlan, Spectrum};

/// Observations per work unit.
pub const CHUNK: usize = 256;

/// Uncentered sample moments of `count` observations.
#[derive(Debug, Clone)]
pub struct RawMoments {
    pub count: usize,
    pub mean_ft: Spectrum,
    pub mean_power: Vec<f64>,
    pub mean_bispectrum: BispectrumField,
    /// Mean of `|B_y|^2` per entry, when requested.
    pub mean_bispectrum_sq: Option<Vec<f64>>,
}

impl RawMoments {
    /// Entrywise standard error of the mean bispectrum (per real and
    /// imaginary part combined), when second moments were tracked.
    pub fn bispectrum_std_err(&self) -> Option<Vec<f64>> {
        let sq = self.mean_bispectrum_sq.as_ref()?;
        let m = self.count as f64;
        Some(
            sq.iter()
                .zip(&self.mean_bispectrum.values)
                .map(|(s, b)| ((s - b.norm_sqr()).max(0.0) * m / (m - 1.0).max(1.0) / m).sqrt())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AccumulateOptions {
    pub track_second_moment: bool,
}

struct Sums {
    ft: Vec<Complex64>,
    power: Vec<f64>,
    /// Rows `m1 = 0..=h` of the bispectrum; the rest follows by conjugate symmetry.
    b: Vec<Complex64>,
    b_sq: Option<Vec<f64>>,
}

impl Sums {
    fn new(n_freq: usize, n_lat: usize, h: usize, second: bool) -> Self {
        let rows = (h + 1) * n_lat;
        Self {
            ft: vec![Complex64::new(0.0, 0.0); n_freq],
            power: vec![0.0; n_freq],
            b: vec![Complex64::new(0.0, 0.0); rows],
            b_sq: second.then(|| vec![0.0; rows]),
        }
    }

    fn add(&mut self, other: &Sums) {
        add_into(&mut self.ft, &other.ft);
        for (a, b) in self.power.iter_mut().zip(&other.power) {
            *a += b;
        }
        add_into(&mut self.b, &other.b);
        if let (Some(a), Some(b)) = (self.b_sq.as_mut(), other.b_sq.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn add_into(a: &mut [Complex64], b: &[Complex64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

struct Workspace {
    values: Vec<f64>,
    buf: Vec<Complex64>,
    spec: Vec<Complex64>,
    lat: Vec<Complex64>,
    conj: Vec<Complex64>,
}

/// Computes moments from an observation source.
pub struct Accumulator<'a> {
    grid: &'a Grid,
    lattice: Lattice,
    plan: DftPlan,
    options: AccumulateOptions,
}

impl<'a> Accumulator<'a> {
    pub fn new(grid: &'a Grid, lattice: Lattice, options: AccumulateOptions) -> Self {
        Self {
            grid,
            lattice,
            plan: DftPlan::new(grid),
            options,
        }
    }

    fn workspace(&self) -> Workspace {
        let n_lat = self.lattice.len();
        Workspace {
            values: vec![0.0; self.grid.x().len()],
            buf: vec![Complex64::new(0.0, 0.0); self.plan.buffer_len()],
            spec: vec![Complex64::new(0.0, 0.0); self.grid.omega().len()],
            lat: vec![Complex64::new(0.0, 0.0); 2 * n_lat - 1],
            conj: vec![Complex64::new(0.0, 0.0); n_lat],
        }
    }

    fn empty(&self) -> Sums {
        Sums::new(
            self.grid.omega().len(),
            self.lattice.len(),
            self.lattice.half(),
            self.options.track_second_moment,
        )
    }

    /// Adds the observation currently in `ws.values`.
    fn add_current(&self, ws: &mut Workspace, sums: &mut Sums) {
        self.plan.forward_into(&ws.values, &mut ws.buf, &mut ws.spec);
        for ((f, p), s) in sums.ft.iter_mut().zip(sums.power.iter_mut()).zip(&ws.spec) {
            *f += s;
            *p += s.norm_sqr();
        }
        let h = self.lattice.half() as i64;
        let k_max = self.grid.k_max() as i64;
        for (i, v) in ws.lat.iter_mut().enumerate() {
            let k = self.lattice.grid_k(i as i64 - 2 * h);
            *v = if k.abs() <= k_max {
                ws.spec[(k + k_max) as usize]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let n = self.lattice.len();
        let h = h as usize;
        for (c, v) in ws.conj.iter_mut().zip(&ws.lat[h..h + n]) {
            *c = v.conj();
        }
        for m1 in 0..=h {
            let a = ws.lat[2 * h + m1];
            // F(m2 - m1) for m2 = -h..=h starts at lattice index h - m1.
            let diff = &ws.lat[h - m1..h - m1 + n];
            let row = &mut sums.b[m1 * n..(m1 + 1) * n];
            match sums.b_sq.as_mut() {
                None => {
                    for ((r, c), d) in row.iter_mut().zip(&ws.conj).zip(diff) {
                        *r += a * (c * d);
                    }
                }
                Some(sq) => {
                    let sq_row = &mut sq[m1 * n..(m1 + 1) * n];
                    for (((r, q), c), d) in row.iter_mut().zip(sq_row.iter_mut()).zip(&ws.conj).zip(diff) {
                        let v = a * (c * d);
                        *r += v;
                        *q += v.norm_sqr();
                    }
                }
            }
        }
    }

    fn chunk_sums<F>(&self, start: usize, end: usize, source: &F) -> Result<Sums>
    where
        F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
    {
        let mut ws = self.workspace();
        let mut sums = self.empty();
        for j in start..end {
            source(j as u64, &mut ws.values)?;
            self.add_current(&mut ws, &mut sums);
        }
        Ok(sums)
    }

    fn snapshot(&self, sums: &Sums, count: usize) -> RawMoments {
        let m = count as f64;
        let n = self.lattice.len();
        let h = self.lattice.half();
        let mut mean_b = BispectrumField::zeros(self.lattice);
        let mut sq = self.options.track_second_moment.then(|| vec![0.0; n * n]);
        for m1 in 0..=h {
            for i2 in 0..n {
                let src = m1 * n + i2;
                let pos = (h + m1) * n + i2;
                let neg = (h - m1) * n + (n - 1 - i2);
                if !mean_b.mask[pos] {
                    continue;
                }
                let v = sums.b[src] / m;
                mean_b.values[pos] = v;
                mean_b.values[neg] = v.conj();
                if let (Some(out), Some(s)) = (sq.as_mut(), sums.b_sq.as_ref()) {
                    out[pos] = s[src] / m;
                    out[neg] = s[src] / m;
                }
            }
        }
        RawMoments {
            count,
            mean_ft: Spectrum {
                values: sums.ft.iter().map(|v| v / m).collect(),
            },
            mean_power: sums.power.iter().map(|v| v / m).collect(),
            mean_bispectrum: mean_b,
            mean_bispectrum_sq: sq,
        }
    }

    /// Moments of the first `m` observations for every `m` in `sizes`
    /// (strictly increasing). `source(j, out)` writes observation `j`.
    pub fn nested<F>(&self, sizes: &[usize], source: F) -> Result<Vec<RawMoments>>
    where
        F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
    {
        if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "batch sizes must be positive and strictly increasing, got {sizes:?}"
            )));
        }
        let mut total = self.empty();
        let mut done = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &target in sizes {
            let bounds: Vec<(usize, usize)> = (done..target)
                .step_by(CHUNK)
                .map(|s| (s, (s + CHUNK).min(target)))
                .collect();
            let partials: Vec<Result<Sums>> = bounds
                .par_iter()
                .map(|&(s, e)| self.chunk_sums(s, e, &source))
                .collect();
            for p in partials {
                total.add(&p?);
            }
            done = target;
            out.push(self.snapshot(&total, target));
        }
        Ok(out)
    }
}

/// Nested moments of the synthetic batch `(params, seed)`.
pub fn accumulate_model(
    params: &ModelParams,
    grid: &Grid,
    lattice: Lattice,
    seed: u64,
    sizes: &[usize],
    options: AccumulateOptions,
) -> Result<Vec<RawMoments>> {
    Accumulator::new(grid, lattice, options).nested(sizes, |j, out| {
        render_indexed(params, grid, seed, j, out).map(|_| ())
    })
}

/// Moments of an explicit batch.
pub fn accumulate_batch(batch: &ObservationBatch, grid: &Grid, lattice: Lattice, options: AccumulateOptions) -> Result<RawMoments> {
    for obs in &batch.observations {
        if obs.values.len() != grid.x().len() {
            return Err(Error::InvalidParameter("observation does not match grid".into()));
        }
    }
    let mut v = Accumulator::new(grid, lattice, options).nested(&[batch.len()], |j, out| {
        out.copy_from_slice(&batch.observations[j as usize].values);
        Ok(())
    })?;
    Ok(v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{synthesize_batch, SignalId};
    use crate::spectra::{bispectrum, dft};

    #[test]
    fn matches_direct_averages() {
        let g = Grid::new(16, 3).unwrap();
        let lat = g.default_lattice();
        let p = ModelParams::new(SignalId::F1, &g, 0.3, 0.2).unwrap();
        let batch = synthesize_batch(&p, &g, 7, 5).unwrap();
        let mom = accumulate_batch(&batch, &g, lat, AccumulateOptions { track_second_moment: true }).unwrap();
        let mut mean_b = BispectrumField::zeros(lat);
        let mut mean_ft = vec![Complex64::new(0.0, 0.0); g.omega().len()];
        for obs in &batch.observations {
            let s = dft(&obs.values, &g);
            let b = bispectrum(&s, &lat);
            for (a, v) in mean_b.values.iter_mut().zip(&b.values) {
                *a += v / 7.0;
            }
            for (a, v) in mean_ft.iter_mut().zip(&s.values) {
                *a += v / 7.0;
            }
        }
        let scale = mean_b.max_abs();
        for (a, b) in mom.mean_bispectrum.values.iter().zip(&mean_b.values) {
            assert!((a - b).norm() < 1e-12 * scale);
        }
        for (a, b) in mom.mean_ft.values.iter().zip(&mean_ft) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(mom.count, 7);
    }

    #[test]
    fn nested_snapshots_equal_fresh_runs() {
        let g = Grid::new(16, 3).unwrap();
        let lat = g.default_lattice();
        let p = ModelParams::new(SignalId::F2, &g, 0.5, 0.1).unwrap();
        let opts = AccumulateOptions::default();
        let nested = accumulate_model(&p, &g, lat, 11, &[100, 300], opts).unwrap();
        let fresh = accumulate_model(&p, &g, lat, 11, &[100], opts).unwrap();
        assert_eq!(nested[0].mean_bispectrum, fresh[0].mean_bispectrum);
        let again = accumulate_model(&p, &g, lat, 11, &[100, 300], opts).unwrap();
        assert_eq!(nested[1].mean_bispectrum, again[1].mean_bispectrum);
        assert_eq!(nested[1].mean_power, again[1].mean_power);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let g = Grid::new(16, 3).unwrap();
        let lat = g.default_lattice();
        let p = ModelParams::new(SignalId::F1, &g, 1.0, 0.2).unwrap();
        let opts = AccumulateOptions::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| accumulate_model(&p, &g, lat, 3, &[600], opts).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a[0].mean_bispectrum, b[0].mean_bispectrum);
        assert_eq!(a[0].mean_ft, b[0].mean_ft);
    }

    #[test]
    fn rejects_bad_sizes() {
        let g = Grid::new(16, 3).unwrap();
        let p = ModelParams::new(SignalId::F1, &g, 0.0, 0.0).unwrap();
        let opts = AccumulateOptions::default();
        assert!(accumulate_model(&p, &g, g.default_lattice(), 0, &[10, 10], opts).is_err());
        assert!(accumulate_model(&p, &g, g.default_lattice(), 0, &[], opts).is_err());
    }
}
