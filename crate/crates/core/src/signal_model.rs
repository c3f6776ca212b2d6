//! Test signals and the generative model for observations.
//!
//! An observation is `y(x) = f((1 - tau)^{-1} (x - t)) + eps(x)` with `t`
//! uniform on `[-N/8, N/8]`, `tau` uniform on `[-sqrt(3) eta, sqrt(3) eta]` and
//! `eps` discretized white noise. Hidden signals live on `[-N/4, N/4]`; the
//! dilated copy is evaluated from the closed form, never resampled.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `1 / sqrt(12)`, the largest admissible dilation scale.
pub const ETA_MAX: f64 = 0.288_675_134_594_812_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalId {
    F1,
    F2,
    F3,
    F4,
}

impl SignalId {
    pub const ALL: [SignalId; 4] = [SignalId::F1, SignalId::F2, SignalId::F3, SignalId::F4];

    pub fn name(self) -> &'static str {
        match self {
            SignalId::F1 => "f1",
            SignalId::F2 => "f2",
            SignalId::F3 => "f3",
            SignalId::F4 => "f4",
        }
    }

    /// Unit-amplitude profile.
    pub fn profile(self, x: f64) -> f64 {
        match self {
            SignalId::F1 => (-5.0 * x * x).exp() * (8.0 * x).cos(),
            SignalId::F2 => (-5.0 * x * x).exp() * (12.0 * x).cos(),
            SignalId::F3 => sinc(4.0 * x),
            SignalId::F4 => {
                if x.abs() < PI / 4.0 {
                    (6.0 * x).cos()
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::fmt::Display for SignalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SignalId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(SignalId::F1),
            "f2" => Ok(SignalId::F2),
            "f3" => Ok(SignalId::F3),
            "f4" => Ok(SignalId::F4),
            other => Err(Error::InvalidParameter(format!("unknown signal {other:?}"))),
        }
    }
}

fn sinc(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        u.sin() / u
    }
}

/// Closed-form value `A * f_i(x)`.
pub fn eval_signal(id: SignalId, amplitude: f64, x: f64) -> f64 {
    amplitude * id.profile(x)
}

/// How the continuum white noise of variance `sigma^2` is put on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    /// Per-node variance `sigma^2 / dx`, the Riemann-sum discretization of
    /// white noise with covariance `sigma^2 delta(x - y)`.
    Continuum,
    /// Per-node variance `sigma^2`. This is the level at which the
    /// reported error curves are reproduced.
    #[default]
    PerSample,
}

impl NoiseConvention {
    pub fn node_variance(self, sigma: f64, grid: &Grid) -> f64 {
        match self {
            NoiseConvention::Continuum => sigma * sigma / grid.dx(),
            NoiseConvention::PerSample => sigma * sigma,
        }
    }
}

/// `C0`, `C1`, `C2` for a given dilation scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DilationConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl DilationConstants {
    pub fn from_eta(eta: f64) -> Self {
        let a = 3f64.sqrt() * eta;
        Self {
            c0: (1.0 - a) / (1.0 + a),
            c1: 2.0 * a,
            c2: 1.0 / (1.0 + a),
        }
    }
}

/// Generative parameters for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub signal: SignalId,
    pub amplitude: f64,
    pub sigma: f64,
    pub eta: f64,
    #[serde(default)]
    pub noise: NoiseConvention,
}

impl ModelParams {
    /// Parameters with the amplitude calibrated so the hidden signal has unit
    /// energy on the observation window.
    pub fn new(signal: SignalId, grid: &Grid, sigma: f64, eta: f64) -> Result<Self> {
        let amplitude = calibrate_amplitude(signal, grid)?;
        Self::with_amplitude(signal, amplitude, sigma, eta)
    }

    pub fn with_amplitude(signal: SignalId, amplitude: f64, sigma: f64, eta: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::InvalidParameter(format!("amplitude {amplitude}")));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma {sigma}")));
        }
        if !(0.0..=ETA_MAX + 1e-12).contains(&eta) {
            return Err(Error::InvalidEta(eta));
        }
        Ok(Self {
            signal,
            amplitude,
            sigma,
            eta: eta.min(ETA_MAX),
            noise: NoiseConvention::default(),
        })
    }

    /// Zero-amplitude model: observations are pure noise.
    pub fn pure_noise(sigma: f64, noise: NoiseConvention) -> Self {
        Self {
            signal: SignalId::F1,
            amplitude: 0.0,
            sigma,
            eta: 0.0,
            noise,
        }
    }

    pub fn with_noise(mut self, noise: NoiseConvention) -> Self {
        self.noise = noise;
        self
    }

    pub fn constants(&self) -> DilationConstants {
        DilationConstants::from_eta(self.eta)
    }

    /// Half-width `sqrt(3) eta` of the support of `tau`.
    pub fn tau_half_width(&self) -> f64 {
        3f64.sqrt() * self.eta
    }

    /// Hidden signal value, including the restriction to `[-N/4, N/4]`.
    pub fn hidden_value(&self, grid: &Grid, x: f64) -> f64 {
        if x.abs() <= grid.hidden_half_width() {
            eval_signal(self.signal, self.amplitude, x)
        } else {
            0.0
        }
    }
}

/// Real samples aligned with [`Grid::x`].
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub values: Vec<f64>,
}

impl Signal {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.x().len() {
            return Err(Error::InvalidParameter(format!(
                "signal has {} samples, grid has {}",
                values.len(),
                grid.x().len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            values: vec![0.0; grid.x().len()],
        }
    }

    /// `dx * sum |v|^2`.
    pub fn energy(&self, grid: &Grid) -> f64 {
        grid.dx() * self.values.iter().map(|v| v * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentDraw {
    pub t: f64,
    pub tau: f64,
}

impl LatentDraw {
    pub const IDENTITY: LatentDraw = LatentDraw { t: 0.0, tau: 0.0 };
}

/// Amplitude `A` with `int_{-N/2}^{N/2} |A f(x)|^2 dx = 1` on the grid.
pub fn calibrate_amplitude(id: SignalId, grid: &Grid) -> Result<f64> {
    let hw = grid.hidden_half_width();
    let energy = grid.dx()
        * grid
            .x()
            .iter()
            .filter(|x| x.abs() <= hw)
            .map(|&x| id.profile(x).powi(2))
            .sum::<f64>();
    if energy < 1e-14 {
        return Err(Error::ZeroEnergy(energy));
    }
    Ok(energy.sqrt().recip())
}

/// Hidden signal on the grid (`t = 0`, `tau = 0`, no noise).
pub fn sample_hidden(params: &ModelParams, grid: &Grid) -> Signal {
    Signal {
        values: grid.x().iter().map(|&x| params.hidden_value(grid, x)).collect(),
    }
}

/// Range of the translation law.
pub fn translation_half_width(grid: &Grid) -> f64 {
    grid.extent() / 8.0
}

fn check_latent(params: &ModelParams, grid: &Grid, latent: &LatentDraw) -> Result<()> {
    let a = params.tau_half_width();
    if latent.tau.abs() > a + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "tau = {} outside [-{a}, {a}]",
            latent.tau
        )));
    }
    if latent.tau >= 1.0 {
        return Err(Error::InvalidParameter(format!("tau = {} >= 1", latent.tau)));
    }
    let reach = latent.t.abs() + (1.0 - latent.tau) * grid.hidden_half_width();
    if reach > grid.extent() / 2.0 + 1e-12 {
        return Err(Error::SupportViolation(format!(
            "t = {}, tau = {} reaches |x| = {reach}",
            latent.t, latent.tau
        )));
    }
    Ok(())
}

/// Writes one observation into `out`.
pub fn render_observation<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &Grid,
    latent: &LatentDraw,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    check_latent(params, grid, latent)?;
    debug_assert_eq!(out.len(), grid.x().len());
    let scale = (1.0 - latent.tau).recip();
    for (o, &x) in out.iter_mut().zip(grid.x()) {
        *o = params.hidden_value(grid, scale * (x - latent.t));
    }
    if params.sigma > 0.0 {
        let sd = params.noise.node_variance(params.sigma, grid).sqrt();
        for o in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o += sd * z;
        }
    }
    Ok(())
}

pub fn synthesize_observation<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &Grid,
    latent: &LatentDraw,
    rng: &mut R,
) -> Result<Signal> {
    let mut values = vec![0.0; grid.x().len()];
    render_observation(params, grid, latent, rng, &mut values)?;
    Ok(Signal { values })
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for observation `j` of a batch seeded with `seed`.
pub fn observation_rng(seed: u64, j: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j);
    rng
}

pub fn draw_latent<R: Rng + ?Sized>(params: &ModelParams, grid: &Grid, rng: &mut R) -> LatentDraw {
    let tw = translation_half_width(grid);
    let a = params.tau_half_width();
    let t = rng.random_range(-tw..=tw);
    let tau = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    LatentDraw { t, tau }
}

/// Renders observation `j` of the batch `(params, seed)`.
pub fn render_indexed(
    params: &ModelParams,
    grid: &Grid,
    seed: u64,
    j: u64,
    out: &mut [f64],
) -> Result<LatentDraw> {
    let mut rng = observation_rng(seed, j);
    let latent = draw_latent(params, grid, &mut rng);
    render_observation(params, grid, &latent, &mut rng, out)?;
    Ok(latent)
}

#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub observations: Vec<Signal>,
    pub latents: Vec<LatentDraw>,
}

impl ObservationBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// `m` independent observations. Observation `j` depends only on
/// `(params, seed, j)`, so batches are prefixes of one another.
pub fn synthesize_batch(params: &ModelParams, grid: &Grid, m: usize, seed: u64) -> Result<ObservationBatch> {
    if m == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    let mut observations = Vec::with_capacity(m);
    let mut latents = Vec::with_capacity(m);
    for j in 0..m {
        let mut values = vec![0.0; grid.x().len()];
        latents.push(render_indexed(params, grid, seed, j as u64, &mut values)?);
        observations.push(Signal { values });
    }
    Ok(ObservationBatch {
        observations,
        latents,
    })
}
