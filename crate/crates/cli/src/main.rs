use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dilation_mra::estimate::{estimate_sigma_from_power, joint_estimate_eta_power, EtaSearchConfig};
use dilation_mra::harness::{emit_outputs, load_config, preset, run_experiment, Metric, PRESET_NAMES};
use dilation_mra::invert::{aligned_relative_error, invert, ApsConfig, InversionMethod};
use dilation_mra::io;
use dilation_mra::moments::{accumulate_batch, accumulate_model, AccumulateOptions, RawMoments};
use dilation_mra::signal_model::{sample_hidden, synthesize_batch};
use dilation_mra::unbias::{default_smoothing_width, solve_bispectrum_report, solve_power};
use dilation_mra::{CenteredMoments, Grid, ModelParams, NoiseConvention, SignalId, SolverConfig, ETA_MAX};

#[derive(Parser, Debug)]
#[command(name = "dilation-mra", version, about = "Signal recovery from randomly translated, dilated, noisy copies")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Extend sample sizes up to 2^20.
    #[arg(long, global = true)]
    full: bool,
}

/// Where observations come from: a CSV written by `synth`, or the model.
#[derive(Args, Debug)]
struct Source {
    /// Observation CSV; when absent, observations are drawn from the model.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "f1")]
    signal: SignalId,
    /// True noise level used to draw observations.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = ETA_MAX)]
    eta: f64,
    #[arg(long, short, default_value_t = 1 << 14)]
    m: usize,
    #[arg(long, value_enum, default_value = "per-sample")]
    noise: NoiseArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum NoiseArg {
    PerSample,
    Continuum,
}

impl From<NoiseArg> for NoiseConvention {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::PerSample => NoiseConvention::PerSample,
            NoiseArg::Continuum => NoiseConvention::Continuum,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw observations and write them with the hidden signal.
    Synth(Source),
    /// Accumulate moments and write the unbiased bispectrum and power spectrum.
    RecoverBispectrum {
        #[command(flatten)]
        source: Source,
        /// Estimate sigma and eta instead of using the true values.
        #[arg(long)]
        empirical: bool,
        /// Write the noise-centered mean instead of the unbiased estimate.
        #[arg(long)]
        no_unbias: bool,
    },
    /// Estimate sigma and eta; writes the eta profile and power spectrum.
    Estimate(Source),
    /// Invert a bispectrum and power spectrum into a signal.
    Invert {
        #[arg(long)]
        bispectrum: PathBuf,
        #[arg(long)]
        power: PathBuf,
        #[arg(long, default_value = "aps")]
        method: InversionMethod,
        /// Signal CSV to report the aligned relative error against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run a named preset or a TOML config.
    Experiment {
        /// Preset name or path to a config file.
        target: String,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if cli.common.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    if cli.common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    std::fs::create_dir_all(&cli.common.out_dir)
        .with_context(|| format!("creating {}", cli.common.out_dir.display()))?;
    let grid = Grid::standard();
    match cli.command {
        Command::Synth(src) => synth(&cli.common, &grid, &src),
        Command::RecoverBispectrum {
            source,
            empirical,
            no_unbias,
        } => recover(&cli.common, &grid, &source, empirical, no_unbias),
        Command::Estimate(src) => estimate(&cli.common, &grid, &src),
        Command::Invert {
            bispectrum,
            power,
            method,
            reference,
        } => invert_cmd(&cli.common, &bispectrum, &power, method, reference.as_deref()),
        Command::Experiment { target, trials } => experiment(&cli.common, &grid, &target, trials),
    }
}

fn model(src: &Source, grid: &Grid) -> Result<ModelParams> {
    Ok(ModelParams::new(src.signal, grid, src.sigma, src.eta)?.with_noise(src.noise.into()))
}

fn synth(common: &Common, grid: &Grid, src: &Source) -> Result<()> {
    let params = model(src, grid)?;
    let batch = synthesize_batch(&params, grid, src.m, common.seed)?;
    let obs = common.out_dir.join("observations.csv");
    io::write_batch(&obs, &batch)?;
    let hidden = common.out_dir.join("hidden.csv");
    io::write_signal(&hidden, grid, &sample_hidden(&params, grid))?;
    println!("wrote {} observations to {}", batch.len(), obs.display());
    println!("hidden signal: {}", hidden.display());
    Ok(())
}

fn moments(common: &Common, grid: &Grid, src: &Source) -> Result<RawMoments> {
    let lattice = grid.default_lattice();
    match &src.input {
        Some(path) => {
            let batch = io::read_batch(path, grid)?;
            if batch.is_empty() {
                bail!("{} holds no observations", path.display());
            }
            Ok(accumulate_batch(&batch, grid, lattice, AccumulateOptions::default())?)
        }
        None => {
            let params = model(src, grid)?;
            let mut raws = accumulate_model(&params, grid, lattice, common.seed, &[src.m], AccumulateOptions::default())?;
            Ok(raws.remove(0))
        }
    }
}

fn recover(common: &Common, grid: &Grid, src: &Source, empirical: bool, no_unbias: bool) -> Result<()> {
    let raw = moments(common, grid, src)?;
    let noise = src.noise.into();
    let (sigma, eta, est_power) = if empirical {
        let s = estimate_sigma_from_power(&raw.mean_power, grid, noise);
        let centered = CenteredMoments::from_raw(&raw, s, noise, grid);
        let width = default_smoothing_width(s, raw.count, grid);
        let est = joint_estimate_eta_power(&centered.mean_power, grid, &EtaSearchConfig::new(width))?;
        println!("sigma_hat = {s}\neta_hat = {}", est.eta);
        (s, est.eta, Some(est.power))
    } else {
        (src.sigma, src.eta, None)
    };
    let centered = CenteredMoments::from_raw(&raw, sigma, noise, grid);
    let cfg = SolverConfig {
        verbose: common.verbose,
        ..SolverConfig::default()
    }
    .with_width(default_smoothing_width(sigma, raw.count, grid));
    let (b, power) = if no_unbias || eta == 0.0 {
        (centered.mean_bispectrum.clone(), centered.mean_power.clone())
    } else {
        let (b, report) = solve_bispectrum_report(&centered.mean_bispectrum, eta, &cfg, Some(grid))?;
        println!("solver: {} iterations, relative residual {:e}", report.iterations, report.residual);
        let p = match est_power {
            Some(p) => p,
            None => solve_power(&centered.mean_power, eta, grid, &cfg)?,
        };
        (b, p)
    };
    let bpath = common.out_dir.join("bispectrum.csv");
    io::write_bispectrum(&bpath, grid, &b)?;
    let ppath = common.out_dir.join("power.csv");
    io::write_power(&ppath, grid, &power)?;
    println!("M = {}\nbispectrum: {}\npower spectrum: {}", raw.count, bpath.display(), ppath.display());
    Ok(())
}

fn estimate(common: &Common, grid: &Grid, src: &Source) -> Result<()> {
    let raw = moments(common, grid, src)?;
    let noise = src.noise.into();
    let sigma = estimate_sigma_from_power(&raw.mean_power, grid, noise);
    let centered = CenteredMoments::from_raw(&raw, sigma, noise, grid);
    let width = default_smoothing_width(sigma, raw.count, grid);
    println!("sigma_hat = {sigma}");
    match joint_estimate_eta_power(&centered.mean_power, grid, &EtaSearchConfig::new(width)) {
        Ok(est) => {
            println!("eta_hat = {}", est.eta);
            io::write_profile(&common.out_dir.join("eta_profile.csv"), &est.profile)?;
            io::write_power(&common.out_dir.join("power.csv"), grid, &est.power)?;
            Ok(())
        }
        Err(dilation_mra::Error::SearchFailure { profile }) => {
            let path = common.out_dir.join("eta_profile.csv");
            io::write_profile(&path, &profile)?;
            bail!("eta profile is not unimodal; see {}", path.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn invert_cmd(common: &Common, bpath: &Path, ppath: &Path, method: InversionMethod, reference: Option<&Path>) -> Result<()> {
    let (grid, b) = io::read_bispectrum(bpath)?;
    let power = io::read_power(ppath, &grid)?;
    let signal = invert(&b, &power, &grid, method, &ApsConfig::default())?;
    let out = common.out_dir.join("signal.csv");
    io::write_signal(&out, &grid, &signal)?;
    println!("signal: {}", out.display());
    if let Some(r) = reference {
        let reference = io::read_signal(r, &grid)?;
        println!("aligned relative error = {}", aligned_relative_error(&reference, &signal, &grid)?);
    }
    Ok(())
}

fn experiment(common: &Common, grid: &Grid, target: &str, trials: Option<usize>) -> Result<()> {
    let mut spec = match preset(target, common.full) {
        Some(s) => s,
        None => {
            let path = Path::new(target);
            if !path.exists() {
                bail!("{target} is neither a preset ({}) nor a config file", PRESET_NAMES.join(", "));
            }
            let mut s = load_config(path)?;
            if s.name.is_empty() {
                s.name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            }
            s
        }
    };
    if common.seed != 0 {
        spec.seed = common.seed;
    }
    if let Some(t) = trials {
        spec.trials = t;
    }
    let table = run_experiment(&spec, grid)?;
    let paths = emit_outputs(&table, &common.out_dir)?;
    for (metric, name) in [(Metric::Bispectrum, "bispectrum"), (Metric::Signal, "signal"), (Metric::EtaRelative, "eta")] {
        for (key, pts) in table.curves(metric) {
            if let Ok(slope) = dilation_mra::harness::fit_loglog_slope(&pts) {
                println!("{name} {}: slope {slope:.3}", key.label());
            }
        }
    }
    if table.failures() > 0 {
        println!("{} rows failed; see the failure column", table.failures());
    }
    println!("results: {}", paths.results.display());
    println!("manifest: {}", paths.manifest.display());
    for p in &paths.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}
