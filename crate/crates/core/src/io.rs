//! CSV formats for signals, spectra, bispectra, observation batches and
//! eta profiles.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Grid, Lattice};
use crate::signal_model::{LatentDraw, ObservationBatch, Signal};
use crate::spectra::BispectrumField;

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every data row as parsed floats, after checking the header.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if !header.is_empty() && found.iter().collect::<Vec<_>>() != header {
        return Err(Error::parse(path, 1, format!("expected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 2, format!("not a number: {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_signal(path: &Path, grid: &Grid, signal: &Signal) -> Result<()> {
    write_rows(
        path,
        &["x", "value"],
        grid.x().iter().zip(&signal.values).map(|(x, v)| [x.to_string(), v.to_string()]),
    )
}

pub fn read_signal(path: &Path, grid: &Grid) -> Result<Signal> {
    let rows = read_rows(path, &["x", "value"])?;
    Signal::new(grid, rows.iter().map(|r| r[1]).collect())
}

pub fn write_power(path: &Path, grid: &Grid, power: &[f64]) -> Result<()> {
    write_rows(
        path,
        &["omega", "power"],
        grid.omega().iter().zip(power).map(|(w, p)| [w.to_string(), p.to_string()]),
    )
}

pub fn read_power(path: &Path, grid: &Grid) -> Result<Vec<f64>> {
    let rows = read_rows(path, &["omega", "power"])?;
    if rows.len() != grid.omega().len() {
        return Err(Error::parse(
            path,
            rows.len() + 1,
            format!("expected {} frequencies, got {}", grid.omega().len(), rows.len()),
        ));
    }
    Ok(rows.iter().map(|r| r[1]).collect())
}

pub fn write_profile(path: &Path, profile: &[(f64, f64)]) -> Result<()> {
    write_rows(
        path,
        &["eta_candidate", "loss"],
        profile.iter().map(|(e, l)| [e.to_string(), l.to_string()]),
    )
}

/// One row per observation: the latent draw, then the samples.
pub fn write_batch(path: &Path, batch: &ObservationBatch) -> Result<()> {
    let n = batch.observations.first().map_or(0, |o| o.values.len());
    let mut header = vec!["t".to_string(), "tau".to_string()];
    header.extend((0..n).map(|i| format!("y{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        path,
        &header,
        batch.observations.iter().zip(&batch.latents).map(|(o, l)| {
            [l.t.to_string(), l.tau.to_string()]
                .into_iter()
                .chain(o.values.iter().map(|v| v.to_string()))
                .collect::<Vec<_>>()
        }),
    )
}

pub fn read_batch(path: &Path, grid: &Grid) -> Result<ObservationBatch> {
    let rows = read_rows(path, &[])?;
    let mut batch = ObservationBatch {
        observations: Vec::with_capacity(rows.len()),
        latents: Vec::with_capacity(rows.len()),
    };
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != grid.x().len() + 2 {
            return Err(Error::parse(path, i + 2, format!("expected {} columns", grid.x().len() + 2)));
        }
        batch.latents.push(LatentDraw { t: row[0], tau: row[1] });
        batch.observations.push(Signal::new(grid, row[2..].to_vec())?);
    }
    Ok(batch)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the unmasked entries as `omega1,omega2,re,im` and a `<path>.meta`
/// sidecar with the grid and lattice parameters.
pub fn write_bispectrum(path: &Path, grid: &Grid, field: &BispectrumField) -> Result<()> {
    let lat = field.lattice;
    let meta = format!(
        "n = {}\nell = {}\nstride = {}\nhalf = {}\n",
        grid.n(),
        grid.ell(),
        lat.stride(),
        lat.half()
    );
    let mp = meta_path(path);
    std::fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))?;
    let n = field.n();
    write_rows(
        path,
        &["omega1", "omega2", "re", "im"],
        (0..n * n).filter(|&i| field.mask[i]).map(|i| {
            let v = field.values[i];
            [
                lat.freq(lat.signed(i / n)).to_string(),
                lat.freq(lat.signed(i % n)).to_string(),
                v.re.to_string(),
                v.im.to_string(),
            ]
        }),
    )
}

/// Reads a bispectrum written by [`write_bispectrum`] and the grid it was
/// computed on.
pub fn read_bispectrum(path: &Path) -> Result<(Grid, BispectrumField)> {
    let mp = meta_path(path);
    let file = File::open(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut keys = std::collections::HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&mp, i + 1, "expected key = value"))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::parse(&mp, i + 1, format!("not an integer: {}", v.trim())))?;
        keys.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| keys.get(k).copied().ok_or_else(|| Error::parse(&mp, 0, format!("missing key {k}")));
    let grid = Grid::new(get("n")?, get("ell")? as u32)?;
    let lat = Lattice::new(&grid, get("stride")?, get("half")?)?;
    let mut field = BispectrumField::zeros(lat);
    let n = field.n();
    let h = lat.half() as i64;
    let rows = read_rows(path, &["omega1", "omega2", "re", "im"])?;
    for (i, r) in rows.iter().enumerate() {
        let m1 = (r[0] / lat.step()).round() as i64;
        let m2 = (r[1] / lat.step()).round() as i64;
        if m1.abs() > h || m2.abs() > h {
            return Err(Error::parse(path, i + 2, "frequency outside the lattice"));
        }
        let idx = lat.index(m1) * n + lat.index(m2);
        if !field.mask[idx] {
            return Err(Error::parse(path, i + 2, "entry on a masked pair"));
        }
        field.values[idx] = Complex64::new(r[2], r[3]);
    }
    Ok((grid, field))
}

/// Writes text to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{synthesize_batch, ModelParams, SignalId, ETA_MAX};
    use crate::spectra::{bispectrum, dft};

    #[test]
    fn bispectrum_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(16, 2).unwrap();
        let lat = Lattice::new(&g, 1, 20).unwrap();
        let p = ModelParams::new(SignalId::F2, &g, 0.3, 0.1).unwrap();
        let batch = synthesize_batch(&p, &g, 1, 3).unwrap();
        let b = bispectrum(&dft(&batch.observations[0].values, &g), &lat);
        let path = dir.path().join("b.csv");
        write_bispectrum(&path, &g, &b).unwrap();
        let (g2, b2) = read_bispectrum(&path).unwrap();
        assert_eq!(g2, g);
        assert_eq!(b2, b);
    }

    #[test]
    fn batch_and_signal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::standard();
        let p = ModelParams::new(SignalId::F1, &g, 0.5, ETA_MAX).unwrap();
        let batch = synthesize_batch(&p, &g, 3, 9).unwrap();
        let path = dir.path().join("obs.csv");
        write_batch(&path, &batch).unwrap();
        let back = read_batch(&path, &g).unwrap();
        assert_eq!(back.observations, batch.observations);
        assert_eq!(back.latents, batch.latents);

        let sp = dir.path().join("s.csv");
        write_signal(&sp, &g, &batch.observations[1]).unwrap();
        assert_eq!(read_signal(&sp, &g).unwrap(), batch.observations[1]);
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "w,p\n0,1\n").unwrap();
        assert!(matches!(read_power(&path, &Grid::standard()), Err(Error::Parse { .. })));
        assert!(matches!(
            read_power(&dir.path().join("missing.csv"), &Grid::standard()),
            Err(Error::Io { .. })
        ));
    }
}
