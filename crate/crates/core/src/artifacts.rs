//! Draw files on disk.
//!
//! A run directory holds `mu.csv` and `tau.csv` (one row per draw, one column
//! per unit), `sigma.csv` and `tau_scale.csv` (one value per draw), all in
//! standardized units, and `manifest.json` with the provenance record.
//! Values are written in shortest round-trip form, so reading a run back
//! gives bit-identical draws. `forests.json` is present only when forest
//! snapshots were kept.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::sampler::{ForestSnapshot, PosteriorDraws, Provenance};
use crate::trees::{Forest, ForestFile};

pub const MANIFEST: &str = "manifest.json";
pub const FORESTS: &str = "forests.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub files: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    mu: ForestFile,
    tau: ForestFile,
    tau_scale: f64,
    orientation: f64,
    homogeneous: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_matrix(path: &Path, header: &[String], values: &[f64], ncols: usize) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut line = String::new();
    for row in values.chunks(ncols.max(1)) {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a headed numeric CSV; returns (header, row-major values, rows).
fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let mut lines = open(path)?.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h
            .map_err(|e| Error::io(path, e))?
            .split(',')
            .map(str::to_string)
            .collect(),
        None => return Err(Error::Shape(format!("{} is empty", path.display()))),
    };
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: header.get(j).cloned().unwrap_or_default(),
                reason: format!("`{cell}` is not a number in {}", path.display()),
            })?;
            values.push(v);
        }
        if values.len() - before != header.len() {
            return Err(Error::Shape(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                r + 1,
                values.len() - before,
                header.len()
            )));
        }
        rows += 1;
    }
    Ok((header, values, rows))
}

fn unit_header(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i}")).collect()
}

/// Writes every draw file and the manifest into `dir` (created if needed).
pub fn write_draws(dir: &Path, draws: &PosteriorDraws) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = draws.n;
    let header = unit_header(n);
    write_matrix(&dir.join("mu.csv"), &header, &draws.mu, n)?;
    write_matrix(&dir.join("tau.csv"), &header, &draws.tau, n)?;
    write_matrix(&dir.join("sigma.csv"), &["sigma".into()], &draws.sigma, 1)?;
    write_matrix(&dir.join("tau_scale.csv"), &["tau_scale".into()], &draws.tau_scale, 1)?;
    let mut files: Vec<String> = ["mu.csv", "tau.csv", "sigma.csv", "tau_scale.csv"]
        .map(String::from)
        .to_vec();

    if let Some(snaps) = &draws.snapshots {
        let out: Vec<SnapshotFile> = snaps
            .iter()
            .map(|s| SnapshotFile {
                mu: ForestFile::from(&s.mu),
                tau: ForestFile::from(&s.tau),
                tau_scale: s.tau_scale,
                orientation: s.orientation,
                homogeneous: s.homogeneous,
            })
            .collect();
        let path = dir.join(FORESTS);
        let mut w = create(&path)?;
        serde_json::to_writer(&mut w, &out)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(FORESTS.into());
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        files,
        provenance: draws.provenance.clone(),
    };
    let path = dir.join(MANIFEST);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_reader(open(&path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads a run directory written by [`write_draws`].
pub fn read_draws(dir: &Path) -> Result<PosteriorDraws> {
    let manifest = read_manifest(dir)?;
    let prov = manifest.provenance;
    let (n, m) = (prov.n, prov.num_draws);

    let matrix = |name: &str, cols: usize| -> Result<Vec<f64>> {
        let path: PathBuf = dir.join(name);
        let (header, values, rows) = read_matrix(&path)?;
        if header.len() != cols || rows != m {
            return Err(Error::Shape(format!(
                "{}: expected {m} × {cols}, found {rows} × {}",
                path.display(),
                header.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: bad / cols + 1,
                column: header[bad % cols].clone(),
                reason: format!("non-finite draw in {}", path.display()),
            });
        }
        Ok(values)
    };
    let mu = matrix("mu.csv", n)?;
    let tau = matrix("tau.csv", n)?;
    let sigma = matrix("sigma.csv", 1)?;
    let tau_scale = matrix("tau_scale.csv", 1)?;

    let snapshots = if manifest.files.iter().any(|f| f == FORESTS) {
        let files: Vec<SnapshotFile> = serde_json::from_reader(open(&dir.join(FORESTS))?)?;
        let snaps = files
            .into_iter()
            .map(|f| {
                Ok(ForestSnapshot {
                    mu: Forest::try_from(f.mu)?,
                    tau: Forest::try_from(f.tau)?,
                    tau_scale: f.tau_scale,
                    orientation: f.orientation,
                    homogeneous: f.homogeneous,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if snaps.len() != m {
            return Err(Error::Shape(format!(
                "{FORESTS}: {} snapshots for {m} draws",
                snaps.len()
            )));
        }
        Some(snaps)
    } else {
        None
    };

    Ok(PosteriorDraws {
        n,
        mu,
        tau,
        sigma,
        tau_scale,
        provenance: prov,
        snapshots,
    })
}

/// Refuses data that differs from what the run was fitted on.
pub fn check_fingerprint(prov: &Provenance, data: &PanelDataset) -> Result<()> {
    let found = data.fingerprint();
    if found != prov.fingerprint {
        return Err(Error::Fingerprint {
            expected: prov.fingerprint.clone(),
            found,
        });
    }
    Ok(())
}
