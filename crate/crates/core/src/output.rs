//! CSV and plain-text artifacts, and the digest manifest that lists them.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use crate::dynamics::ArmTrajectory;
use crate::entanglement::{DecoherenceSweep, DistanceSweep};
use crate::error::{Error, Result};
use crate::fields::FieldSample;
use crate::interferometry::Separation;

/// Indices kept when decimating `n` samples by `stride`; the last sample is always kept.
fn decimated(n: usize, stride: usize) -> impl Iterator<Item = usize> {
    let stride = stride.max(1);
    (0..n).filter(move |&k| k % stride == 0 || k + 1 == n)
}

pub fn write_trajectory<W: Write>(out: W, arm: &ArmTrajectory, stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "y", "z", "vx", "vy", "vz", "branch"])?;
    let label = arm.branch.label();
    for k in decimated(arm.samples.len(), stride) {
        let s = &arm.samples[k];
        let (r, v) = (s.position, s.velocity);
        w.write_record(
            [s.t, r.x, r.y, r.z, v.x, v.y, v.z]
                .iter()
                .map(|x| x.to_string())
                .chain([label.to_string()]),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_separations<W: Write>(out: W, separations: &[Separation], stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "d_close", "d_far"])?;
    for k in decimated(separations.len(), stride) {
        let s = &separations[k];
        w.write_record([s.t.to_string(), s.d_close.to_string(), s.d_far.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_distance_sweep<W: Write>(out: W, sweep: &DistanceSweep) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d_um", "dphi_cp_rad", "dphi_dd_rad"])?;
    for r in &sweep.rows {
        w.write_record([(r.d * 1e6).to_string(), r.dphi_cp.to_string(), r.dphi_dd.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gamma_sweep<W: Write>(out: W, sweep: &DecoherenceSweep) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "W", "entangled"])?;
    for r in &sweep.rows {
        w.write_record([r.gamma.to_string(), r.w.to_string(), r.entangled.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A point where the field is probed, with the evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub position: Vector3<f64>,
    pub t: f64,
}

/// Read probe points from CSV with columns `x,y,z` and optionally `t` (SI units).
pub fn read_probe_points<R: Read>(input: R) -> Result<Vec<ProbePoint>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ix), Some(iy), Some(iz)) = (column("x"), column("y"), column("z")) else {
        return Err(Error::Parse("probe CSV needs columns x, y, z".into()));
    };
    let it = column("t");
    let mut points = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let get = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse()
                .map_err(|_| Error::Parse(format!("probe row {}: `{raw}` is not a number", line + 1)))
        };
        points.push(ProbePoint {
            position: Vector3::new(get(ix)?, get(iy)?, get(iz)?),
            t: match it {
                Some(i) => get(i)?,
                None => 0.0,
            },
        });
    }
    Ok(points)
}

pub fn write_field_probe<W: Write>(out: W, rows: &[(ProbePoint, FieldSample)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "z", "t", "Bx", "By", "Bz", "B2", "dB2dx", "dB2dy", "dB2dz"])?;
    for (p, f) in rows {
        let r = p.position;
        let g = f.grad_b_squared;
        w.write_record(
            [r.x, r.y, r.z, p.t, f.b.x, f.b.y, f.b.z, f.b_squared, g.x, g.y, g.z]
                .iter()
                .map(|x| x.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `key = value` lines, one per entry, in the given order.
pub fn key_values(entries: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestStatus {
    Complete,
    Partial { failed_stage: String },
}

/// Files written into one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub status: ManifestStatus,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            entries: Vec::new(),
            status: ManifestStatus::Complete,
        })
    }

    /// Write `bytes` to `name` inside the directory and record its digest.
    pub fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    /// Render through `f` into memory, then [`emit`](Self::emit).
    pub fn emit_with<F>(&mut self, name: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.emit(name, &buf)
    }

    pub fn digest_of(&self, name: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.path == name).map(|e| e.sha256.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = match &self.status {
            ManifestStatus::Complete => "status = complete\n".to_string(),
            ManifestStatus::Partial { failed_stage } => format!("status = partial\nfailed_stage = {failed_stage}\n"),
        };
        for e in &self.entries {
            let _ = writeln!(s, "{}  {}  {}", e.sha256, e.bytes, e.path);
        }
        s
    }

    /// Write `manifest.txt` next to the artifacts.
    pub fn finalize(&self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_NAME);
        fs::write(&path, self.render())?;
        Ok(path)
    }

    /// Re-hash every listed file and return the names whose content no longer matches.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.entries {
            let bytes = fs::read(self.dir.join(&e.path))?;
            if sha256_hex(&bytes) != e.sha256 {
                bad.push(e.path.clone());
            }
        }
        Ok(bad)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let mut status = ManifestStatus::Complete;
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("status = ") {
                if v == "partial" {
                    status = ManifestStatus::Partial {
                        failed_stage: String::new(),
                    };
                }
            } else if let Some(v) = line.strip_prefix("failed_stage = ") {
                status = ManifestStatus::Partial {
                    failed_stage: v.to_string(),
                };
            } else {
                let mut parts = line.splitn(3, "  ");
                let (Some(sha), Some(bytes), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Parse(format!("bad manifest line `{line}`")));
                };
                entries.push(ManifestEntry {
                    path: path.to_string(),
                    sha256: sha.to_string(),
                    bytes: bytes
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad size in `{line}`")))?,
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            status,
        })
    }
}
