//! Persisted artifacts: CSV series, self-describing binary field snapshots,
//! JSON reports and the run manifest.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Space};
use crate::series::DiagnosticSeries;

const FIELD_MAGIC: &[u8; 8] = b"DSFIELD1";

/// Write a field as little-endian f64 pairs with a self-describing header.
pub fn write_field<const P: usize>(path: &Path, field: &Field<P>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&(P as u32).to_le_bytes())?;
    w.write_all(&(field.grid.d as u32).to_le_bytes())?;
    w.write_all(&(field.grid.n as u64).to_le_bytes())?;
    w.write_all(&field.grid.box_half_length.to_le_bytes())?;
    let space_tag: u8 = match field.space {
        Space::Position => 0,
        Space::Momentum => 1,
    };
    w.write_all(&[space_tag])?;
    w.write_all(&(field.values.len() as u64).to_le_bytes())?;
    for v in &field.values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field<const P: usize>(path: &Path) -> Result<Field<P>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::validation("not a field snapshot file"));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let p = u32::from_le_bytes(b4) as usize;
    if p != P {
        return Err(Error::validation(format!(
            "snapshot holds a {p}-particle field, expected {P}"
        )));
    }
    f.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    f.read_exact(&mut b8)?;
    let l = f64::from_le_bytes(b8);
    let mut tag = [0u8; 1];
    f.read_exact(&mut tag)?;
    let space = match tag[0] {
        0 => Space::Position,
        1 => Space::Momentum,
        _ => return Err(Error::validation("bad space tag")),
    };
    f.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let grid = GridSpec::new(d, n, l)?;
    let mut values = Vec::with_capacity(len);
    let mut pair = [0u8; 16];
    for _ in 0..len {
        f.read_exact(&mut pair)?;
        let re = f64::from_le_bytes(pair[..8].try_into().unwrap());
        let im = f64::from_le_bytes(pair[8..].try_into().unwrap());
        values.push(num_complex::Complex64::new(re, im));
    }
    Field::<P>::from_values(&grid, space, values)
}

/// Series CSV: t, integrand, running_integral, dt_weight (= d ln t step).
pub fn write_series_csv(path: &Path, series: &DiagnosticSeries) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,integrand,running_integral,dt_weight")?;
    for i in 0..series.times.len() {
        let weight = if i == 0 {
            0.0
        } else {
            (series.times[i] / series.times[i - 1]).ln()
        };
        writeln!(
            w,
            "{},{},{},{}",
            series.times[i], series.integrand[i], series.running_integral[i], weight
        )?;
    }
    Ok(())
}

/// Per-step scalar CSV: t, norm, boundary_mass.
pub fn write_step_log_csv(path: &Path, log: &[crate::dynamics::StepRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,norm,boundary_mass")?;
    for rec in log {
        writeln!(w, "{},{},{}", rec.t, rec.norm, rec.boundary_mass)?;
    }
    Ok(())
}

/// Generic two-column CSV.
pub fn write_xy_csv(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for (a, b) in rows {
        writeln!(w, "{a},{b}")?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("{e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Subsampled audit table of a built localization function:
/// y1, y2, R, dR1, dR2, h11, h12, h22 per row.
pub fn write_graf_table(
    path: &Path,
    gf: &crate::graf::GrafFunction,
    stride: usize,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "y1,y2,r,dr1,dr2,h11,h12,h22")?;
    let n = gf.grid.n_axis;
    let stride = stride.max(1);
    for j1 in (0..n).step_by(stride) {
        for j2 in (0..n).step_by(stride) {
            let y1 = gf.grid.coord(j1);
            let y2 = gf.grid.coord(j2);
            let e = gf.evaluator.eval_point(y1, y2, &gf.options);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                y1, y2, e.r, e.grad[0], e.grad[1], e.hess[0], e.hess[1], e.hess[2]
            )?;
        }
    }
    Ok(())
}

/// Manifest of a run: scenario echo, code version, checksums of the inputs,
/// file index and wall-clock bookkeeping.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub scenario_toml: String,
    pub scenario_sha256: String,
    pub grid_sha256: String,
    pub outputs: Vec<String>,
    pub steps_taken: u64,
    pub wall_clock_seconds: f64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(scenario_toml: String, warnings: Vec<String>) -> Self {
        let scenario_sha256 = sha256_hex(scenario_toml.as_bytes());
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_toml,
            scenario_sha256,
            grid_sha256: String::new(),
            outputs: Vec::new(),
            steps_taken: 0,
            wall_clock_seconds: 0.0,
            warnings,
        }
    }

    pub fn set_grid(&mut self, grid: &GridSpec) {
        let text = format!("{}:{}:{:.17e}", grid.d, grid.n, grid.box_half_length);
        self.grid_sha256 = sha256_hex(text.as_bytes());
    }

    pub fn record(&mut self, path: &Path) {
        if let Some(name) = path.file_name() {
            self.outputs.push(name.to_string_lossy().into_owned());
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
