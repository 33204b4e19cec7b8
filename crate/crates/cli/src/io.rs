//! Raw little-endian volume and projection files with JSON sidecars,
//! metric tables and the run manifest.

use crate::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use tomoalign::driver::{IterationRecord, StopReason};
use tomoalign::{AlignStack, AlignWeights, GridShape, Param, ProjectionStack, Roi, Volume};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawKind {
    Volume,
    Projections,
}

/// Describes a raw `.f64` file: x fastest, then y, then z (or projection index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: RawKind,
    pub dtype: String,
    /// `[nx, ny, nz]` for volumes, `[width, height, n_proj]` for projections.
    pub extents: [usize; 3],
    pub spacing: f64,
    pub data_file: String,
    #[serde(default)]
    pub nominal_angles_rad: Option<Vec<f64>>,
    #[serde(default)]
    pub roi: Option<Roi>,
    #[serde(default)]
    pub detector: Option<[usize; 2]>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema(format!("{} at `{}`: {}", path.display(), e.path(), e.inner())))
}

/// Writes `<stem>.f64` and `<stem>.json` into `dir`; returns both paths.
pub fn write_raw(dir: &Path, stem: &str, data: &[f64], mut sidecar: Sidecar) -> Result<[PathBuf; 2], CliError> {
    let bin = dir.join(format!("{stem}.f64"));
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| io_err(&bin, e))?;
    sidecar.data_file = format!("{stem}.f64");
    write_json(&json, &sidecar)?;
    Ok([bin, json])
}

/// Reads a raw file through its sidecar.
#[allow(dead_code)]
pub fn read_raw(sidecar_path: &Path) -> Result<(Sidecar, Vec<f64>), CliError> {
    let sidecar: Sidecar = read_json(sidecar_path)?;
    if sidecar.dtype != "f64le" {
        return Err(CliError::Schema(format!("{}: unsupported dtype {}", sidecar_path.display(), sidecar.dtype)));
    }
    let bin = sidecar_path.with_file_name(&sidecar.data_file);
    let bytes = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
    let expected = sidecar.extents.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(io_err(&bin, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((sidecar, data))
}

pub fn volume_sidecar(u: &Volume<f64>) -> Sidecar {
    let s = u.shape();
    Sidecar {
        kind: RawKind::Volume,
        dtype: "f64le".into(),
        extents: [s.nx, s.ny, s.nz],
        spacing: 1.0,
        data_file: String::new(),
        nominal_angles_rad: None,
        roi: None,
        detector: None,
    }
}

pub fn projection_sidecar(p: &ProjectionStack<f64>, detector: [usize; 2]) -> Sidecar {
    Sidecar {
        kind: RawKind::Projections,
        dtype: "f64le".into(),
        extents: [p.width, p.height, p.n_proj()],
        spacing: 1.0,
        data_file: String::new(),
        nominal_angles_rad: Some(p.nominal_angles.clone()),
        roi: p.roi,
        detector: Some(detector),
    }
}

#[allow(dead_code)]
pub fn read_volume(sidecar_path: &Path) -> Result<Volume<f64>, CliError> {
    let (s, data) = read_raw(sidecar_path)?;
    if s.kind != RawKind::Volume {
        return Err(CliError::Schema(format!("{}: not a volume", sidecar_path.display())));
    }
    let [nx, ny, nz] = s.extents;
    Ok(Volume::from_vec(GridShape::new(nx, ny, nz), data))
}

#[allow(dead_code)]
pub fn read_projections(sidecar_path: &Path) -> Result<ProjectionStack<f64>, CliError> {
    let (s, data) = read_raw(sidecar_path)?;
    let [w, h, n] = s.extents;
    let angles = s.nominal_angles_rad.unwrap_or_default();
    if s.kind != RawKind::Projections || angles.len() != n {
        return Err(CliError::Schema(format!("{}: not a projection stack", sidecar_path.display())));
    }
    let images = data.chunks_exact(w * h).map(<[f64]>::to_vec).collect();
    Ok(ProjectionStack::from_images(images, w, h, angles, s.roi))
}

/// Everything `export-plots` and `metrics` need from a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub alpha: f64,
    pub stop: StopReason,
    pub weights: AlignWeights<f64>,
    pub records: Vec<IterationRecord<f64>>,
    pub alignment: AlignStack<f64>,
    #[serde(default)]
    pub true_alignment: Option<AlignStack<f64>>,
}

/// Floats with 17 significant digits; empty cell for missing values.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const METRIC_COLUMNS: [&str; 18] = [
    "iteration",
    "epsilon",
    "alpha",
    "recon_iterations",
    "recon_tolerance",
    "optimality",
    "objective",
    "residual",
    "max_increment",
    "halvings",
    "stalls",
    "recon_error",
    "shift_rms",
    "theta_xy_rms",
    "theta_yz_rms",
    "theta_zx_rms",
    "non_tomo_rms",
    "weighted_rms",
];

fn metric_row(r: &IterationRecord<f64>) -> Vec<String> {
    let e = r.align_error;
    vec![
        r.iteration.to_string(),
        fmt_f64(r.epsilon),
        fmt_f64(r.alpha),
        r.recon_iterations.to_string(),
        fmt_f64(r.recon_tolerance),
        fmt_f64(r.optimality),
        fmt_f64(r.objective),
        fmt_f64(r.residual),
        fmt_f64(r.max_increment),
        r.halvings.to_string(),
        r.stalls.to_string(),
        fmt_opt(r.recon_error),
        fmt_opt(e.map(|m| m.shift_rms)),
        fmt_opt(e.map(|m| m.theta_xy_rms)),
        fmt_opt(e.map(|m| m.theta_yz_rms)),
        fmt_opt(e.map(|m| m.theta_zx_rms)),
        fmt_opt(e.map(|m| m.non_tomo_rms)),
        fmt_opt(e.map(|m| m.weighted_rms)),
    ]
}

pub fn write_metrics_csv<W: std::io::Write>(out: W, records: &[IterationRecord<f64>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for r in records {
        w.write_record(metric_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per projection: index, nominal angle, then the six parameters
/// (shifts in voxels, angles in radians).
pub fn write_alignment_csv<W: std::io::Write>(out: W, a: &AlignStack<f64>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["projection".to_string(), "nominal_angle_rad".to_string()];
    header.extend(Param::ALL.iter().map(|p| p.name().to_string()));
    w.write_record(&header)?;
    for (i, (p, t)) in a.params.iter().zip(&a.nominal_angles).enumerate() {
        let mut row = vec![i.to_string(), fmt_f64(*t)];
        row.extend(p.to_array().iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, f: impl FnOnce(fs::File) -> Result<(), csv::Error>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f(file).map_err(|e| io_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn sha256_str(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub misalignment: u64,
    pub noise: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub threads: usize,
    pub deterministic: bool,
    /// Regularization weight actually used, when a reconstruction ran.
    pub alpha: Option<f64>,
    pub files: Vec<FileEntry>,
}

pub fn file_entries(dir: &Path, files: &[PathBuf]) -> Result<Vec<FileEntry>, CliError> {
    files
        .iter()
        .map(|p| {
            let meta = fs::metadata(p).map_err(|e| io_err(p, e))?;
            Ok(FileEntry {
                name: p.strip_prefix(dir).unwrap_or(p).display().to_string(),
                bytes: meta.len(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_volume_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let shape = GridShape::new(3, 4, 5);
        let u = Volume::from_fn(shape, |x, y, z| (x as f64 + 0.1).powf(y as f64 + 0.3) / (z as f64 + 7.0) - 1e-300);
        let [_, json] = write_raw(dir.path(), "vol", u.data(), volume_sidecar(&u)).unwrap();
        let back = read_volume(&json).unwrap();
        assert_eq!(back.shape(), shape);
        assert!(back.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn raw_projections_round_trip_with_roi() {
        let dir = tempfile::tempdir().unwrap();
        let roi = Roi { offset: [1, 2], extent: [3, 2] };
        let images = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![-1.0, 2.5, 1e-17, 3.0, 4.0, 5.0]];
        let p = ProjectionStack::from_images(images, 3, 2, vec![0.0, 1.3], Some(roi));
        let [_, json] = write_raw(dir.path(), "proj", &p.images, projection_sidecar(&p, [6, 6])).unwrap();
        assert_eq!(read_projections(&json).unwrap(), p);
    }

    #[test]
    fn truncated_data_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let u = Volume::<f64>::filled(GridShape::cube(2), 1.0);
        let [bin, json] = write_raw(dir.path(), "v", u.data(), volume_sidecar(&u)).unwrap();
        fs::write(&bin, [0u8; 12]).unwrap();
        assert!(matches!(read_volume(&json), Err(CliError::Io(_))));
    }

    #[test]
    fn floats_print_with_seventeen_digits() {
        let v = 0.1f64 + 0.2;
        let s = fmt_f64(v);
        assert_eq!(s.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
        assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    }
}
