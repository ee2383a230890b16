//! Text formats: point cloud files and dataset manifests.
//!
//! Cloud format (`pcd/1`), bit-exact:
//!
//! ```text
//! pcd/1
//! n <N> d <D> label <-1|class>
//! <N lines of D whitespace-separated floats, 9 significant digits>
//! ```
//!
//! Manifests list `path label` per line with paths relative to the manifest
//! file.

use crate::geom::{GeomError, PointCloud};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Serialize a cloud to the text format (9 significant digits).
pub fn cloud_to_string(cloud: &PointCloud) -> String {
    let label = cloud
        .label
        .map(|l| l as i64)
        .unwrap_or(-1);
    let mut out = String::from("pcd/1\n");
    let _ = writeln!(out, "n {} d 3 label {}", cloud.len(), label);
    for p in cloud.points() {
        let _ = writeln!(out, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, cloud_to_string(cloud)).map_err(io_err(path))
}

pub fn cloud_from_string(text: &str) -> Result<PointCloud, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if header.trim_end() != "pcd/1" {
        return Err(parse_err(1, format!("bad header {header:?}, expected pcd/1")));
    }
    let meta = lines.next().ok_or_else(|| parse_err(2, "missing size line"))?;
    let toks: Vec<&str> = meta.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "n" || toks[2] != "d" || toks[4] != "label" {
        return Err(parse_err(2, "expected `n <N> d <D> label <L>`"));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| parse_err(2, format!("bad point count {:?}", toks[1])))?;
    let d: usize = toks[3]
        .parse()
        .map_err(|_| parse_err(2, format!("bad dimension {:?}", toks[3])))?;
    if d != 3 {
        return Err(parse_err(2, format!("unsupported dimension {d}, expected 3")));
    }
    let label_raw: i64 = toks[5]
        .parse()
        .map_err(|_| parse_err(2, format!("bad label {:?}", toks[5])))?;
    if label_raw < -1 {
        return Err(parse_err(2, format!("bad label {label_raw}")));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let lno = 3 + i;
        let line = lines
            .next()
            .ok_or_else(|| parse_err(lno, format!("expected {n} points, file ends early")))?;
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(lno, "bad float"))?;
        if coords.len() != 3 {
            return Err(parse_err(
                lno,
                format!("expected 3 coordinates, found {}", coords.len()),
            ));
        }
        points.push([coords[0], coords[1], coords[2]]);
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(parse_err(3 + n, "trailing content after point list"));
        }
    }
    let label = (label_raw >= 0).then_some(label_raw as usize);
    Ok(PointCloud::new(points, label)?)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    cloud_from_string(&text)
}

/// Write clouds as `cloud_<i>.pcd` files plus a `manifest.txt` next to
/// them; returns the manifest path.
pub fn save_manifest(set: &[PointCloud], dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, cloud) in set.iter().enumerate() {
        let name = format!("{stem}_{i:05}.pcd");
        save_cloud(cloud, &dir.join(&name))?;
        let label = cloud.label.map(|l| l as i64).unwrap_or(-1);
        let _ = writeln!(manifest, "{name} {label}");
    }
    let manifest_path = dir.join(format!("{stem}_manifest.txt"));
    std::fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Load every cloud listed in a manifest; the manifest's label column wins
/// over any label stored in the cloud files.
pub fn load_manifest(manifest_path: &Path) -> Result<Vec<PointCloud>, DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(lno + 1, "expected `path label`"));
        }
        let label: i64 = toks[1]
            .parse()
            .map_err(|_| parse_err(lno + 1, format!("bad label {:?}", toks[1])))?;
        let mut cloud = load_cloud(&base.join(toks[0]))?;
        cloud.label = (label >= 0).then_some(label as usize);
        out.push(cloud);
    }
    Ok(out)
}
