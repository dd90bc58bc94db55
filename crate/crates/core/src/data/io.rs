use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::losses::Face;
use crate::tensor::Tensor;

use super::mesh::MeshAsset;
use super::synth::Sample;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    pose2d: Vec<[f64; 2]>,
    gt_pose3d: Vec<[f64; 3]>,
    gt_mesh: Vec<[f64; 3]>,
}

fn rows<const N: usize>(t: &Tensor) -> Vec<[f64; N]> {
    t.data()
        .chunks(N)
        .map(|r| std::array::from_fn(|i| r[i]))
        .collect()
}

fn tensor<const N: usize>(rows: &[[f64; N]], what: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(GtrsError::Data(format!("{what} is empty")));
    }
    let t = Tensor::from_rows(rows)?;
    if !t.all_finite() {
        return Err(GtrsError::Data(format!("{what} contains non-finite values")));
    }
    Ok(t)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GtrsError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GtrsError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| GtrsError::io(path, e))
}

/// Parses a JSON document, reporting the failing line on error.
pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| GtrsError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?, path)
}

/// One JSON object per line. Floats use the shortest representation that
/// parses back to the same bits.
pub fn dataset_to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let raw = RawSample {
            pose2d: rows(&s.pose2d),
            gt_pose3d: rows(&s.gt_pose3d),
            gt_mesh: rows(&s.gt_mesh),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSON-lines dataset. Blank lines are ignored; every sample must
/// have the same joint and vertex counts as the first.
pub fn dataset_from_jsonl(text: &str, path: &Path) -> Result<Vec<Sample>> {
    let mut samples: Vec<Sample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| GtrsError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let raw: RawSample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let sample = Sample {
            pose2d: tensor(&raw.pose2d, "pose2d").map_err(|e| parse_err(e.to_string()))?,
            gt_pose3d: tensor(&raw.gt_pose3d, "gt_pose3d").map_err(|e| parse_err(e.to_string()))?,
            gt_mesh: tensor(&raw.gt_mesh, "gt_mesh").map_err(|e| parse_err(e.to_string()))?,
        };
        if let Some(first) = samples.first() {
            if sample.pose2d.shape() != first.pose2d.shape()
                || sample.gt_pose3d.shape() != first.gt_pose3d.shape()
                || sample.gt_mesh.shape() != first.gt_mesh.shape()
            {
                return Err(parse_err("sample shapes differ from the first sample".into()));
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_text(path, &dataset_to_jsonl(samples)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    dataset_from_jsonl(&read_text(path)?, path)
}

/// Checks every sample against an asset: matching sizes and
/// `gt_pose3d = R · gt_mesh` within `tol` (absolute, per coordinate).
pub fn validate_dataset(samples: &[Sample], asset: &MeshAsset, joints: usize, tol: f64) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.pose2d.shape() != [joints, 2]
            || s.gt_pose3d.shape() != [asset.joint_count(), 3]
            || s.gt_mesh.shape() != [asset.vertex_count(), 3]
        {
            return Err(GtrsError::Data(format!(
                "sample {i} has shapes {:?}/{:?}/{:?}, expected [{joints}, 2]/[{}, 3]/[{}, 3]",
                s.pose2d.shape(),
                s.gt_pose3d.shape(),
                s.gt_mesh.shape(),
                asset.joint_count(),
                asset.vertex_count()
            )));
        }
        let err = asset.regress(&s.gt_mesh)?.sub(&s.gt_pose3d)?.max_abs();
        if err > tol {
            return Err(GtrsError::Data(format!(
                "sample {i}: gt_pose3d differs from the regressed mesh by {err:e}"
            )));
        }
    }
    Ok(())
}

pub fn save_asset(path: &Path, asset: &MeshAsset) -> Result<()> {
    write_text(path, &(serde_json::to_string(asset)? + "\n"))
}

pub fn load_asset(path: &Path) -> Result<MeshAsset> {
    read_json(path)
}

/// A 2D pose file: a JSON array of `[x, y]` pairs.
pub fn load_pose2d(path: &Path) -> Result<Tensor> {
    let rows: Vec<[f64; 2]> = read_json(path)?;
    tensor(&rows, "pose2d")
}

/// Wavefront OBJ text: `v x y z` lines (6 decimals) then 1-based `f a b c`.
pub fn obj_string(mesh: &Tensor, faces: &[Face]) -> String {
    let mut s = String::with_capacity(mesh.rows() * 32 + faces.len() * 16);
    for v in mesh.data().chunks(3) {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn export_obj(path: &Path, mesh: &Tensor, faces: &[Face]) -> Result<()> {
    write_text(path, &obj_string(mesh, faces))
}
