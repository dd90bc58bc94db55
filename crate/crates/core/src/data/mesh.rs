use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::losses::{check_faces, face_normals, Face};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Template mesh with its joint regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAsset", into = "RawAsset")]
pub struct MeshAsset {
    pub vertices: Tensor,
    pub faces: Vec<Face>,
    pub regressor: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAsset {
    vertices: Vec<[f64; 3]>,
    faces: Vec<Face>,
    regressor: Vec<Vec<f64>>,
}

impl TryFrom<RawAsset> for MeshAsset {
    type Error = GtrsError;

    fn try_from(raw: RawAsset) -> Result<Self> {
        let vertices = Tensor::from_rows(&raw.vertices)?;
        let regressor = Tensor::from_rows(&raw.regressor)?;
        MeshAsset::new(vertices, raw.faces, regressor)
    }
}

impl From<MeshAsset> for RawAsset {
    fn from(a: MeshAsset) -> Self {
        RawAsset {
            vertices: a.vertices.data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect(),
            faces: a.faces,
            regressor: (0..a.regressor.rows()).map(|k| a.regressor.row(k).to_vec()).collect(),
        }
    }
}

/// Regressor rows must sum to one within this tolerance.
pub const REGRESSOR_ROW_TOL: f64 = 1e-9;

impl MeshAsset {
    pub fn new(vertices: Tensor, faces: Vec<Face>, regressor: Tensor) -> Result<Self> {
        let (m, three) = vertices.dims2()?;
        if three != 3 || m == 0 {
            return Err(GtrsError::Data(format!("template vertices must be M×3, got {:?}", vertices.shape())));
        }
        if !vertices.all_finite() {
            return Err(GtrsError::Data("template vertices contain non-finite values".into()));
        }
        check_faces(&faces, m)?;
        face_normals(&vertices, &faces)?;
        let (k, rm) = regressor.dims2()?;
        if rm != m || k == 0 {
            return Err(GtrsError::Data(format!(
                "regressor must be K×{m}, got {:?}",
                regressor.shape()
            )));
        }
        for r in 0..k {
            let row = regressor.row(r);
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(GtrsError::Data(format!("regressor row {r} has negative or non-finite weights")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > REGRESSOR_ROW_TOL {
                return Err(GtrsError::Data(format!("regressor row {r} sums to {s}, expected 1")));
            }
        }
        Ok(MeshAsset {
            vertices,
            faces,
            regressor,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.rows()
    }

    pub fn joint_count(&self) -> usize {
        self.regressor.rows()
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in self.vertices.data().chunks(3) {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
    }

    /// `R · mesh`.
    pub fn regress(&self, mesh: &Tensor) -> Result<Tensor> {
        self.regressor.matmul(mesh)
    }
}

/// Shape of the procedural capped cylinder (axis along y, centered at the
/// origin).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylinderSpec {
    pub height: f64,
    pub radius: f64,
    /// Width of the Gaussian soft assignment of joints to vertices.
    pub regressor_width: f64,
}

impl Default for CylinderSpec {
    fn default() -> Self {
        CylinderSpec {
            height: 1.0,
            radius: 0.25,
            regressor_width: 0.08,
        }
    }
}

/// `(rings, segments)` with `rings · segments = m`, `segments ≥ 3`,
/// `rings ≥ segments`, closest to `rings = 2 · segments` (ties: fewer
/// segments).
pub fn cylinder_grid(m: usize) -> Option<(usize, usize)> {
    (3..=m)
        .take_while(|s| s * s <= m)
        .filter(|s| m.is_multiple_of(*s))
        .map(|s| (m / s, s))
        .min_by_key(|&(r, s)| ((r as i64 - 2 * s as i64).abs(), s))
}

fn nearest_valid(m: usize) -> usize {
    (1..)
        .flat_map(|d| [m.checked_sub(d), Some(m + d)])
        .flatten()
        .find(|&c| c >= 12 && cylinder_grid(c).is_some())
        .expect("valid sizes exist above any m")
}

/// Faces of a `rings × segments` capped cylinder, wound counter-clockwise
/// when seen from outside.
pub fn cylinder_faces(rings: usize, segments: usize) -> Vec<Face> {
    let idx = |r: usize, s: usize| r * segments + s % segments;
    let mut faces = Vec::with_capacity(2 * (rings - 1) * segments + 2 * (segments - 2));
    for r in 0..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (idx(r, s), idx(r, s + 1), idx(r + 1, s), idx(r + 1, s + 1));
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    let top = rings - 1;
    for s in 1..segments - 1 {
        faces.push([idx(0, 0), idx(0, s), idx(0, s + 1)]);
        faces.push([idx(top, 0), idx(top, s + 1), idx(top, s)]);
    }
    faces
}

/// Procedural capped-cylinder template with `m` vertices and a `k`-joint
/// regressor built from Gaussian weights around seeded anchor vertices.
pub fn gen_template(m: usize, k: usize, spec: &CylinderSpec, seed: u64) -> Result<MeshAsset> {
    if k < 3 || k > m {
        return Err(GtrsError::Config(format!("joint count {k} must be in [3, {m}]")));
    }
    if !(spec.height > 0.0 && spec.radius > 0.0 && spec.regressor_width > 0.0) {
        return Err(GtrsError::Config(format!("cylinder dimensions must be positive: {spec:?}")));
    }
    let grid = if m >= 12 { cylinder_grid(m) } else { None };
    let Some((rings, segments)) = grid else {
        return Err(GtrsError::Config(format!(
            "{m} vertices cannot form a rings × segments cylinder grid; nearest valid count is {}",
            nearest_valid(m)
        )));
    };
    let mut verts = Vec::with_capacity(m * 3);
    for r in 0..rings {
        let y = spec.height * (r as f64 / (rings - 1) as f64 - 0.5);
        for s in 0..segments {
            let theta = 2.0 * PI * s as f64 / segments as f64;
            verts.extend([spec.radius * theta.cos(), y, spec.radius * theta.sin()]);
        }
    }
    let vertices = Tensor::new(&[m, 3], verts)?;
    let faces = cylinder_faces(rings, segments);

    let mut rng = Rng::new(seed);
    let mut pool: Vec<usize> = (0..m).collect();
    let mut anchors = Vec::with_capacity(k);
    for i in 0..k {
        let j = i + rng.below(m - i);
        pool.swap(i, j);
        anchors.push(pool[i]);
    }
    let inv = 1.0 / (2.0 * spec.regressor_width * spec.regressor_width);
    let mut reg = Tensor::zeros(&[k, m]);
    for (row, &a) in anchors.iter().enumerate() {
        let pa = vertices.row(a).to_vec();
        let logits: Vec<f64> = (0..m)
            .map(|v| {
                let p = vertices.row(v);
                -inv * ((p[0] - pa[0]).powi(2) + (p[1] - pa[1]).powi(2) + (p[2] - pa[2]).powi(2))
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (v, l) in logits.iter().enumerate() {
            reg.set(row, v, (l - max).exp() / total);
        }
    }
    MeshAsset::new(vertices, faces, reg)
}
