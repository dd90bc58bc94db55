//! Evaluation metrics on plain tensors (no tape).

use crate::error::{GtrsError, Result};
use crate::linalg::{det3, matmul3, svd3, transpose3};
use crate::tensor::Tensor;

/// Second singular value of the cross-covariance below this fraction of the
/// first marks a rank-deficient configuration.
const RANK_TOL: f64 = 1e-12;

fn check_points(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<usize> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() != 3 {
        return Err(GtrsError::shape(op, pred.shape(), gt.shape()));
    }
    Ok(pred.rows())
}

fn mean_distance(pred: &[f64], gt: &[f64], offset: [f64; 3]) -> f64 {
    let n = pred.len() / 3;
    let total: f64 = pred
        .chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, g)| {
            let d = [p[0] - g[0] - offset[0], p[1] - g[1] - offset[1], p[2] - g[2] - offset[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    total / n as f64
}

/// Mean per-joint Euclidean error. With `root_centered`, both poses are
/// first translated so joint 0 is at the origin.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root_centered: bool) -> Result<f64> {
    let k = check_points("mpjpe", pred, gt)?;
    if k == 0 {
        return Err(GtrsError::Data("mpjpe of an empty pose".into()));
    }
    let offset = if root_centered {
        let (p, g) = (pred.row(0), gt.row(0));
        [p[0] - g[0], p[1] - g[1], p[2] - g[2]]
    } else {
        [0.0; 3]
    };
    Ok(mean_distance(pred.data(), gt.data(), offset))
}

/// Mean per-vertex Euclidean error.
pub fn mpve(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let m = check_points("mpve", pred, gt)?;
    if m == 0 {
        return Err(GtrsError::Data("mpve of an empty mesh".into()));
    }
    Ok(mean_distance(pred.data(), gt.data(), [0.0; 3]))
}

/// `x ↦ s·R·x + t` with `det R = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, points: &Tensor) -> Tensor {
        let r = &self.rotation;
        let data = points
            .data()
            .chunks(3)
            .flat_map(|p| {
                (0..3).map(move |i| self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i])
            })
            .collect();
        Tensor::new(points.shape(), data).expect("same shape")
    }
}

fn centroid(points: &Tensor) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points.data().chunks(3) {
        for (ci, pi) in c.iter_mut().zip(p) {
            *ci += pi;
        }
    }
    let n = points.rows() as f64;
    c.map(|x| x / n)
}

/// Least-squares similarity transform taking `pred` onto `gt`, minimizing
/// `Σ ‖s·R·pred_k + t − gt_k‖²` over scale, proper rotation and translation.
pub fn procrustes(pred: &Tensor, gt: &Tensor) -> Result<Similarity> {
    let k = check_points("procrustes", pred, gt)?;
    if k < 3 {
        return Err(GtrsError::Alignment(format!("need at least 3 points, got {k}")));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut h = [[0.0; 3]; 3];
    let mut var_p = 0.0;
    for (p, g) in pred.data().chunks(3).zip(gt.data().chunks(3)) {
        let x = [p[0] - mp[0], p[1] - mp[1], p[2] - mp[2]];
        let y = [g[0] - mg[0], g[1] - mg[1], g[2] - mg[2]];
        for i in 0..3 {
            var_p += x[i] * x[i];
            for j in 0..3 {
                h[i][j] += x[i] * y[j];
            }
        }
    }
    let (u, s, v) = svd3(h);
    if !(var_p > 0.0) || !(s[0] > 0.0) || s[1] <= RANK_TOL * s[0] {
        return Err(GtrsError::Alignment(format!(
            "rank-deficient point configuration (singular values {s:?})"
        )));
    }
    let ut = transpose3(&u);
    let d = det3(&matmul3(&v, &ut)).signum();
    let mut vd = v;
    for row in vd.iter_mut() {
        row[2] *= d;
    }
    let rotation = matmul3(&vd, &ut);
    let scale = (s[0] + s[1] + d * s[2]) / var_p;
    let rp = [0, 1, 2].map(|i| rotation[i][0] * mp[0] + rotation[i][1] * mp[1] + rotation[i][2] * mp[2]);
    let translation = [0, 1, 2].map(|i| mg[i] - scale * rp[i]);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(procrustes(pred, gt)?.apply(pred))
}

/// MPJPE after similarity alignment, without root-centering.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt, false)
}
