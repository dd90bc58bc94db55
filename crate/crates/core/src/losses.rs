//! Training objectives recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::linalg::{cross, norm};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Guard added to predicted edge lengths before normalizing.
pub const EDGE_EPS: f64 = 1e-8;

pub type Face = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint: f64,
    pub normal: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vertex: 1.0,
            joint: 0.01,
            normal: 0.01,
            edge: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.vertex, self.joint, self.normal, self.edge];
        if w.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(GtrsError::Config(format!("loss weights must be finite and >= 0, got {w:?}")))
        }
    }

    pub fn combine(&self, vertex: f64, joint: f64, normal: f64, edge: f64) -> f64 {
        self.vertex * vertex + self.joint * joint + self.normal * normal + self.edge * edge
    }
}

fn check_shape(op: &'static str, pred: &Var<'_>, gt: &Tensor) -> Result<()> {
    let shape = pred.shape();
    if shape != gt.shape() {
        return Err(GtrsError::shape(op, &shape, gt.shape()));
    }
    Ok(())
}

/// Mean over vertices of the per-vertex L1 distance.
pub fn loss_vertex<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_shape("loss_vertex", &pred, gt)?;
    let m = gt.rows() as f64;
    let diff = pred.sub(&pred.tape().constant(gt.clone()))?;
    Ok(diff.abs().sum().scale(1.0 / m))
}

/// Mean over joints of the per-joint L1 distance between `R · pred` and the
/// ground-truth pose.
pub fn loss_joint<'t>(pred_mesh: Var<'t>, regressor: &Tensor, gt_pose: &Tensor) -> Result<Var<'t>> {
    let tape = pred_mesh.tape();
    let joints = tape.constant(regressor.clone()).matmul(&pred_mesh)?;
    check_shape("loss_joint", &joints, gt_pose)?;
    let diff = joints.sub(&tape.constant(gt_pose.clone()))?;
    Ok(diff.abs().sum().scale(1.0 / gt_pose.rows() as f64))
}

/// Mean over joints of the per-joint L1 distance between two poses.
pub fn loss_pose<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_shape("loss_pose", &pred, gt)?;
    let diff = pred.sub(&pred.tape().constant(gt.clone()))?;
    Ok(diff.abs().sum().scale(1.0 / gt.rows() as f64))
}

/// Translates a `K×3` pose so joint 0 sits at the origin.
pub fn root_relative(pose: &Tensor) -> Tensor {
    let root = pose.row(0).to_vec();
    let mut out = pose.clone();
    let n = pose.cols();
    for row in out.data_mut().chunks_mut(n) {
        for (v, r) in row.iter_mut().zip(&root) {
            *v -= r;
        }
    }
    out
}

fn vertex(mesh: &Tensor, i: usize) -> [f64; 3] {
    let r = mesh.row(i);
    [r[0], r[1], r[2]]
}

pub fn check_faces(faces: &[Face], vertices: usize) -> Result<()> {
    for (f, face) in faces.iter().enumerate() {
        if let Some(&bad) = face.iter().find(|&&i| i >= vertices) {
            return Err(GtrsError::Data(format!(
                "face {f} references vertex {bad} but the mesh has {vertices} vertices"
            )));
        }
    }
    Ok(())
}

/// Unit normals `(v₁ − v₀) × (v₂ − v₀)` of every face (`F×3`).
pub fn face_normals(mesh: &Tensor, faces: &[Face]) -> Result<Tensor> {
    check_faces(faces, mesh.rows())?;
    let mut out = Vec::with_capacity(faces.len() * 3);
    for (f, &[a, b, c]) in faces.iter().enumerate() {
        let (va, vb, vc) = (vertex(mesh, a), vertex(mesh, b), vertex(mesh, c));
        let n = cross(
            [vb[0] - va[0], vb[1] - va[1], vb[2] - va[2]],
            [vc[0] - va[0], vc[1] - va[1], vc[2] - va[2]],
        );
        let len = norm(n);
        if !(len > 0.0 && len.is_finite()) {
            return Err(GtrsError::Data(format!("face {f} ({a}, {b}, {c}) has zero area")));
        }
        out.extend(n.iter().map(|x| x / len));
    }
    Tensor::new(&[faces.len(), 3], out)
}

/// Vertex index pairs `(v₀,v₁), (v₁,v₂), (v₂,v₀)` of every face, in face order.
pub fn face_edges(faces: &[Face]) -> (Vec<usize>, Vec<usize>) {
    let mut from = Vec::with_capacity(faces.len() * 3);
    let mut to = Vec::with_capacity(faces.len() * 3);
    for &[a, b, c] in faces {
        from.extend([a, b, c]);
        to.extend([b, c, a]);
    }
    (from, to)
}

fn edge_vectors<'t>(mesh: Var<'t>, faces: &[Face]) -> Result<Var<'t>> {
    let (from, to) = face_edges(faces);
    mesh.gather_rows(&from)?.sub(&mesh.gather_rows(&to)?)
}

fn normal_term<'t>(pred_edges: Var<'t>, gt: &Tensor, faces: &[Face]) -> Result<Var<'t>> {
    let normals = face_normals(gt, faces)?;
    let mut per_edge = Vec::with_capacity(faces.len() * 9);
    for f in 0..faces.len() {
        for _ in 0..3 {
            per_edge.extend_from_slice(normals.row(f));
        }
    }
    let tape = pred_edges.tape();
    let n = tape.constant(Tensor::new(&[faces.len() * 3, 3], per_edge)?);
    let len = pred_edges.row_norm()?.add_scalar(EDGE_EPS);
    let cos = pred_edges.div_col(&len)?.mul(&n)?.sum_cols()?;
    Ok(cos.abs().sum())
}

fn edge_term<'t>(pred_edges: Var<'t>, gt: &Tensor, faces: &[Face]) -> Result<Var<'t>> {
    let (from, to) = face_edges(faces);
    let gt_len: Vec<f64> = from
        .iter()
        .zip(&to)
        .map(|(&i, &j)| {
            let (a, b) = (vertex(gt, i), vertex(gt, j));
            norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        })
        .collect();
    let tape = pred_edges.tape();
    let gt_len = tape.constant(Tensor::new(&[gt_len.len(), 1], gt_len)?);
    Ok(pred_edges.row_norm()?.sub(&gt_len)?.abs().sum())
}

/// Sum over faces and face edges of `|⟨ê, n*_f⟩|`, where `ê` is the
/// normalized predicted edge and `n*_f` the ground-truth face normal.
pub fn loss_normal<'t>(pred: Var<'t>, gt: &Tensor, faces: &[Face]) -> Result<Var<'t>> {
    check_shape("loss_normal", &pred, gt)?;
    check_faces(faces, gt.rows())?;
    normal_term(edge_vectors(pred, faces)?, gt, faces)
}

/// Sum over faces and face edges of the absolute edge-length difference.
pub fn loss_edge<'t>(pred: Var<'t>, gt: &Tensor, faces: &[Face]) -> Result<Var<'t>> {
    check_shape("loss_edge", &pred, gt)?;
    check_faces(faces, gt.rows())?;
    edge_term(edge_vectors(pred, faces)?, gt, faces)
}

pub struct LossTerms<'t> {
    pub vertex: Var<'t>,
    pub joint: Var<'t>,
    pub normal: Var<'t>,
    pub edge: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// `[vertex, joint, normal, edge, total]`.
    pub fn values(&self) -> [f64; 5] {
        [
            self.vertex.item(),
            self.joint.item(),
            self.normal.item(),
            self.edge.item(),
            self.total.item(),
        ]
    }
}

/// All four mesh losses and their weighted sum.
pub fn mesh_losses<'t>(
    pred_mesh: Var<'t>,
    gt_mesh: &Tensor,
    gt_pose: &Tensor,
    regressor: &Tensor,
    faces: &[Face],
    weights: &LossWeights,
) -> Result<LossTerms<'t>> {
    check_shape("mesh_losses", &pred_mesh, gt_mesh)?;
    check_faces(faces, gt_mesh.rows())?;
    let vertex = loss_vertex(pred_mesh, gt_mesh)?;
    let joint = loss_joint(pred_mesh, regressor, gt_pose)?;
    let edges = edge_vectors(pred_mesh, faces)?;
    let normal = normal_term(edges, gt_mesh, faces)?;
    let edge = edge_term(edges, gt_mesh, faces)?;
    let total = loss_total(vertex, joint, normal, edge, weights)?;
    Ok(LossTerms {
        vertex,
        joint,
        normal,
        edge,
        total,
    })
}

pub fn loss_total<'t>(
    vertex: Var<'t>,
    joint: Var<'t>,
    normal: Var<'t>,
    edge: Var<'t>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    vertex
        .scale(w.vertex)
        .add(&joint.scale(w.joint))?
        .add(&normal.scale(w.normal))?
        .add(&edge.scale(w.edge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::Tape;

    fn l1_loop(a: &Tensor, b: &Tensor) -> f64 {
        let mut total = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                total += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        total / a.rows() as f64
    }

    fn tetra() -> (Tensor, Vec<Face>) {
        let v = Tensor::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        (v, vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    }

    #[test]
    fn vertex_loss_examples() {
        let tape = Tape::new();
        let gt = Rng::new(0).normal_tensor(&[10, 3], 1.0);
        assert_eq!(loss_vertex(tape.constant(gt.clone()), &gt).unwrap().item(), 0.0);
        let shifted = gt.map(|x| x + 1.0);
        let l = loss_vertex(tape.constant(shifted), &gt).unwrap().item();
        assert!((l - 3.0).abs() < 1e-12);
        let pred = Rng::new(1).normal_tensor(&[10, 3], 1.0);
        let l = loss_vertex(tape.constant(pred.clone()), &gt).unwrap().item();
        assert!((l - l1_loop(&pred, &gt)).abs() < 1e-12);
        assert!(loss_vertex(tape.constant(Tensor::zeros(&[9, 3])), &gt).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        let tape = Tape::new();
        let mesh = Rng::new(2).normal_tensor(&[8, 3], 1.0);
        let mut reg = Rng::new(3).normal_tensor(&[4, 8], 1.0).map(f64::abs);
        for r in 0..4 {
            let s: f64 = reg.row(r).iter().sum();
            for c in 0..8 {
                let x = reg.get(r, c) / s;
                reg.set(r, c, x);
            }
        }
        let joints = reg.matmul(&mesh).unwrap();
        assert!(loss_joint(tape.constant(mesh.clone()), &reg, &joints).unwrap().item() < 1e-15);
        let t = [0.5, -1.0, 2.0];
        let moved = Tensor::new(
            &[8, 3],
            mesh.data().chunks(3).flat_map(|r| [r[0] + t[0], r[1] + t[1], r[2] + t[2]]).collect(),
        )
        .unwrap();
        let l = loss_joint(tape.constant(moved), &reg, &joints).unwrap().item();
        assert!((l - 3.5).abs() < 1e-12);
        let gt = Rng::new(4).normal_tensor(&[4, 3], 1.0);
        let l = loss_joint(tape.constant(mesh.clone()), &reg, &gt).unwrap().item();
        assert!((l - l1_loop(&joints, &gt)).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_unit_offset_is_one() {
        let tape = Tape::new();
        let gt = Rng::new(5).normal_tensor(&[17, 3], 1.0);
        let mut pred = gt.clone();
        for r in 0..17 {
            pred.set(r, 0, gt.get(r, 0) + 1.0);
        }
        assert!((loss_pose(tape.constant(pred), &gt).unwrap().item() - 1.0).abs() < 1e-12);
        assert_eq!(loss_pose(tape.constant(gt.clone()), &gt).unwrap().item(), 0.0);
    }

    #[test]
    fn normal_loss_examples() {
        let tape = Tape::new();
        let (v, faces) = tetra();
        assert!(loss_normal(tape.constant(v.clone()), &v, &faces).unwrap().item() < 1e-12);

        // flat GT triangle in z = 0, normal +z; tilt the prediction so the
        // edge v₂ − v₀ becomes (0,0,1)
        let gt = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let pred = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let tri = [[0, 1, 2]];
        let normals = face_normals(&gt, &tri).unwrap();
        assert_eq!(normals.row(0), &[0.0, 0.0, 1.0]);
        // edges (0,1): (−1,0,0)·z = 0; (1,2): (1,0,−1)/√2 → 1/√2; (2,0): (0,0,1) → 1
        let expected = 1.0 / 2f64.sqrt() + 1.0;
        let l = loss_normal(tape.constant(pred), &gt, &tri).unwrap().item();
        assert!((l - expected).abs() < 1e-7, "{l}");
    }

    #[test]
    fn degenerate_gt_face_rejected() {
        let gt = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(face_normals(&gt, &[[0, 1, 2]]), Err(GtrsError::Data(_))));
        assert!(matches!(face_normals(&gt, &[[0, 1, 3]]), Err(GtrsError::Data(_))));
    }

    #[test]
    fn edge_loss_examples() {
        let tape = Tape::new();
        let (v, faces) = tetra();
        assert_eq!(loss_edge(tape.constant(v.clone()), &v, &faces).unwrap().item(), 0.0);
        let shifted = v.map(|x| x + 3.0);
        assert!(loss_edge(tape.constant(shifted), &v, &faces).unwrap().item() < 1e-12);
        let total_len: f64 = {
            let (from, to) = face_edges(&faces);
            from.iter()
                .zip(&to)
                .map(|(&i, &j)| {
                    let d: Vec<f64> = (0..3).map(|c| v.get(i, c) - v.get(j, c)).collect();
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .sum()
        };
        let l = loss_edge(tape.constant(v.scale(2.0)), &v, &faces).unwrap().item();
        assert!((l - total_len).abs() < 1e-12);
    }

    #[test]
    fn total_combines_with_weights() {
        let tape = Tape::new();
        let c = |x: f64| tape.constant(Tensor::scalar(x));
        let w = LossWeights::default();
        let t = loss_total(c(2.0), c(1.0), c(1.0), c(1.0), &w).unwrap().item();
        assert!((t - 2.03).abs() < 1e-15);
        assert_eq!(loss_total(c(0.0), c(0.0), c(0.0), c(0.0), &w).unwrap().item(), 0.0);
        assert!(LossWeights { edge: -1.0, ..w }.validate().is_err());
    }
}
