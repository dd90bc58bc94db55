//! Joint skeleton and the adjacency matrices derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parent of every joint of the 17-joint Human3.6M skeleton (root = -1).
const H36M_PARENTS: [i32; 17] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

const H36M_NAMES: [&str; 17] = [
    "hip-center",
    "right-hip",
    "right-knee",
    "right-ankle",
    "left-hip",
    "left-knee",
    "left-ankle",
    "spine",
    "thorax",
    "neck-nose",
    "head",
    "left-shoulder",
    "left-elbow",
    "left-wrist",
    "right-shoulder",
    "right-elbow",
    "right-wrist",
];

/// Floor added inside the logarithm when turning the structural prior into
/// adjacency logits, so non-edges get a finite (very negative) logit.
pub const LOGIT_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSkeleton", into = "RawSkeleton")]
pub struct SkeletonGraph {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RawSkeleton {
    joint_names: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<RawSkeleton> for SkeletonGraph {
    type Error = GtrsError;

    fn try_from(raw: RawSkeleton) -> Result<Self> {
        SkeletonGraph::new(
            raw.joint_names,
            raw.edges.into_iter().map(|[a, b]| (a, b)).collect(),
        )
    }
}

impl From<SkeletonGraph> for RawSkeleton {
    fn from(s: SkeletonGraph) -> Self {
        RawSkeleton {
            joint_names: s.joint_names,
            edges: s.edges.into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl Default for SkeletonGraph {
    fn default() -> Self {
        SkeletonGraph::h36m()
    }
}

impl SkeletonGraph {
    /// Validates and stores an undirected skeleton. Edges are normalized to
    /// `(min, max)` order.
    pub fn new(joint_names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let j = joint_names.len();
        if j == 0 {
            return Err(GtrsError::Skeleton("no joints".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a >= j || b >= j {
                return Err(GtrsError::Skeleton(format!(
                    "edge ({a}, {b}) out of range for {j} joints"
                )));
            }
            if a == b {
                return Err(GtrsError::Skeleton(format!("self edge on joint {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GtrsError::Skeleton(format!("duplicate edge ({a}, {b})")));
            }
            normalized.push(e);
        }
        Ok(SkeletonGraph {
            joint_names,
            edges: normalized,
        })
    }

    /// The 17-joint Human3.6M topology.
    pub fn h36m() -> Self {
        let names = H36M_NAMES.iter().map(|s| s.to_string()).collect();
        let edges = H36M_PARENTS
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(i, &p)| (i, p as usize))
            .collect();
        SkeletonGraph::new(names, edges).expect("built-in skeleton is valid")
    }

    /// Skeleton with `j` anonymous joints and no edges.
    pub fn isolated(j: usize) -> Self {
        let names = (0..j).map(|i| format!("joint{i}")).collect();
        SkeletonGraph::new(names, Vec::new()).expect("no edges to validate")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.edges
            .iter()
            .filter(|(a, b)| *a == joint || *b == joint)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        let j = self.joint_count();
        let mut seen = vec![false; j];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(a, b) in &self.edges {
                let other = if a == n {
                    b
                } else if b == n {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Binary adjacency with self loops: `A[i][j] = 1` iff `i == j` or the
    /// joints share an edge.
    pub fn build_adjacency(&self) -> Tensor {
        let j = self.joint_count();
        let mut a = Tensor::eye(j);
        for &(p, q) in &self.edges {
            a.set(p, q, 1.0);
            a.set(q, p, 1.0);
        }
        a
    }

    /// `D^{-1/2} (A + I) D^{-1/2}`, the fixed propagation matrix.
    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_sym(&self.build_adjacency()).expect("self loops keep every degree positive")
    }
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}` with `D = diag(row sums)`.
pub fn normalize_sym(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if m != n {
        return Err(GtrsError::shape("normalize_sym", a.shape(), &[n, n]));
    }
    for i in 0..n {
        if a.get(i, i) <= 0.0 {
            return Err(GtrsError::Contract(format!(
                "adjacency diagonal must be positive, entry {i} is {}",
                a.get(i, i)
            )));
        }
        for j in 0..n {
            let v = a.get(i, j);
            if v < 0.0 || v != a.get(j, i) {
                return Err(GtrsError::Contract(
                    "adjacency must be symmetric and non-negative".into(),
                ));
            }
        }
    }
    let mut inv_sqrt = vec![0.0; n];
    for (i, d) in inv_sqrt.iter_mut().enumerate() {
        let s: f64 = a.row(i).iter().sum();
        if s <= 0.0 {
            return Err(GtrsError::DegenerateGraph { row: i });
        }
        *d = 1.0 / s.sqrt();
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt[i] * a.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// Logits of a learnable adjacency: `log(Â + LOGIT_FLOOR)` plus Gaussian
/// noise with standard deviation `noise_scale`. Its row softmax starts close
/// to the row-normalized structural prior.
pub fn init_learnable_logits(skel: &SkeletonGraph, rng: &mut Rng, noise_scale: f64) -> Result<Tensor> {
    if noise_scale < 0.0 || !noise_scale.is_finite() {
        return Err(GtrsError::Config(format!(
            "adjacency noise scale must be >= 0, got {noise_scale}"
        )));
    }
    let prior = skel.normalized_adjacency();
    let mut logits = prior.map(|v| (v + LOGIT_FLOOR).ln());
    if noise_scale > 0.0 {
        for v in logits.data_mut() {
            *v += noise_scale * rng.normal();
        }
    }
    Ok(logits)
}
