//! Gradient cosine similarity, the two-condition split gate, min-max
//! bipartitioning and the recursive cluster tree of specialized models.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{l2_norm, GradientUpdate, ModelParams};

/// Largest device count for which bipartitions are enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("similarity undefined for zero-norm gradient of device {0}")]
    ZeroNorm(usize),
    #[error("gradient length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} devices, got {got}")]
    TooFewDevices { need: usize, got: usize },
    #[error("cluster {0} is not an active leaf")]
    NotActive(usize),
    #[error("unknown cluster {0}")]
    UnknownCluster(usize),
    #[error("split of cluster {0} does not partition its members")]
    BadPartition(usize),
}

/// Cosine of the angle between two vectors. Returns
/// [`ClusterError::ZeroNorm`] with index 0 or 1 for a zero-norm argument.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 {
        return Err(ClusterError::ZeroNorm(0));
    }
    if nb == 0.0 {
        return Err(ClusterError::ZeroNorm(1));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(g1: &GradientUpdate, g2: &GradientUpdate) -> Result<f64, ClusterError> {
    cosine(&g1.grad, &g2.grad)
}

/// Symmetric pairwise cosine similarities over devices in ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub ids: Vec<usize>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit values (row-major, `ids.len()` squared).
    /// The upper triangle is mirrored and the diagonal forced to 1.
    pub fn from_values(ids: Vec<usize>, values: Vec<f64>) -> Self {
        let n = ids.len();
        assert_eq!(values.len(), n * n, "similarity matrix shape");
        let mut m = Self { ids, values };
        for i in 0..n {
            m.values[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = m.values[i * n + j];
                m.values[j * n + i] = v;
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ids.len() + j]
    }
}

/// `gradients` must be sorted by device id (e.g. collected from a `BTreeMap`).
pub fn similarity_matrix(gradients: &[(usize, GradientUpdate)]) -> Result<SimilarityMatrix, ClusterError> {
    if gradients.len() < 2 {
        return Err(ClusterError::TooFewDevices {
            need: 2,
            got: gradients.len(),
        });
    }
    let mut sorted: Vec<&(usize, GradientUpdate)> = gradients.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for (id, g) in &sorted {
        if g.norm() == 0.0 {
            return Err(ClusterError::ZeroNorm(*id));
        }
    }
    let n = sorted.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = cosine_similarity(&sorted[i].1, &sorted[j].1)?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        ids: sorted.iter().map(|(id, _)| *id).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub split: bool,
    /// Norm of the sample-weighted mean gradient.
    pub agg_norm: f64,
    /// Largest per-device gradient norm.
    pub max_norm: f64,
}

impl SplitCheck {
    /// The cluster objective is near a stationary point.
    pub fn stationary(&self, eps1: f64) -> bool {
        self.agg_norm < eps1
    }
}

/// `gradients[i]` is paired with the positive sample weight `weights[i]`.
pub fn check_split_conditions(
    gradients: &[GradientUpdate],
    weights: &[f64],
    eps1: f64,
    eps2: f64,
) -> SplitCheck {
    assert_eq!(gradients.len(), weights.len(), "one weight per gradient");
    let total: f64 = weights.iter().sum();
    let dim = gradients.first().map_or(0, |g| g.grad.len());
    let mut agg = vec![0.0; dim];
    let mut max_norm = 0.0f64;
    for (g, w) in gradients.iter().zip(weights) {
        let s = w / total;
        for (a, gi) in agg.iter_mut().zip(&g.grad) {
            *a += s * gi;
        }
        max_norm = max_norm.max(g.norm());
    }
    let agg_norm = l2_norm(&agg);
    SplitCheck {
        split: agg_norm < eps1 && max_norm > eps2,
        agg_norm,
        max_norm,
    }
}

/// Largest similarity between a member of `c1` and a member of `c2`
/// (indices into `sim`).
pub fn max_cross_similarity(sim: &SimilarityMatrix, c1: &[usize], c2: &[usize]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &i in c1 {
        for &j in c2 {
            m = m.max(sim.get(i, j));
        }
    }
    m
}

/// Ordering key of a candidate bipartition: lower is better.
fn split_key(sim: &SimilarityMatrix, c1: &[usize], c2: &[usize]) -> (f64, usize, Vec<usize>) {
    let imbalance = c1.len().abs_diff(c2.len());
    (max_cross_similarity(sim, c1, c2), imbalance, c1.to_vec())
}

fn better(a: &(f64, usize, Vec<usize>), b: &(f64, usize, Vec<usize>)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
}

/// Splits the devices of `sim` into two nonempty groups minimising the
/// largest cross-group similarity. Ties prefer the more balanced split, then
/// the lexicographically smaller first group; the lowest device is always in
/// the first group. Returns device ids.
pub fn bipartition(sim: &SimilarityMatrix) -> Result<(Vec<usize>, Vec<usize>), ClusterError> {
    let n = sim.len();
    if n < 2 {
        return Err(ClusterError::TooFewDevices { need: 2, got: n });
    }
    let (c1, c2) = if n <= EXHAUSTIVE_LIMIT {
        exhaustive_bipartition(sim)
    } else {
        complete_linkage_bipartition(sim)
    };
    Ok((
        c1.iter().map(|&i| sim.ids[i]).collect(),
        c2.iter().map(|&i| sim.ids[i]).collect(),
    ))
}

fn exhaustive_bipartition(sim: &SimilarityMatrix) -> (Vec<usize>, Vec<usize>) {
    let n = sim.len();
    let mut best: Option<((f64, usize, Vec<usize>), Vec<usize>)> = None;
    // bit i of `mask` puts index i + 1 in the second group; index 0 stays first
    for mask in 1u32..(1u32 << (n - 1)) {
        let (mut c1, mut c2) = (vec![0], Vec::new());
        for i in 1..n {
            if mask & (1 << (i - 1)) != 0 {
                c2.push(i);
            } else {
                c1.push(i);
            }
        }
        let key = split_key(sim, &c1, &c2);
        if best.as_ref().is_none_or(|(b, _)| better(&key, b)) {
            best = Some((key, c2));
        }
    }
    let (key, c2) = best.expect("n >= 2 gives at least one split");
    (key.2, c2)
}

/// Agglomerative clustering on `1 - similarity` with complete linkage,
/// stopped at two clusters.
fn complete_linkage_bipartition(sim: &SimilarityMatrix) -> (Vec<usize>, Vec<usize>) {
    let n = sim.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // dist[a][b] between current clusters a and b
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 1.0 - sim.get(i, j)).collect())
        .collect();
    while clusters.len() > 2 {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                if dist[a][b] < best.2 {
                    best = (a, b, dist[a][b]);
                }
            }
        }
        let (a, b, _) = best;
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        let row_b = dist.remove(b);
        for row in dist.iter_mut() {
            row.remove(b);
        }
        for c in 0..clusters.len() {
            if c != a {
                let d = dist[a][c].max(row_b[if c < b { c } else { c + 1 }]);
                dist[a][c] = d;
                dist[c][a] = d;
            }
        }
    }
    let mut c1 = clusters.swap_remove(0);
    let mut c2 = clusters.swap_remove(0);
    if c2.contains(&0) {
        std::mem::swap(&mut c1, &mut c2);
    }
    (c1, c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Active,
    Stopped,
    /// Split into children; no longer a specialized model.
    Internal,
    /// Absorbed by another cluster at the cloud.
    Merged { into: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub cluster_id: usize,
    pub edge_id: usize,
    pub members: BTreeSet<usize>,
    pub model: ModelParams,
    pub status: ClusterStatus,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Round in which the node was created.
    pub born: usize,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.status, ClusterStatus::Active | ClusterStatus::Stopped)
    }

    /// A leaf created by a split (or merge), i.e. a specialized model.
    pub fn is_specialized(&self) -> bool {
        self.is_leaf() && self.parent.is_some()
    }
}

pub enum TreeUpdate {
    Split(Vec<usize>, Vec<usize>),
    Stop,
}

/// Forest of per-edge cluster trees in one arena; `cluster_id` is the index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterTree {
    nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_root(&mut self, edge_id: usize, members: BTreeSet<usize>, model: ModelParams) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ClusterNode {
            cluster_id: id,
            edge_id,
            members,
            model,
            status: ClusterStatus::Active,
            parent: None,
            children: Vec::new(),
            born: 0,
        });
        id
    }

    pub fn node(&self, id: usize) -> Result<&ClusterNode, ClusterError> {
        self.nodes.get(id).ok_or(ClusterError::UnknownCluster(id))
    }

    pub fn node_mut(&mut self, id: usize) -> Result<&mut ClusterNode, ClusterError> {
        self.nodes.get_mut(id).ok_or(ClusterError::UnknownCluster(id))
    }

    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// The specialized model set: leaves produced by splitting or merging.
    pub fn specialized(&self) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.iter().filter(|n| n.is_specialized())
    }

    /// Leaf cluster that currently owns `device`.
    pub fn leaf_of(&self, device: usize) -> Option<usize> {
        self.leaves()
            .find(|n| n.members.contains(&device))
            .map(|n| n.cluster_id)
    }

    pub fn update_tree(&mut self, id: usize, update: TreeUpdate, round: usize) -> Result<Vec<usize>, ClusterError> {
        let node = self.node(id)?;
        if node.status != ClusterStatus::Active {
            return Err(ClusterError::NotActive(id));
        }
        match update {
            TreeUpdate::Stop => {
                self.node_mut(id)?.status = ClusterStatus::Stopped;
                Ok(Vec::new())
            }
            TreeUpdate::Split(c1, c2) => {
                let s1: BTreeSet<usize> = c1.into_iter().collect();
                let s2: BTreeSet<usize> = c2.into_iter().collect();
                if s1.is_empty()
                    || s2.is_empty()
                    || !s1.is_disjoint(&s2)
                    || s1.union(&s2).copied().collect::<BTreeSet<_>>() != node.members
                {
                    return Err(ClusterError::BadPartition(id));
                }
                let (edge_id, model) = (node.edge_id, node.model.clone());
                let mut ids = Vec::with_capacity(2);
                for members in [s1, s2] {
                    let child = self.nodes.len();
                    self.nodes.push(ClusterNode {
                        cluster_id: child,
                        edge_id,
                        members,
                        model: model.clone(),
                        status: ClusterStatus::Active,
                        parent: Some(id),
                        children: Vec::new(),
                        born: round,
                    });
                    ids.push(child);
                }
                let parent = self.node_mut(id)?;
                parent.status = ClusterStatus::Internal;
                parent.children = ids.clone();
                Ok(ids)
            }
        }
    }

    /// Absorbs leaf `from` into leaf `into` with the given merged model.
    pub fn merge(&mut self, into: usize, from: usize, model: ModelParams) -> Result<(), ClusterError> {
        if !self.node(into)?.is_leaf() {
            return Err(ClusterError::NotActive(into));
        }
        if !self.node(from)?.is_leaf() {
            return Err(ClusterError::NotActive(from));
        }
        let moved = std::mem::take(&mut self.node_mut(from)?.members);
        self.node_mut(from)?.status = ClusterStatus::Merged { into };
        let target = self.node_mut(into)?;
        target.members.extend(moved);
        target.model = model;
        target.status = ClusterStatus::Active;
        Ok(())
    }
}
