//! Immutable graph and dataset data model.
//!
//! Undirected graphs are stored as doubled directed edge lists: every edge
//! `(u, v)` appears together with `(v, u)`, each carrying its own feature
//! row (identical for the two directions). Self-loops are not stored;
//! layers add the self contribution internally. Missing labels are carried
//! as an explicit mask so multi-task datasets with holes compose cleanly
//! with losses and metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Mat;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("permutation is not a bijection on node indices")]
    InvalidPermutation,
    #[error("label matrix is {rows}x{cols}, expected {expected_rows} rows and at least 1 task")]
    BadLabelShape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
    },
    #[error("dataset has {graphs} graphs but {labels} label rows")]
    LabelCountMismatch { graphs: usize, labels: usize },
    #[error("dataset has {graphs} graphs but {splits} split tags")]
    SplitCountMismatch { graphs: usize, splits: usize },
}

/// One graph sample: doubled directed edges plus node/edge attribute matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_feats: Mat,
    edge_feats: Mat,
}

impl Graph {
    /// Construct without validation; use [`validate_graph`] to inspect
    /// invariant violations (violations are data, not failures).
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_feats: Mat,
        edge_feats: Mat,
    ) -> Self {
        Graph {
            num_nodes,
            edges,
            node_feats,
            edge_feats,
        }
    }

    /// Build from undirected edges: each `(u, v)` is stored as `(u, v)` and
    /// `(v, u)` with the same feature row.
    pub fn undirected(
        num_nodes: usize,
        undirected_edges: &[(usize, usize)],
        node_feats: Mat,
        undirected_edge_feats: &Mat,
    ) -> Self {
        assert_eq!(undirected_edge_feats.rows(), undirected_edges.len());
        let mut edges = Vec::with_capacity(undirected_edges.len() * 2);
        let mut feats = Vec::with_capacity(undirected_edges.len() * 2 * undirected_edge_feats.cols());
        for (i, &(u, v)) in undirected_edges.iter().enumerate() {
            edges.push((u, v));
            edges.push((v, u));
            feats.extend_from_slice(undirected_edge_feats.row(i));
            feats.extend_from_slice(undirected_edge_feats.row(i));
        }
        let edge_feats = Mat::from_vec(edges.len(), undirected_edge_feats.cols(), feats)
            .expect("doubled edge features");
        Graph {
            num_nodes,
            edges,
            node_feats,
            edge_feats,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Directed edge list (doubled for undirected data).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_feats(&self) -> &Mat {
        &self.node_feats
    }

    pub fn edge_feats(&self) -> &Mat {
        &self.edge_feats
    }

    /// Node degrees counted over directed-edge targets.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(_, v) in &self.edges {
            if v < self.num_nodes {
                deg[v] += 1;
            }
        }
        deg
    }
}

/// Outcome of validating one graph: ok, or every violation found.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural invariant of `g` and report all violations.
pub fn validate_graph(g: &Graph) -> ValidationReport {
    let mut violations = Vec::new();
    if g.num_nodes == 0 {
        violations.push("graph has no nodes".to_string());
    }
    if g.node_feats.rows() != g.num_nodes {
        violations.push(format!(
            "node feature rows ({}) do not match node count ({})",
            g.node_feats.rows(),
            g.num_nodes
        ));
    }
    if g.edge_feats.rows() != g.edges.len() {
        violations.push(format!(
            "edge feature rows ({}) do not match edge count ({})",
            g.edge_feats.rows(),
            g.edges.len()
        ));
    }
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u >= g.num_nodes || v >= g.num_nodes {
            violations.push(format!("endpoint out of range: edge {} = ({}, {})", i, u, v));
        } else if u == v {
            violations.push(format!("self-loop stored: edge {} = ({}, {})", i, u, v));
        }
    }
    // Reverse-edge pairing with identical features, as a multiset check.
    if g.edge_feats.rows() == g.edges.len() {
        use std::collections::HashMap;
        let key = |i: usize, u: usize, v: usize| -> (usize, usize, Vec<u64>) {
            let bits = g.edge_feats.row(i).iter().map(|f| f.to_bits()).collect();
            (u, v, bits)
        };
        let mut counts: HashMap<(usize, usize, Vec<u64>), i64> = HashMap::new();
        for (i, &(u, v)) in g.edges.iter().enumerate() {
            if u < g.num_nodes && v < g.num_nodes && u != v {
                *counts.entry(key(i, u, v)).or_insert(0) += 1;
            }
        }
        let mut reported = std::collections::HashSet::new();
        for (i, &(u, v)) in g.edges.iter().enumerate() {
            if u >= g.num_nodes || v >= g.num_nodes || u == v {
                continue;
            }
            let fwd = key(i, u, v);
            let rev = (v, u, fwd.2.clone());
            let fwd_count = counts.get(&fwd).copied().unwrap_or(0);
            let rev_count = counts.get(&rev).copied().unwrap_or(0);
            if fwd_count != rev_count && reported.insert((u.min(v), u.max(v))) {
                violations.push(format!(
                    "missing reverse edge: ({}, {}) and ({}, {}) disagree in count or features",
                    u, v, v, u
                ));
            }
        }
    }
    ValidationReport { violations }
}

/// Relabel nodes by `perm` (new index of old node `i` is `perm[i]`),
/// permuting features consistently. Rejects non-bijective permutations.
pub fn permute_nodes(g: &Graph, perm: &[usize]) -> Result<Graph, GraphError> {
    if perm.len() != g.num_nodes {
        return Err(GraphError::InvalidPermutation);
    }
    let mut seen = vec![false; g.num_nodes];
    for &p in perm {
        if p >= g.num_nodes || seen[p] {
            return Err(GraphError::InvalidPermutation);
        }
        seen[p] = true;
    }
    let mut node_feats = Mat::zeros(g.node_feats.rows(), g.node_feats.cols());
    for (old, &new) in perm.iter().enumerate() {
        node_feats.row_mut(new).copy_from_slice(g.node_feats.row(old));
    }
    let edges = g
        .edges
        .iter()
        .map(|&(u, v)| (perm[u], perm[v]))
        .collect();
    Ok(Graph {
        num_nodes: g.num_nodes,
        edges,
        node_feats,
        edge_feats: g.edge_feats.clone(),
    })
}

/// Per-task binary labels with a presence mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    /// `n x T` matrix of {0, 1}; masked entries hold 0 and are never read.
    values: Mat,
    /// Row-major `n x T` presence flags.
    present: Vec<bool>,
}

impl LabelSet {
    pub fn new(values: Mat, present: Vec<bool>) -> Result<Self, GraphError> {
        if values.cols() == 0 || present.len() != values.rows() * values.cols() {
            return Err(GraphError::BadLabelShape {
                rows: values.rows(),
                cols: values.cols(),
                expected_rows: present.len() / values.cols().max(1),
            });
        }
        Ok(LabelSet { values, present })
    }

    /// Labels from `Option<f64>` rows; `None` marks a missing entry.
    pub fn from_options(rows: &[Vec<Option<f64>>]) -> Result<Self, GraphError> {
        let n = rows.len();
        let t = rows.first().map_or(0, |r| r.len());
        let mut values = Mat::zeros(n, t);
        let mut present = vec![false; n * t];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(GraphError::BadLabelShape {
                    rows: n,
                    cols: row.len(),
                    expected_rows: n,
                });
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(y) = v {
                    values.set(i, j, *y);
                    present[i * t + j] = true;
                }
            }
        }
        LabelSet::new(values, present)
    }

    pub fn num_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn num_tasks(&self) -> usize {
        self.values.cols()
    }

    pub fn is_present(&self, sample: usize, task: usize) -> bool {
        self.present[sample * self.values.cols() + task]
    }

    /// Label value, `None` when masked out.
    pub fn get(&self, sample: usize, task: usize) -> Option<f64> {
        if self.is_present(sample, task) {
            Some(self.values.get(sample, task))
        } else {
            None
        }
    }

    /// Raw label row with masked entries forced to 0.
    pub fn value_row(&self, sample: usize) -> Vec<f64> {
        (0..self.num_tasks())
            .map(|t| self.get(sample, t).unwrap_or(0.0))
            .collect()
    }

    /// Mask row as {0.0, 1.0}.
    pub fn mask_row(&self, sample: usize) -> Vec<f64> {
        (0..self.num_tasks())
            .map(|t| if self.is_present(sample, t) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Train/valid/test assignment for one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag: {other}")),
        }
    }
}

/// Graphs, labels, and the split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub labels: LabelSet,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, labels: LabelSet, split: Vec<Split>) -> Result<Self, GraphError> {
        if graphs.len() != labels.num_samples() {
            return Err(GraphError::LabelCountMismatch {
                graphs: graphs.len(),
                labels: labels.num_samples(),
            });
        }
        if graphs.len() != split.len() {
            return Err(GraphError::SplitCountMismatch {
                graphs: graphs.len(),
                splits: split.len(),
            });
        }
        Ok(Dataset {
            graphs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.num_tasks()
    }

    /// Indices of graphs assigned to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }
}

/// Per-task label counts over unmasked entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub positives: usize,
    pub negatives: usize,
    pub missing: usize,
    /// `None` when every entry of the task is masked.
    pub positive_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub per_task: Vec<TaskStats>,
}

/// Exact per-task counts over unmasked labels.
pub fn class_stats(ds: &Dataset) -> ClassStats {
    let n = ds.len();
    let t = ds.num_tasks();
    let mut per_task = Vec::with_capacity(t);
    for task in 0..t {
        let mut pos = 0;
        let mut neg = 0;
        let mut missing = 0;
        for i in 0..n {
            match ds.labels.get(i, task) {
                Some(y) if y > 0.5 => pos += 1,
                Some(_) => neg += 1,
                None => missing += 1,
            }
        }
        let observed = pos + neg;
        per_task.push(TaskStats {
            positives: pos,
            negatives: neg,
            missing,
            positive_ratio: if observed > 0 {
                Some(pos as f64 / observed as f64)
            } else {
                None
            },
        });
    }
    ClassStats { per_task }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::undirected(
            3,
            &[(0, 1), (1, 2), (2, 0)],
            Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            &Mat::from_rows(&[vec![0.5], vec![0.25], vec![0.125]]).unwrap(),
        )
    }

    #[test]
    fn wellformed_triangle_validates() {
        let g = triangle();
        assert_eq!(g.edges().len(), 6);
        assert!(validate_graph(&g).is_ok());
    }

    #[test]
    fn endpoint_out_of_range_is_reported() {
        let g = Graph::new(
            3,
            vec![(0, 5), (5, 0)],
            Mat::zeros(3, 2),
            Mat::zeros(2, 1),
        );
        let report = validate_graph(&g);
        assert!(!report.is_ok());
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("endpoint out of range")));
    }

    #[test]
    fn missing_reverse_edge_is_reported() {
        let g = Graph::new(3, vec![(0, 1)], Mat::zeros(3, 2), Mat::zeros(1, 1));
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("missing reverse edge")));
    }

    #[test]
    fn asymmetric_features_are_reported() {
        let g = Graph::new(
            2,
            vec![(0, 1), (1, 0)],
            Mat::zeros(2, 1),
            Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
        );
        let report = validate_graph(&g);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("missing reverse edge")));
    }

    #[test]
    fn identity_permutation_is_identity() {
        let g = triangle();
        let p = permute_nodes(&g, &[0, 1, 2]).unwrap();
        assert_eq!(p, g);
    }

    #[test]
    fn swap_permutation_relabels_edges_and_features() {
        let g = Graph::undirected(
            2,
            &[(0, 1)],
            Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            &Mat::from_rows(&[vec![9.0]]).unwrap(),
        );
        let p = permute_nodes(&g, &[1, 0]).unwrap();
        assert_eq!(p.edges(), &[(1, 0), (0, 1)]);
        assert_eq!(p.node_feats().row(0), &[2.0]);
        assert_eq!(p.node_feats().row(1), &[1.0]);
    }

    #[test]
    fn permutation_then_inverse_restores() {
        let g = triangle();
        let perm = [2, 0, 1];
        let mut inverse = [0usize; 3];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let there = permute_nodes(&g, &perm).unwrap();
        let back = permute_nodes(&there, &inverse).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn non_bijective_permutations_rejected() {
        let g = triangle();
        assert!(permute_nodes(&g, &[0, 0, 1]).is_err());
        assert!(permute_nodes(&g, &[0, 1]).is_err());
        assert!(permute_nodes(&g, &[0, 1, 3]).is_err());
    }

    #[test]
    fn validation_survives_permutation() {
        let g = triangle();
        for perm in [[0, 1, 2], [1, 2, 0], [2, 1, 0], [1, 0, 2]] {
            let p = permute_nodes(&g, &perm).unwrap();
            assert!(validate_graph(&p).is_ok());
        }
    }

    fn tiny_dataset(labels: &[Vec<Option<f64>>]) -> Dataset {
        let graphs = (0..labels.len()).map(|_| triangle()).collect::<Vec<_>>();
        let split = vec![Split::Train; labels.len()];
        Dataset::new(graphs, LabelSet::from_options(labels).unwrap(), split).unwrap()
    }

    #[test]
    fn class_stats_counts_quarter_positive() {
        let ds = tiny_dataset(&[
            vec![Some(1.0)],
            vec![Some(0.0)],
            vec![Some(0.0)],
            vec![Some(0.0)],
        ]);
        let stats = class_stats(&ds);
        assert_eq!(stats.per_task[0].positives, 1);
        assert_eq!(stats.per_task[0].negatives, 3);
        assert_eq!(stats.per_task[0].positive_ratio, Some(0.25));
    }

    #[test]
    fn class_stats_fully_masked_task_is_undefined() {
        let ds = tiny_dataset(&[vec![None], vec![None]]);
        let stats = class_stats(&ds);
        assert_eq!(stats.per_task[0].missing, 2);
        assert_eq!(stats.per_task[0].positive_ratio, None);
    }

    #[test]
    fn class_stats_invariant_under_shuffle() {
        let labels = vec![
            vec![Some(1.0), None],
            vec![Some(0.0), Some(1.0)],
            vec![None, Some(0.0)],
            vec![Some(1.0), Some(1.0)],
        ];
        let ds = tiny_dataset(&labels);
        let mut shuffled = labels.clone();
        shuffled.rotate_left(2);
        let ds2 = tiny_dataset(&shuffled);
        assert_eq!(class_stats(&ds), class_stats(&ds2));
    }
}
