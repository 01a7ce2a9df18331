//! Synthetic imbalanced benchmark generator.
//!
//! Positive graphs contain a closed cycle motif, negative graphs are trees
//! (acyclic), so a cycle detector separates the classes by construction.
//! Train and validation positives carry triangles; a configurable fraction
//! of *test* positives carry 4-cycles instead, so test-time structure can
//! differ from anything seen in training. Node features are a constant
//! channel, a noisy degree channel (the usual featureless-graph
//! convention), and pure noise channels; the class signal stays
//! structural, with `noise_sigma` controlling how much of it survives
//! pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{permute_nodes, Dataset, Graph, LabelSet, Split};
use crate::numerics::{derive_seed, seeded_rng, Mat};

use super::IoError;

pub const NODE_FEAT_WIDTH: usize = 4;
pub const EDGE_FEAT_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of graphs.
    pub n: usize,
    /// Target positive-class ratio in (0, 1); the positive count is
    /// `round(n * positive_ratio)`.
    pub positive_ratio: f64,
    pub node_min: usize,
    pub node_max: usize,
    /// Standard deviation of the feature noise.
    pub noise_sigma: f64,
    /// Fraction of test positives drawn from the second motif family
    /// (4-cycles instead of triangles).
    pub diversity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 2000,
            positive_ratio: 0.05,
            node_min: 6,
            node_max: 14,
            noise_sigma: 0.5,
            diversity: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), IoError> {
        if self.n == 0 {
            return Err(IoError::BadSpec("n must be positive".to_string()));
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return Err(IoError::BadSpec(format!(
                "positive_ratio must be in (0, 1), got {}",
                self.positive_ratio
            )));
        }
        if self.node_min < 5 || self.node_max < self.node_min {
            return Err(IoError::BadSpec(format!(
                "node range [{}, {}] is infeasible (need at least 5 nodes for the motifs)",
                self.node_min, self.node_max
            )));
        }
        if !(0.0..=1.0).contains(&self.diversity) {
            return Err(IoError::BadSpec(format!(
                "diversity must be in [0, 1], got {}",
                self.diversity
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(IoError::BadSpec("noise_sigma must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Box-Muller Gaussian draw; keeps the generator free of extra
/// distribution dependencies.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, PartialEq)]
enum Motif {
    None,
    Triangle,
    FourCycle,
}

/// Tree with a guaranteed 0-1-2-3 chain, optionally closed into a cycle.
fn build_graph(nodes: usize, motif: Motif, sigma: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = vec![(0, 1), (1, 2), (2, 3)];
    for v in 4..nodes {
        let parent = rng.gen_range(0..v);
        edges.push((parent, v));
    }
    match motif {
        Motif::None => {}
        Motif::Triangle => edges.push((2, 0)),
        Motif::FourCycle => edges.push((3, 0)),
    }
    let mut degree = vec![0.0f64; nodes];
    for &(u, v) in &edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let mut node_feats = Mat::zeros(nodes, NODE_FEAT_WIDTH);
    for v in 0..nodes {
        node_feats.set(v, 0, 1.0);
        node_feats.set(v, 1, degree[v] / 2.0 + sigma * gauss(rng));
        for c in 2..NODE_FEAT_WIDTH {
            node_feats.set(v, c, sigma * gauss(rng));
        }
    }
    let mut edge_feats = Mat::zeros(edges.len(), EDGE_FEAT_WIDTH);
    for e in 0..edges.len() {
        edge_feats.set(e, 0, 1.0);
        for c in 1..EDGE_FEAT_WIDTH {
            edge_feats.set(e, c, sigma * gauss(rng));
        }
    }
    let g = Graph::undirected(nodes, &edges, node_feats, &edge_feats);
    // Random relabeling so the motif does not sit on fixed indices.
    let mut perm: Vec<usize> = (0..nodes).collect();
    for i in (1..nodes).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    permute_nodes(&g, &perm).expect("permutation is a bijection")
}

fn proportional_counts(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut used = 0;
    let mut fracs: Vec<(usize, f64)> = Vec::new();
    for (i, r) in ratios.iter().enumerate() {
        let raw = r * total as f64;
        out[i] = raw.floor() as usize;
        used += out[i];
        fracs.push((i, raw - raw.floor()));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in fracs.into_iter().take(total - used) {
        out[i] += 1;
    }
    out
}

/// Generate the benchmark dataset: deterministic for a seed, exact
/// positive count `round(n * ratio)`, stratified 80/10/10 splits, motifs
/// assigned per split.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, IoError> {
    spec.validate()?;
    let n = spec.n;
    let n_pos = ((n as f64 * spec.positive_ratio).round() as usize).clamp(1, n - 1);

    // Positive positions, then per-class stratified split assignment.
    let mut rng = seeded_rng(derive_seed(spec.seed, 0x515));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut is_positive = vec![false; n];
    for &i in order.iter().take(n_pos) {
        is_positive[i] = true;
    }

    let ratios = [0.8, 0.1, 0.1];
    let mut split = vec![Split::Train; n];
    for class in [true, false] {
        let members: Vec<usize> = order.iter().copied().filter(|&i| is_positive[i] == class).collect();
        let counts = proportional_counts(members.len(), ratios);
        let mut at = 0;
        for (tag, &count) in [Split::Train, Split::Valid, Split::Test].iter().zip(&counts) {
            for &i in &members[at..at + count] {
                split[i] = *tag;
            }
            at += count;
        }
    }

    // The diversity knob moves the leading fraction of test positives
    // (in shuffled order) to the second motif family.
    let test_pos: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| is_positive[i] && split[i] == Split::Test)
        .collect();
    let four_cycle_count = (spec.diversity * test_pos.len() as f64).ceil() as usize;
    let mut motif = vec![Motif::None; n];
    for (rank, &i) in test_pos.iter().enumerate() {
        motif[i] = if rank < four_cycle_count {
            Motif::FourCycle
        } else {
            Motif::Triangle
        };
    }
    for i in 0..n {
        if is_positive[i] && motif[i] == Motif::None {
            motif[i] = Motif::Triangle;
        }
    }

    let mut graphs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut graph_rng = seeded_rng(derive_seed(spec.seed, 0x9000 + i as u64));
        let nodes = graph_rng.gen_range(spec.node_min..=spec.node_max);
        graphs.push(build_graph(nodes, motif[i], spec.noise_sigma, &mut graph_rng));
        labels.push(vec![Some(f64::from(is_positive[i]))]);
    }
    let labels = LabelSet::from_options(&labels).expect("single-task labels");
    Dataset::new(graphs, labels, split).map_err(|e| IoError::Dataset(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{class_stats, validate_graph};

    /// Depth-first cycle check on the undirected structure.
    fn has_cycle(g: &Graph) -> bool {
        let n = g.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for (ei, &(u, v)) in g.edges().iter().enumerate() {
            adj[u].push((v, ei / 2));
        }
        let mut seen = vec![false; n];
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut stack = vec![(start, usize::MAX)];
            seen[start] = true;
            while let Some((v, via)) = stack.pop() {
                for &(u, ei) in &adj[v] {
                    if ei == via {
                        continue;
                    }
                    if seen[u] {
                        return true;
                    }
                    seen[u] = true;
                    stack.push((u, ei));
                }
            }
        }
        false
    }

    #[test]
    fn balanced_noiseless_classes_are_cycle_separable() {
        let spec = SynthSpec {
            n: 200,
            positive_ratio: 0.5,
            noise_sigma: 0.0,
            diversity: 0.0,
            seed: 1,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        for i in 0..ds.len() {
            let positive = ds.labels.get(i, 0) == Some(1.0);
            assert!(validate_graph(&ds.graphs[i]).is_ok());
            assert_eq!(has_cycle(&ds.graphs[i]), positive, "graph {i}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            n: 60,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_count_matches_the_ratio() {
        let spec = SynthSpec {
            n: 2000,
            positive_ratio: 0.05,
            seed: 0,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        let stats = class_stats(&ds);
        let pos = stats.per_task[0].positives;
        assert!((80..=120).contains(&pos), "positives = {pos}");
        let ratio = stats.per_task[0].positive_ratio.unwrap();
        assert!((ratio - 0.05).abs() <= 0.01);
    }

    #[test]
    fn skewed_generator_run_for_class_stats_example() {
        let spec = SynthSpec {
            n: 1000,
            positive_ratio: 0.05,
            seed: 0,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        let pos = class_stats(&ds).per_task[0].positives;
        assert!((30..=70).contains(&pos), "positives = {pos}");
    }

    #[test]
    fn diversity_moves_test_positives_to_four_cycles() {
        let spec = SynthSpec {
            n: 400,
            positive_ratio: 0.25,
            diversity: 0.5,
            noise_sigma: 0.0,
            seed: 3,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        // Count cycle lengths among test positives: both families present.
        let mut triangles = 0;
        let mut larger = 0;
        for i in 0..ds.len() {
            if ds.split[i] == Split::Test && ds.labels.get(i, 0) == Some(1.0) {
                let g = &ds.graphs[i];
                // Triangle iff some edge pair (u,v),(v,w),(w,u) exists.
                let mut has_triangle = false;
                let n = g.num_nodes();
                let mut adj = vec![vec![false; n]; n];
                for &(u, v) in g.edges() {
                    adj[u][v] = true;
                }
                'outer: for u in 0..n {
                    for v in 0..n {
                        if u != v && adj[u][v] {
                            for w in 0..n {
                                if w != u && w != v && adj[v][w] && adj[w][u] {
                                    has_triangle = true;
                                    break 'outer;
                                }
                            }
                        }
                    }
                }
                if has_triangle {
                    triangles += 1;
                } else {
                    larger += 1;
                    assert!(has_cycle(g), "diverse positive must still contain a cycle");
                }
            }
        }
        assert!(triangles > 0 && larger > 0, "{triangles} triangles, {larger} larger");
        // Train positives are always triangle-family.
        for i in 0..ds.len() {
            if ds.split[i] == Split::Train && ds.labels.get(i, 0) == Some(1.0) {
                assert!(has_cycle(&ds.graphs[i]));
            }
        }
    }

    #[test]
    fn split_sizes_are_stratified() {
        let spec = SynthSpec {
            n: 1000,
            positive_ratio: 0.1,
            seed: 4,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        let count = |tag: Split, pos: bool| {
            (0..ds.len())
                .filter(|&i| ds.split[i] == tag && (ds.labels.get(i, 0) == Some(1.0)) == pos)
                .count()
        };
        assert_eq!(count(Split::Train, true), 80);
        assert_eq!(count(Split::Valid, true), 10);
        assert_eq!(count(Split::Test, true), 10);
        assert_eq!(count(Split::Train, false), 720);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad_ratio = SynthSpec {
            positive_ratio: 0.0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&bad_ratio).is_err());
        let bad_range = SynthSpec {
            node_min: 10,
            node_max: 5,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&bad_range).is_err());
        let too_small = SynthSpec {
            node_min: 3,
            node_max: 4,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&too_small).is_err());
    }
}
