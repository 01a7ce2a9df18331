//! Message-passing feature extractor producing one embedding per graph.
//!
//! Two layer styles over doubled directed edges, both with per-layer edge
//! feature encoders and a mean-pooling readout:
//!
//! * GCN: `m_v = sum_u (h_u W + enc(e_uv)) / sqrt((deg u + 1)(deg v + 1))
//!   + h_v W / (deg v + 1)`, then bias and ReLU (the last layer skips the
//!   ReLU).
//! * GIN: `h_v' = MLP((1 + eps) h_v + sum_u ReLU(h_u + enc(e_uv)))` with a
//!   linear-ReLU-linear MLP; non-final layers apply a trailing ReLU.
//!
//! Self-loops are never stored in the data; the self contribution is part
//! of the layer formula.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::numerics::{glorot_uniform, Mat, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("feature width mismatch: graph has {actual}, encoder expects {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("cannot extract features from an empty graph")]
    EmptyGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gcn,
    Gin,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(BackboneKind::Gcn),
            "gin" => Ok(BackboneKind::Gin),
            other => Err(format!("unknown backbone kind: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Node attribute width accepted by the input encoder.
    pub node_width: usize,
    /// Edge attribute width accepted by the per-layer edge encoders.
    pub edge_width: usize,
    /// Hidden (and output) embedding dimension.
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Debug, Clone)]
enum LayerParams {
    Gcn {
        w: ParamId,
        b: ParamId,
    },
    Gin {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        eps: ParamId,
    },
}

/// Parameter handles for the extractor; values live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    node_enc: ParamId,
    edge_enc: Vec<ParamId>,
    layers: Vec<LayerParams>,
}

impl Backbone {
    /// Register freshly initialized parameters for `cfg` into `store`.
    pub fn init(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.layers >= 1 && cfg.hidden >= 1);
        let d = cfg.hidden;
        let node_enc = store.register("backbone.node_enc", glorot_uniform(cfg.node_width, d, rng));
        let mut edge_enc = Vec::with_capacity(cfg.layers);
        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            edge_enc.push(store.register(
                format!("backbone.layer{k}.edge_enc"),
                glorot_uniform(cfg.edge_width, d, rng),
            ));
            let layer = match cfg.kind {
                BackboneKind::Gcn => LayerParams::Gcn {
                    w: store.register(format!("backbone.layer{k}.w"), glorot_uniform(d, d, rng)),
                    b: store.register(format!("backbone.layer{k}.b"), Mat::zeros(1, d)),
                },
                BackboneKind::Gin => LayerParams::Gin {
                    w1: store.register(format!("backbone.layer{k}.w1"), glorot_uniform(d, d, rng)),
                    b1: store.register(format!("backbone.layer{k}.b1"), Mat::zeros(1, d)),
                    w2: store.register(format!("backbone.layer{k}.w2"), glorot_uniform(d, d, rng)),
                    b2: store.register(format!("backbone.layer{k}.b2"), Mat::zeros(1, d)),
                    eps: store.register(format!("backbone.layer{k}.eps"), Mat::zeros(1, 1)),
                },
            };
            layers.push(layer);
        }
        Backbone {
            cfg,
            node_enc,
            edge_enc,
            layers,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Encode raw node attributes into layer-0 states and raw edge
    /// attributes into one encoded feature block per layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &Graph,
    ) -> Result<(NodeId, Vec<NodeId>), GnnError> {
        if g.node_feats().cols() != self.cfg.node_width {
            return Err(GnnError::WidthMismatch {
                expected: self.cfg.node_width,
                actual: g.node_feats().cols(),
            });
        }
        if g.edge_feats().cols() != self.cfg.edge_width && !g.edges().is_empty() {
            return Err(GnnError::WidthMismatch {
                expected: self.cfg.edge_width,
                actual: g.edge_feats().cols(),
            });
        }
        let x = tape.constant(g.node_feats().clone());
        let enc = tape.param(store, self.node_enc);
        let h0 = tape.matmul(x, enc);
        let raw_edges = if g.edges().is_empty() {
            Mat::zeros(0, self.cfg.edge_width)
        } else {
            g.edge_feats().clone()
        };
        let mut encoded = Vec::with_capacity(self.cfg.layers);
        for k in 0..self.cfg.layers {
            let e = tape.constant(raw_edges.clone());
            let w = tape.param(store, self.edge_enc[k]);
            encoded.push(tape.matmul(e, w));
        }
        Ok((h0, encoded))
    }

    /// One message-passing layer. `last` suppresses the trailing ReLU.
    pub fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k: usize,
        h: NodeId,
        edge_enc: NodeId,
        wiring: &Wiring,
        last: bool,
    ) -> NodeId {
        match &self.layers[k] {
            LayerParams::Gcn { w, b } => {
                let wn = tape.param(store, *w);
                let bn = tape.param(store, *b);
                let hw = tape.matmul(h, wn);
                let gathered = tape.gather_rows(hw, wiring.src.clone());
                let msg = tape.add(gathered, edge_enc);
                let msg = tape.scale_rows(msg, wiring.edge_coeff.clone());
                let agg = tape.scatter_add_rows(msg, wiring.dst.clone(), wiring.num_nodes);
                let self_term = tape.scale_rows(hw, wiring.self_coeff.clone());
                let m = tape.add(agg, self_term);
                let pre = tape.add_row(m, bn);
                if last {
                    pre
                } else {
                    tape.relu(pre)
                }
            }
            LayerParams::Gin {
                w1,
                b1,
                w2,
                b2,
                eps,
            } => {
                let gathered = tape.gather_rows(h, wiring.src.clone());
                let neigh = tape.add(gathered, edge_enc);
                let neigh = tape.relu(neigh);
                let agg = tape.scatter_add_rows(neigh, wiring.dst.clone(), wiring.num_nodes);
                let epsn = tape.param(store, *eps);
                let scale = tape.add_const(epsn, 1.0);
                let self_term = tape.mul_scalar_node(h, scale);
                let z = tape.add(self_term, agg);
                let w1n = tape.param(store, *w1);
                let b1n = tape.param(store, *b1);
                let w2n = tape.param(store, *w2);
                let b2n = tape.param(store, *b2);
                let hidden = tape.matmul(z, w1n);
                let hidden = tape.add_row(hidden, b1n);
                let hidden = tape.relu(hidden);
                let out = tape.matmul(hidden, w2n);
                let out = tape.add_row(out, b2n);
                if last {
                    out
                } else {
                    tape.relu(out)
                }
            }
        }
    }

    /// Full pipeline: encode, `layers` rounds of message passing, mean
    /// readout. Returns the `1 x d` embedding node.
    pub fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &Graph,
    ) -> Result<NodeId, GnnError> {
        if g.num_nodes() == 0 {
            return Err(GnnError::EmptyGraph);
        }
        let (mut h, encoded) = self.encode(tape, store, g)?;
        let wiring = Wiring::of(g);
        for k in 0..self.cfg.layers {
            let last = k + 1 == self.cfg.layers;
            h = self.layer(tape, store, k, h, encoded[k], &wiring, last);
        }
        Ok(readout_mean(tape, h))
    }

    /// Embedding as plain values, for inference paths.
    pub fn extract_value(&self, store: &ParamStore, g: &Graph) -> Result<Vec<f64>, GnnError> {
        let mut tape = Tape::new();
        let x = self.extract(&mut tape, store, g)?;
        Ok(tape.value(x).data().to_vec())
    }
}

/// Column-mean readout over node states. Requires at least one node.
pub fn readout_mean(tape: &mut Tape, h: NodeId) -> NodeId {
    tape.mean_rows(h)
}

/// Precomputed per-graph message wiring: edge endpoints plus the constant
/// degree-based coefficients.
pub struct Wiring {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// GCN edge normalizer `1 / sqrt((deg(src) + 1)(deg(dst) + 1))`.
    pub edge_coeff: Vec<f64>,
    /// GCN self-term normalizer `1 / (deg(v) + 1)`.
    pub self_coeff: Vec<f64>,
}

impl Wiring {
    pub fn of(g: &Graph) -> Self {
        let deg = g.degrees();
        let mut src = Vec::with_capacity(g.edges().len());
        let mut dst = Vec::with_capacity(g.edges().len());
        let mut edge_coeff = Vec::with_capacity(g.edges().len());
        for &(u, v) in g.edges() {
            src.push(u);
            dst.push(v);
            edge_coeff.push(1.0 / (((deg[u] + 1) * (deg[v] + 1)) as f64).sqrt());
        }
        let self_coeff = deg.iter().map(|&d| 1.0 / (d + 1) as f64).collect();
        Wiring {
            num_nodes: g.num_nodes(),
            src,
            dst,
            edge_coeff,
            self_coeff,
        }
    }
}
