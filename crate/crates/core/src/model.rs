//! Backbone + head bundled over one parameter store.

use crate::gnn::{Backbone, BackboneConfig, GnnError};
use crate::graph::Graph;
use crate::moe::{MoeConfig, MoeError, MoeHead};
use crate::numerics::{seeded_rng, ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

/// The full classifier: feature extractor, mixture head, and every
/// parameter value. Parameters register in a fixed order (backbone first,
/// then head), so two models built from the same seed are identical.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: MoeHead,
}

impl Model {
    pub fn init(backbone_cfg: BackboneConfig, moe_cfg: MoeConfig, seed: u64) -> Self {
        assert_eq!(
            backbone_cfg.hidden, moe_cfg.embed_dim,
            "backbone output and head input dimensions must agree"
        );
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let backbone = Backbone::init(backbone_cfg, &mut store, &mut rng);
        let head = MoeHead::init(moe_cfg, &mut store, &mut rng);
        Model {
            store,
            backbone,
            head,
        }
    }

    /// Graph embedding as plain values.
    pub fn embed(&self, g: &Graph) -> Result<Vec<f64>, ModelError> {
        Ok(self.backbone.extract_value(&self.store, g)?)
    }

    /// `p(y=1 | g)` for `task`: the gated mixture, or the uniform expert
    /// average when `mean_mix` is set.
    pub fn predict(&self, g: &Graph, task: usize, mean_mix: bool) -> Result<f64, ModelError> {
        let x = self.embed(g)?;
        let p = if mean_mix {
            self.head.mean_mix_predict(&self.store, &x, task)?
        } else {
            self.head.mixture_predict(&self.store, &x, task)?
        };
        Ok(p)
    }

    /// Gate prior over experts for `g` (task-resolved in individual mode).
    pub fn gate_prior(&self, g: &Graph, task: usize) -> Result<Vec<f64>, ModelError> {
        let x = self.embed(g)?;
        Ok(self.head.gate_prior(&self.store, &x, Some(task))?)
    }

    /// Embedding node on a caller-provided tape (training path).
    pub fn embed_node(
        &self,
        tape: &mut Tape,
        g: &Graph,
    ) -> Result<crate::numerics::NodeId, ModelError> {
        Ok(self.backbone.extract(tape, &self.store, g)?)
    }
}
