//! Training: dataset splitting, per-batch gradient steps (EM-style for the
//! posterior variant), model selection, sweeps, and gradient checking.
//!
//! The posterior variant alternates per mini-batch: the E-step evaluates
//! posterior expert weights under the parameters current at that batch and
//! freezes them; the M-step takes one Adam step on the posterior-weighted
//! loss with the KL regularizer. All other variants take plain Adam steps
//! on their loss.
//!
//! Determinism contract: every run is a pure function of (config, dataset,
//! seed). Batch order derives from the seed and the epoch index, so a
//! checkpoint resume replays exactly the epochs an uninterrupted run would
//! have produced. Per-sample gradients inside a batch may be computed in
//! parallel but are reduced in sample order, which keeps results identical
//! across thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{inverse_frequency_weights, BaselineError, ClassWeights};
use crate::gnn::{Backbone, BackboneConfig, BackboneKind};
use crate::graph::{Dataset, Graph, Split};
use crate::metrics::validation_auc;
use crate::model::{Model, ModelError};
use crate::moe::{GateMode, MoeConfig, MoeHead, SampleLoss};
use crate::numerics::{derive_seed, grad_check, seeded_rng, AdamConfig, AdamState, Mat, ParamStore, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("training split is empty")]
    NoTrainSamples,
    #[error("split index {index} out of range for {len} graphs")]
    SplitIndexOutOfRange { index: usize, len: usize },
    #[error("split assignment must cover every graph exactly once (graph {index})")]
    SplitNotPartition { index: usize },
    #[error("checkpoint layout does not match the configured model: {0}")]
    CheckpointMismatch(String),
    #[error("numeric failure: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prior-weighted mixture loss, jointly optimized.
    Pri,
    /// EM: frozen posterior weighting plus `lambda * KL(post || prior)`.
    Post,
    /// Uniform expert average (gate ablation).
    MeanMix,
    /// Plain cross-entropy on a single classifier.
    BaselineBce,
    /// Focal loss on a single classifier.
    BaselineFocal,
    /// Inverse-frequency re-weighted cross-entropy on a single classifier.
    BaselineReweight,
}

impl Variant {
    /// Baseline variants train a single expert regardless of configured M.
    pub fn forces_single_expert(self) -> bool {
        matches!(
            self,
            Variant::BaselineBce | Variant::BaselineFocal | Variant::BaselineReweight
        )
    }

    /// Whether inference averages experts uniformly instead of gating.
    pub fn uses_mean_mix(self) -> bool {
        self == Variant::MeanMix
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pri" => Ok(Variant::Pri),
            "post" => Ok(Variant::Post),
            "mean_mix" => Ok(Variant::MeanMix),
            "baseline_bce" => Ok(Variant::BaselineBce),
            "baseline_focal" => Ok(Variant::BaselineFocal),
            "baseline_reweight" => Ok(Variant::BaselineReweight),
            other => Err(format!("unknown variant: {other}")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Pri => "pri",
            Variant::Post => "post",
            Variant::MeanMix => "mean_mix",
            Variant::BaselineBce => "baseline_bce",
            Variant::BaselineFocal => "baseline_focal",
            Variant::BaselineReweight => "baseline_reweight",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Number of experts M.
    pub experts: usize,
    /// KL regularization strength (posterior variant).
    pub lambda: f64,
    /// Gate softmax temperature.
    pub tau: f64,
    pub backbone: BackboneKind,
    /// Embedding dimension d.
    pub hidden: usize,
    /// Message-passing layers K.
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub gate_mode: GateMode,
    pub focal_gamma: f64,
    pub cosine_gate: bool,
    pub gate_bias: bool,
    /// Expert-count grid for sweeps.
    #[serde(default)]
    pub grid_m: Vec<usize>,
    /// Lambda grid for sweeps.
    #[serde(default)]
    pub grid_lambda: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Pri,
            experts: 3,
            lambda: 0.1,
            tau: 1.0,
            backbone: BackboneKind::Gcn,
            hidden: 64,
            layers: 5,
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
            gate_mode: GateMode::Shared,
            focal_gamma: 2.0,
            cosine_gate: false,
            gate_bias: false,
            grid_m: vec![2, 3, 4, 5, 6, 7, 8],
            grid_lambda: vec![0.001, 0.01, 0.1, 1.0, 10.0],
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".to_string()));
        }
        if self.experts == 0 {
            return Err(TrainError::BadConfig("experts must be >= 1".to_string()));
        }
        if self.tau <= 0.0 {
            return Err(TrainError::BadConfig("tau must be positive".to_string()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::BadConfig("lambda must be nonnegative".to_string()));
        }
        if self.focal_gamma < 0.0 {
            return Err(TrainError::BadConfig("focal_gamma must be nonnegative".to_string()));
        }
        Ok(())
    }

    fn resolved_gate_mode(&self, tasks: usize) -> Result<GateMode, TrainError> {
        if tasks == 1 {
            return Ok(GateMode::SingleTask);
        }
        match self.gate_mode {
            GateMode::SingleTask => Err(TrainError::BadConfig(format!(
                "single_task gate mode cannot serve {tasks} tasks; use shared or individual"
            ))),
            mode => Ok(mode),
        }
    }

    /// Build the model this config describes for a dataset with the given
    /// feature widths and task count.
    pub fn build_model(
        &self,
        node_width: usize,
        edge_width: usize,
        tasks: usize,
    ) -> Result<Model, TrainError> {
        self.validate()?;
        let experts = if self.variant.forces_single_expert() {
            1
        } else {
            self.experts
        };
        let backbone_cfg = BackboneConfig {
            kind: self.backbone,
            node_width,
            edge_width,
            hidden: self.hidden,
            layers: self.layers,
        };
        let moe_cfg = MoeConfig {
            experts,
            tasks,
            embed_dim: self.hidden,
            tau: self.tau,
            gate_mode: self.resolved_gate_mode(tasks)?,
            cosine_gate: self.cosine_gate,
            gate_bias: self.gate_bias,
        };
        Ok(Model::init(backbone_cfg, moe_cfg, self.seed))
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Explicit index lists, as read from an external split file (for example a
/// scaffold split computed upstream).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// How to assign splits.
pub enum SplitStrategy<'a> {
    /// Apply an externally computed assignment verbatim.
    Provided(&'a SplitIndices),
    /// Seeded random split preserving the task-0 positive ratio.
    RandomStratified { ratios: [f64; 3], seed: u64 },
}

/// Produce a per-graph split assignment.
pub fn split_dataset(ds: &Dataset, strategy: &SplitStrategy) -> Result<Vec<Split>, TrainError> {
    match strategy {
        SplitStrategy::Provided(idx) => provided_split(ds.len(), idx),
        SplitStrategy::RandomStratified { ratios, seed } => {
            stratified_split(ds, *ratios, *seed)
        }
    }
}

fn provided_split(n: usize, idx: &SplitIndices) -> Result<Vec<Split>, TrainError> {
    let mut out = vec![None; n];
    for (list, tag) in [
        (&idx.train, Split::Train),
        (&idx.valid, Split::Valid),
        (&idx.test, Split::Test),
    ] {
        for &i in list {
            if i >= n {
                return Err(TrainError::SplitIndexOutOfRange { index: i, len: n });
            }
            if out[i].is_some() {
                return Err(TrainError::SplitNotPartition { index: i });
            }
            out[i] = Some(tag);
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(TrainError::SplitNotPartition { index: i }))
        .collect()
}

/// Largest-remainder rounding of `total * ratios` to integers summing to
/// `total`.
fn largest_remainder(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out = [0usize; 3];
    let mut used = 0;
    for (i, r) in raw.iter().enumerate() {
        out[i] = r.floor() as usize;
        used += out[i];
    }
    let mut rema: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total - used;
    for (i, _) in rema {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn stratified_split(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>, TrainError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(TrainError::BadConfig(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let n = ds.len();
    let targets = largest_remainder(n, &ratios);

    // Stratify on the task-0 label: positive / negative / missing.
    let mut groups: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..n {
        match ds.labels.get(i, 0) {
            Some(y) if y > 0.5 => groups[0].push(i),
            Some(_) => groups[1].push(i),
            None => groups[2].push(i),
        }
    }
    let mut rng = seeded_rng(derive_seed(seed, 0x5913));
    for g in &mut groups {
        shuffle(g, &mut rng);
    }

    // Per-group proportional counts, then settle column sums onto the
    // global targets by single-sample moves (stays within +-2 of quota).
    let mut alloc = [[0usize; 3]; 3];
    let mut quota = [[0f64; 3]; 3];
    for (gi, g) in groups.iter().enumerate() {
        let counts = largest_remainder(g.len(), &ratios);
        for s in 0..3 {
            alloc[gi][s] = counts[s];
            quota[gi][s] = ratios[s] * g.len() as f64;
        }
    }
    loop {
        let col = |s: usize| alloc.iter().map(|row| row[s]).sum::<usize>();
        let Some(over) = (0..3).find(|&s| col(s) > targets[s]) else {
            break;
        };
        let under = (0..3)
            .find(|&s| col(s) < targets[s])
            .expect("totals match, so an excess implies a deficit");
        // Move one sample from the most overfilled group cell.
        let gi = (0..3)
            .filter(|&g| alloc[g][over] > 0)
            .max_by(|&a, &b| {
                let da = alloc[a][over] as f64 - quota[a][over];
                let db = alloc[b][over] as f64 - quota[b][over];
                da.partial_cmp(&db).unwrap()
            })
            .expect("an overfull column has a nonzero cell");
        alloc[gi][over] -= 1;
        alloc[gi][under] += 1;
    }

    let mut out = vec![Split::Train; n];
    for (gi, g) in groups.iter().enumerate() {
        let mut at = 0;
        for (s, tag) in [Split::Train, Split::Valid, Split::Test].into_iter().enumerate() {
            for &i in &g[at..at + alloc[gi][s]] {
                out[i] = tag;
            }
            at += alloc[gi][s];
        }
    }
    Ok(out)
}

fn shuffle<T>(v: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Batch gradients
// ---------------------------------------------------------------------------

/// Loss selection for a whole batch.
pub enum BatchLoss<'a> {
    Pri,
    Post {
        lambda: f64,
        /// Posterior weights frozen at an external base point, one matrix
        /// per sample. When absent, each sample freezes them from the
        /// parameter values current at tape construction.
        frozen: Option<&'a [Mat]>,
    },
    MeanMix,
    Bce,
    Focal { gamma: f64 },
    Reweight { weights: &'a ClassWeights },
}

impl BatchLoss<'_> {
    fn for_sample(&self, i: usize, y: &[f64]) -> SampleLoss {
        match self {
            BatchLoss::Pri => SampleLoss::Pri,
            BatchLoss::Post { lambda, frozen } => SampleLoss::Post {
                lambda: *lambda,
                frozen: frozen.map(|f| f[i].clone()),
            },
            BatchLoss::MeanMix => SampleLoss::MeanMix,
            BatchLoss::Bce => SampleLoss::MixtureBce,
            BatchLoss::Focal { gamma } => SampleLoss::MixtureFocal { gamma: *gamma },
            BatchLoss::Reweight { weights } => SampleLoss::MixtureReweight {
                weights: (0..y.len()).map(|t| weights.weight(t, y[t])).collect(),
            },
        }
    }
}

/// One sample of a training batch.
pub struct BatchSample<'a> {
    pub graph: &'a Graph,
    pub y: Vec<f64>,
    pub mask: Vec<f64>,
}

fn sample_forward(
    backbone: &Backbone,
    head: &MoeHead,
    store: &ParamStore,
    sample: &BatchSample,
    loss: &SampleLoss,
) -> Result<(Tape, crate::numerics::NodeId, usize), TrainError> {
    let mut tape = Tape::new();
    let x = backbone
        .extract(&mut tape, store, sample.graph)
        .map_err(ModelError::from)?;
    let (node, pairs) = head.sample_loss(&mut tape, store, x, &sample.y, &sample.mask, loss);
    Ok((tape, node, pairs))
}

/// Mean batch loss over unmasked (sample, task) pairs, values only.
pub fn batch_loss_value(
    backbone: &Backbone,
    head: &MoeHead,
    store: &ParamStore,
    batch: &[BatchSample],
    loss: &BatchLoss,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, sample) in batch.iter().enumerate() {
        let pick = loss.for_sample(i, &sample.y);
        let (tape, node, p) = sample_forward(backbone, head, store, sample, &pick)?;
        total += tape.scalar(node);
        pairs += p;
    }
    if pairs == 0 {
        return Err(ModelError::from(crate::moe::MoeError::AllMasked).into());
    }
    Ok(total / pairs as f64)
}

/// Mean batch loss plus gradients, reduced deterministically in sample
/// order (parallel fan-out preserves the reduction order).
pub fn batch_loss_and_grads(
    backbone: &Backbone,
    head: &MoeHead,
    store: &ParamStore,
    batch: &[BatchSample],
    loss: &BatchLoss,
) -> Result<(f64, Vec<Mat>), TrainError> {
    let per_sample: Vec<Result<(f64, usize, Vec<(usize, Mat)>), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let pick = loss.for_sample(i, &sample.y);
            let (tape, node, pairs) = sample_forward(backbone, head, store, sample, &pick)?;
            let value = tape.scalar(node);
            let grads = tape
                .backward(node)?
                .iter()
                .map(|(id, m)| (id.index(), m.clone()))
                .collect();
            Ok((value, pairs, grads))
        })
        .collect();

    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut acc: Vec<Mat> = store
        .ids()
        .map(|id| {
            let p = store.value(id);
            Mat::zeros(p.rows(), p.cols())
        })
        .collect();
    for r in per_sample {
        let (value, p, grads) = r?;
        total += value;
        pairs += p;
        for (idx, g) in grads {
            acc[idx].add_assign(&g);
        }
    }
    if pairs == 0 {
        return Err(ModelError::from(crate::moe::MoeError::AllMasked).into());
    }
    let scale = 1.0 / pairs as f64;
    for g in &mut acc {
        *g = g.scale(scale);
    }
    Ok((total / pairs as f64, acc))
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Per-epoch record. Wall-clock is informational and excluded from
/// determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_auc: Vec<Option<f64>>,
    pub wall_clock_secs: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// Equality over the deterministic fields only.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.train_loss == other.train_loss
            && self.val_auc == other.val_auc
            && self.best_epoch == other.best_epoch
    }
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub node_width: usize,
    pub edge_width: usize,
    pub tasks: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub history: TrainHistory,
    /// Current parameter values (resume point), in registration order.
    pub params: Vec<(String, Mat)>,
    /// Parameter values at the best validation epoch (evaluation point).
    pub best_params: Vec<(String, Mat)>,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Model carrying the best-epoch parameters.
    pub fn best_model(&self) -> Result<Model, TrainError> {
        self.model_from(&self.best_params)
    }

    /// Model carrying the final parameters.
    pub fn final_model(&self) -> Result<Model, TrainError> {
        self.model_from(&self.params)
    }

    fn model_from(&self, values: &[(String, Mat)]) -> Result<Model, TrainError> {
        let mut model = self
            .cfg
            .build_model(self.node_width, self.edge_width, self.tasks)?;
        restore_params(&mut model.store, values)?;
        Ok(model)
    }
}

fn snapshot_params(store: &ParamStore) -> Vec<(String, Mat)> {
    store
        .iter()
        .map(|(name, value)| (name.to_string(), value.clone()))
        .collect()
}

fn restore_params(store: &mut ParamStore, values: &[(String, Mat)]) -> Result<(), TrainError> {
    if store.len() != values.len() {
        return Err(TrainError::CheckpointMismatch(format!(
            "{} parameters stored, model has {}",
            values.len(),
            store.len()
        )));
    }
    for (name, value) in values {
        let id = store
            .lookup(name)
            .ok_or_else(|| TrainError::CheckpointMismatch(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != value.shape() {
            return Err(TrainError::CheckpointMismatch(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    ds: &'a Dataset,
    train_idx: Vec<usize>,
    weights: Option<ClassWeights>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a TrainConfig, ds: &'a Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let train_idx = ds.split_indices(Split::Train);
        if train_idx.is_empty() {
            return Err(TrainError::NoTrainSamples);
        }
        let weights = if cfg.variant == Variant::BaselineReweight {
            Some(inverse_frequency_weights(&ds.labels, &train_idx)?)
        } else {
            None
        };
        Ok(Runner {
            cfg,
            ds,
            train_idx,
            weights,
        })
    }

    fn batch_loss(&self) -> BatchLoss<'_> {
        match self.cfg.variant {
            Variant::Pri => BatchLoss::Pri,
            Variant::Post => BatchLoss::Post {
                lambda: self.cfg.lambda,
                frozen: None,
            },
            Variant::MeanMix => BatchLoss::MeanMix,
            Variant::BaselineBce => BatchLoss::Bce,
            Variant::BaselineFocal => BatchLoss::Focal {
                gamma: self.cfg.focal_gamma,
            },
            Variant::BaselineReweight => BatchLoss::Reweight {
                weights: self.weights.as_ref().expect("weights computed for reweight"),
            },
        }
    }

    /// One pass over the training split: shuffled mini-batches, one Adam
    /// step each. For the posterior variant each batch runs an E-step
    /// (posterior frozen at the parameters current for that batch) and an
    /// M-step. Returns the mean loss per unmasked pair.
    fn run_epoch(
        &self,
        model: &mut Model,
        adam: &mut AdamState,
        epoch: usize,
    ) -> Result<f64, TrainError> {
        let mut order = self.train_idx.clone();
        let mut rng = seeded_rng(derive_seed(self.cfg.seed, 0xe90c + epoch as u64));
        shuffle(&mut order, &mut rng);
        let loss = self.batch_loss();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<BatchSample> = chunk
                .iter()
                .map(|&i| BatchSample {
                    graph: &self.ds.graphs[i],
                    y: self.ds.labels.value_row(i),
                    mask: self.ds.labels.mask_row(i),
                })
                .collect();
            if batch.iter().all(|s| s.mask.iter().all(|&m| m == 0.0)) {
                continue;
            }
            model.store.zero_grads();
            let (value, grads) =
                batch_loss_and_grads(&model.backbone, &model.head, &model.store, &batch, &loss)
                    .map_err(|e| match e {
                        TrainError::Numerics(crate::numerics::NumericsError::NonFiniteLoss(_)) => {
                            TrainError::NonFinite { epoch, batch: bi }
                        }
                        other => other,
                    })?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            for (id, g) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&grads) {
                model.store.accumulate_grad(id, g)?;
            }
            adam.step(&mut model.store)?;
            total += value;
            batches += 1;
        }
        Ok(if batches > 0 { total / batches as f64 } else { 0.0 })
    }
}

/// Per-epoch progress callback: `(epoch, train_loss, validation_auc)`.
pub type EpochCallback<'a> = &'a mut dyn FnMut(usize, f64, Option<f64>);

/// Train from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<Checkpoint, TrainError> {
    train_with(cfg, ds, &mut |_, _, _| {})
}

/// [`train`] with a progress callback.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    on_epoch: EpochCallback,
) -> Result<Checkpoint, TrainError> {
    let model = cfg.build_model(
        ds.graphs
            .first()
            .map(|g| g.node_feats().cols())
            .unwrap_or(0),
        ds.graphs
            .first()
            .map(|g| g.edge_feats().cols())
            .unwrap_or(0),
        ds.num_tasks(),
    )?;
    let adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let ckpt = Checkpoint {
        cfg: cfg.clone(),
        node_width: model.backbone.config().node_width,
        edge_width: model.backbone.config().edge_width,
        tasks: ds.num_tasks(),
        epoch: 0,
        history: TrainHistory::default(),
        best_params: snapshot_params(&model.store),
        params: snapshot_params(&model.store),
        adam,
    };
    resume_with(ckpt, ds, on_epoch)
}

/// Continue a checkpointed run until `cfg.epochs` epochs are complete.
/// Because batch order derives from (seed, epoch), the result is identical
/// to a run that never stopped.
pub fn resume(ckpt: Checkpoint, ds: &Dataset) -> Result<Checkpoint, TrainError> {
    resume_with(ckpt, ds, &mut |_, _, _| {})
}

/// [`resume`] with a progress callback.
pub fn resume_with(
    ckpt: Checkpoint,
    ds: &Dataset,
    on_epoch: EpochCallback,
) -> Result<Checkpoint, TrainError> {
    let Checkpoint {
        cfg,
        node_width,
        edge_width,
        tasks,
        epoch: start,
        mut history,
        params,
        best_params,
        mut adam,
    } = ckpt;
    if tasks != ds.num_tasks() {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint has {tasks} tasks, dataset has {}",
            ds.num_tasks()
        )));
    }
    let runner = Runner::new(&cfg, ds)?;
    let mut model = cfg.build_model(node_width, edge_width, tasks)?;
    restore_params(&mut model.store, &params)?;
    let mut best_params = best_params;
    let mut best_auc = history
        .val_auc
        .get(history.best_epoch)
        .copied()
        .flatten();
    if history.is_empty() {
        best_auc = None;
    }

    for epoch in start..cfg.epochs {
        let t0 = std::time::Instant::now();
        let loss = runner.run_epoch(&mut model, &mut adam, epoch)?;
        let auc = validation_auc(&model, ds, cfg.variant.uses_mean_mix())?;
        let improved = match (auc, best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => history.is_empty(),
        };
        if improved {
            best_auc = auc;
            history.best_epoch = epoch;
            best_params = snapshot_params(&model.store);
        }
        history.train_loss.push(loss);
        history.val_auc.push(auc);
        history.wall_clock_secs.push(t0.elapsed().as_secs_f64());
        on_epoch(epoch, loss, auc);
    }

    Ok(Checkpoint {
        cfg,
        node_width,
        edge_width,
        tasks,
        epoch: history.len(),
        history,
        params: snapshot_params(&model.store),
        best_params,
        adam,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experts: usize,
    pub lambda: f64,
    /// Best-epoch validation AUC per seed.
    pub val_auc: Vec<Option<f64>>,
    pub mean_val_auc: Option<f64>,
    pub mean_test_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the best cell (highest mean validation AUC,
    /// ties broken by smaller M then smaller lambda).
    pub best: usize,
}

/// Grid-search every (M, lambda) cell over the given seeds. Cells run in
/// parallel; each is an independent deterministic `train`.
pub fn sweep(cfg: &TrainConfig, ds: &Dataset, seeds: &[u64]) -> Result<SweepTable, TrainError> {
    if cfg.grid_m.is_empty() || cfg.grid_lambda.is_empty() {
        return Err(TrainError::BadConfig(
            "sweep grids must be nonempty".to_string(),
        ));
    }
    let cells: Vec<(usize, f64)> = cfg
        .grid_m
        .iter()
        .flat_map(|&m| cfg.grid_lambda.iter().map(move |&l| (m, l)))
        .collect();
    let results: Vec<Result<SweepRow, TrainError>> = cells
        .par_iter()
        .map(|&(m, lambda)| {
            let mut val = Vec::with_capacity(seeds.len());
            let mut test_sum = 0.0;
            let mut test_count = 0usize;
            for &seed in seeds {
                let cell_cfg = TrainConfig {
                    experts: m,
                    lambda,
                    seed,
                    grid_m: vec![],
                    grid_lambda: vec![],
                    ..cfg.clone()
                };
                let ckpt = train(&cell_cfg, ds)?;
                let best_auc = ckpt
                    .history
                    .val_auc
                    .get(ckpt.history.best_epoch)
                    .copied()
                    .flatten();
                val.push(best_auc);
                let model = ckpt.best_model()?;
                if let Some(auc) =
                    crate::metrics::evaluate(&model, ds, Split::Test, cfg.variant.uses_mean_mix())?
                        .mean_auc
                {
                    test_sum += auc;
                    test_count += 1;
                }
            }
            let defined: Vec<f64> = val.iter().copied().flatten().collect();
            Ok(SweepRow {
                experts: m,
                lambda,
                mean_val_auc: if defined.is_empty() {
                    None
                } else {
                    Some(defined.iter().sum::<f64>() / defined.len() as f64)
                },
                mean_test_auc: if test_count > 0 {
                    Some(test_sum / test_count as f64)
                } else {
                    None
                },
                val_auc: val,
            })
        })
        .collect();
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        let better = match (row.mean_val_auc, rows[best].mean_val_auc) {
            (Some(a), Some(b)) => {
                a > b
                    || (a == b
                        && (row.experts, row.lambda) < (rows[best].experts, rows[best].lambda))
            }
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    Ok(SweepTable { rows, best })
}

// ---------------------------------------------------------------------------
// Gradient-check suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub variant: String,
    pub backbone: String,
    pub experts: usize,
    pub seed: u64,
    pub max_rel_error: f64,
}

/// Random small graphs with two-task labels and holes in the mask.
fn gradcheck_batch(seed: u64, tasks: usize) -> (Vec<Graph>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use rand::Rng;
    let mut rng = seeded_rng(derive_seed(seed, 0x6c4d));
    let mut graphs = Vec::new();
    let mut ys = Vec::new();
    let mut masks = Vec::new();
    for gi in 0..4 {
        let n = rng.gen_range(3..6);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen_bool(0.5) {
                    edges.push((u, v));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 1));
        }
        let nf = Mat::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ef = Mat::from_vec(
            edges.len(),
            2,
            (0..edges.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        graphs.push(Graph::undirected(n, &edges, nf, &ef));
        let y: Vec<f64> = (0..tasks).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        // Keep at least one unmasked task per sample.
        let mut mask: Vec<f64> = (0..tasks).map(|_| f64::from(rng.gen_bool(0.7))).collect();
        if mask.iter().all(|&m| m == 0.0) {
            mask[gi % tasks] = 1.0;
        }
        ys.push(y);
        masks.push(mask);
    }
    (graphs, ys, masks)
}

/// Finite-difference validation of every loss variant over small random
/// batches: d = 8, K = 2, both backbones, M in {1, 3}. Returns the worst
/// relative error per case; all must be below 1e-4.
pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<GradCheckCase>, TrainError> {
    let variants: Vec<(&str, Variant, f64)> = vec![
        ("pri", Variant::Pri, 0.0),
        ("post(lambda=0)", Variant::Post, 0.0),
        ("post(lambda=1)", Variant::Post, 1.0),
        ("post(lambda=10)", Variant::Post, 10.0),
        ("bce", Variant::BaselineBce, 0.0),
        ("focal(gamma=2)", Variant::BaselineFocal, 0.0),
        ("reweight", Variant::BaselineReweight, 0.0),
    ];
    let tasks = 2;
    let mut cases = Vec::new();
    for &seed in seeds {
        let (graphs, ys, masks) = gradcheck_batch(seed, tasks);
        // Class weights need both classes; use fixed moderate weights
        // instead of frequencies over a 4-sample batch.
        let weights = ClassWeights {
            per_task: vec![
                crate::baselines::TaskWeights {
                    positive: 3.0,
                    negative: 0.6,
                };
                tasks
            ],
        };
        for backbone in [BackboneKind::Gcn, BackboneKind::Gin] {
            for experts in [1usize, 3] {
                for (name, variant, lambda) in &variants {
                    // Build with the literal expert count: the mixture forms
                    // of the baseline losses are differentiable for any M,
                    // so their gradient paths are exercised at M = 3 too.
                    let backbone_cfg = BackboneConfig {
                        kind: backbone,
                        node_width: 3,
                        edge_width: 2,
                        hidden: 8,
                        layers: 2,
                    };
                    let moe_cfg = MoeConfig {
                        experts,
                        tasks,
                        embed_dim: 8,
                        tau: 1.0,
                        gate_mode: GateMode::Shared,
                        cosine_gate: false,
                        gate_bias: false,
                    };
                    let mut model = Model::init(backbone_cfg, moe_cfg, seed);
                    let batch: Vec<BatchSample> = graphs
                        .iter()
                        .zip(&ys)
                        .zip(&masks)
                        .map(|((g, y), m)| BatchSample {
                            graph: g,
                            y: y.clone(),
                            mask: m.clone(),
                        })
                        .collect();
                    // Freeze posteriors at the base point so finite
                    // differences see the same blocked weights the
                    // analytic gradient uses.
                    let frozen: Option<Vec<Mat>> = if *variant == Variant::Post {
                        let mut f = Vec::with_capacity(batch.len());
                        for s in &batch {
                            let x = model.backbone.extract_value(&model.store, s.graph)
                                .map_err(ModelError::from)?;
                            f.push(
                                model
                                    .head
                                    .frozen_posterior_value(&model.store, &x, &s.y, &s.mask)
                                    .map_err(ModelError::from)?,
                            );
                        }
                        Some(f)
                    } else {
                        None
                    };
                    let loss = match variant {
                        Variant::Pri => BatchLoss::Pri,
                        Variant::Post => BatchLoss::Post {
                            lambda: *lambda,
                            frozen: frozen.as_deref(),
                        },
                        Variant::MeanMix => BatchLoss::MeanMix,
                        Variant::BaselineBce => BatchLoss::Bce,
                        Variant::BaselineFocal => BatchLoss::Focal { gamma: 2.0 },
                        Variant::BaselineReweight => BatchLoss::Reweight { weights: &weights },
                    };
                    model.store.zero_grads();
                    let (_, grads) = batch_loss_and_grads(
                        &model.backbone,
                        &model.head,
                        &model.store,
                        &batch,
                        &loss,
                    )?;
                    for (id, g) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&grads) {
                        model.store.accumulate_grad(id, g)?;
                    }
                    let backbone_ref = &model.backbone;
                    let head_ref = &model.head;
                    let err = grad_check(
                        |p| {
                            batch_loss_value(backbone_ref, head_ref, p, &batch, &loss)
                                .expect("loss evaluates")
                        },
                        &mut model.store,
                        1e-5,
                    );
                    cases.push(GradCheckCase {
                        variant: name.to_string(),
                        backbone: format!("{backbone:?}").to_lowercase(),
                        experts,
                        seed,
                        max_rel_error: err,
                    });
                }
            }
        }
    }
    Ok(cases)
}
