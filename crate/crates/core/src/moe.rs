//! Mixture-of-diverse-experts head over graph embeddings.
//!
//! The gating network scores an embedding against `M` learned prototype
//! columns and softmax-normalizes at temperature `tau`; each expert is a
//! linear projection to per-task logits followed by a sigmoid. The class
//! probability decomposes as `p(y|x) = sum_z p(z|x) p(y|z,x)`.
//!
//! Two training weightings are supported: the prior weights `p(z|x)`
//! straight from the gate, and the Bayes posterior `p(z|x,y)`, which is
//! always treated as a gradient-blocked constant — during EM the E-step
//! freezes it and the M-step differentiates only the explicit parameter
//! dependence. The posterior loss adds `lambda * KL(post || prior)`, whose
//! gradient therefore reaches only the gate.
//!
//! Multi-task data uses either one shared gate for all tasks or one gate
//! per task; per-(sample, task) label masks remove missing entries from
//! every loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    glorot_uniform, log_sigmoid_clipped, sigmoid, stable_softmax, Mat, NodeId, ParamId,
    ParamStore, Tape,
};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("task index {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("individual gate mode requires a task index")]
    TaskRequired,
    #[error("embedding width {actual} does not match head dimension {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("posterior is undefined for a masked label")]
    MaskedLabel,
    #[error("invalid variational distribution: {0}")]
    InvalidVariational(String),
    #[error("batch has no unmasked (sample, task) pairs")]
    AllMasked,
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(f64),
}

/// Gate sharing scheme across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One task, one gate.
    SingleTask,
    /// One gate reused by every task.
    Shared,
    /// One gate per task.
    Individual,
}

impl std::str::FromStr for GateMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_task" => Ok(GateMode::SingleTask),
            "shared" => Ok(GateMode::Shared),
            "individual" => Ok(GateMode::Individual),
            other => Err(format!("unknown gate mode: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// Number of experts `M`.
    pub experts: usize,
    /// Number of tasks `T`.
    pub tasks: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    /// Softmax temperature; must be positive.
    pub tau: f64,
    pub gate_mode: GateMode,
    /// Score embeddings against length-normalized prototypes.
    pub cosine_gate: bool,
    /// Learnable per-gate bias added to the logits (off by default).
    pub gate_bias: bool,
}

/// Parameter handles for the head; values live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MoeHead {
    cfg: MoeConfig,
    gates: Vec<ParamId>,
    gate_biases: Vec<ParamId>,
    expert_w: Vec<ParamId>,
    expert_b: Vec<ParamId>,
}

/// Per-sample loss selector for [`MoeHead::sample_loss`].
#[derive(Debug, Clone)]
pub enum SampleLoss {
    /// Prior-weighted sum of expert log-likelihoods.
    Pri,
    /// Posterior-weighted log-likelihoods plus `lambda * KL(post || prior)`.
    /// `frozen` supplies gradient-blocked posterior weights (`T x M`); when
    /// absent they are computed from the current parameter values.
    Post { lambda: f64, frozen: Option<Mat> },
    /// Negative log of the uniform-average mixture probability.
    MeanMix,
    /// Negative log of the gated mixture probability.
    MixtureBce,
    /// Focal reweighting of the gated mixture probability.
    MixtureFocal { gamma: f64 },
    /// Mixture cross-entropy with a per-(task, observed-class) weight.
    MixtureReweight { weights: Vec<f64> },
}

impl MoeHead {
    pub fn init(cfg: MoeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.experts >= 1, "need at least one expert");
        assert!(cfg.tasks >= 1, "need at least one task");
        assert!(cfg.tau > 0.0, "temperature must be positive");
        if cfg.gate_mode == GateMode::SingleTask {
            assert_eq!(cfg.tasks, 1, "single_task gate mode requires T = 1");
        }
        let gate_count = match cfg.gate_mode {
            GateMode::SingleTask | GateMode::Shared => 1,
            GateMode::Individual => cfg.tasks,
        };
        let d = cfg.embed_dim;
        let mut gates = Vec::with_capacity(gate_count);
        let mut gate_biases = Vec::new();
        for gi in 0..gate_count {
            gates.push(store.register(format!("moe.gate{gi}"), glorot_uniform(d, cfg.experts, rng)));
        }
        if cfg.gate_bias {
            for gi in 0..gate_count {
                gate_biases.push(store.register(format!("moe.gate{gi}.bias"), Mat::zeros(1, cfg.experts)));
            }
        }
        let mut expert_w = Vec::with_capacity(cfg.experts);
        let mut expert_b = Vec::with_capacity(cfg.experts);
        for z in 0..cfg.experts {
            expert_w.push(store.register(format!("moe.expert{z}.w"), glorot_uniform(d, cfg.tasks, rng)));
            expert_b.push(store.register(format!("moe.expert{z}.b"), Mat::zeros(1, cfg.tasks)));
        }
        MoeHead {
            cfg,
            gates,
            gate_biases,
            expert_w,
            expert_b,
        }
    }

    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    fn gate_index(&self, task: Option<usize>) -> Result<usize, MoeError> {
        match self.cfg.gate_mode {
            GateMode::SingleTask | GateMode::Shared => Ok(0),
            GateMode::Individual => {
                let t = task.ok_or(MoeError::TaskRequired)?;
                if t >= self.cfg.tasks {
                    return Err(MoeError::TaskOutOfRange {
                        task: t,
                        tasks: self.cfg.tasks,
                    });
                }
                Ok(t)
            }
        }
    }

    fn check_task(&self, task: usize) -> Result<(), MoeError> {
        if task >= self.cfg.tasks {
            return Err(MoeError::TaskOutOfRange {
                task,
                tasks: self.cfg.tasks,
            });
        }
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<(), MoeError> {
        if x.len() != self.cfg.embed_dim {
            return Err(MoeError::WidthMismatch {
                expected: self.cfg.embed_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    // ----- plain-value paths (inference and probes) ------------------------

    fn gate_logits_value(&self, store: &ParamStore, x: &[f64], gate_idx: usize) -> Vec<f64> {
        let w = store.value(self.gates[gate_idx]);
        let m = self.cfg.experts;
        let mut logits = vec![0.0; m];
        if self.cfg.cosine_gate {
            let xn = l2_normalized(x);
            for z in 0..m {
                let mut nrm = 0.0;
                for i in 0..x.len() {
                    nrm += w.get(i, z) * w.get(i, z);
                }
                let nrm = nrm.sqrt();
                let mut dot = 0.0;
                for i in 0..x.len() {
                    let wv = if nrm > 0.0 { w.get(i, z) / nrm } else { w.get(i, z) };
                    dot += xn[i] * wv;
                }
                logits[z] = dot;
            }
        } else {
            for z in 0..m {
                let mut dot = 0.0;
                for i in 0..x.len() {
                    dot += x[i] * w.get(i, z);
                }
                logits[z] = dot;
            }
        }
        if let Some(&bias) = self.gate_biases.get(gate_idx) {
            let b = store.value(bias);
            for z in 0..m {
                logits[z] += b.get(0, z);
            }
        }
        logits
    }

    /// Prior expert distribution `p(z|x)` for one task's gate.
    pub fn gate_prior(
        &self,
        store: &ParamStore,
        x: &[f64],
        task: Option<usize>,
    ) -> Result<Vec<f64>, MoeError> {
        self.check_width(x)?;
        let gi = self.gate_index(task)?;
        let logits = self.gate_logits_value(store, x, gi);
        Ok(stable_softmax(&logits, self.cfg.tau).expect("finite gate logits"))
    }

    /// Log of the prior distribution, computed as a log-softmax (finite
    /// even when the probabilities underflow).
    pub fn gate_log_prior(
        &self,
        store: &ParamStore,
        x: &[f64],
        task: Option<usize>,
    ) -> Result<Vec<f64>, MoeError> {
        self.check_width(x)?;
        let gi = self.gate_index(task)?;
        let mut logits = self.gate_logits_value(store, x, gi);
        crate::numerics::log_softmax_in_place(&mut logits, self.cfg.tau);
        Ok(logits)
    }

    /// Per-(expert, task) positive-class probabilities, `M x T`.
    pub fn expert_predict(&self, store: &ParamStore, x: &[f64]) -> Result<Mat, MoeError> {
        Ok(self.expert_logits_value(store, x)?.map(sigmoid))
    }

    /// Per-(expert, task) pre-sigmoid logits, `M x T`.
    pub fn expert_logits_value(&self, store: &ParamStore, x: &[f64]) -> Result<Mat, MoeError> {
        self.check_width(x)?;
        let (m, t) = (self.cfg.experts, self.cfg.tasks);
        let mut out = Mat::zeros(m, t);
        for z in 0..m {
            let w = store.value(self.expert_w[z]);
            let b = store.value(self.expert_b[z]);
            for task in 0..t {
                // Same accumulation grouping as the tape path (product sum
                // first, bias last) so the two routes agree bit-for-bit.
                let mut s = 0.0;
                for i in 0..x.len() {
                    s += x[i] * w.get(i, task);
                }
                out.set(z, task, s + b.get(0, task));
            }
        }
        Ok(out)
    }

    /// Gated mixture probability `p(y=1|x)` for `task`.
    pub fn mixture_predict(
        &self,
        store: &ParamStore,
        x: &[f64],
        task: usize,
    ) -> Result<f64, MoeError> {
        self.check_task(task)?;
        let prior = self.gate_prior(store, x, Some(task))?;
        let probs = self.expert_predict(store, x)?;
        Ok((0..self.cfg.experts)
            .map(|z| prior[z] * probs.get(z, task))
            .sum())
    }

    /// Uniform-average mixture probability (the gate ablation).
    pub fn mean_mix_predict(
        &self,
        store: &ParamStore,
        x: &[f64],
        task: usize,
    ) -> Result<f64, MoeError> {
        self.check_task(task)?;
        let probs = self.expert_predict(store, x)?;
        let m = self.cfg.experts as f64;
        Ok((0..self.cfg.experts)
            .map(|z| probs.get(z, task))
            .sum::<f64>()
            / m)
    }

    /// Bayes posterior `p(z|x,y)` over experts, computed in log space.
    /// Always gradient-blocked: the result is plain data.
    pub fn posterior(
        &self,
        store: &ParamStore,
        x: &[f64],
        y: Option<f64>,
        task: usize,
    ) -> Result<Vec<f64>, MoeError> {
        let y = y.ok_or(MoeError::MaskedLabel)?;
        if y != 0.0 && y != 1.0 {
            return Err(MoeError::BadLabel(y));
        }
        self.check_task(task)?;
        let lp = self.gate_log_prior(store, x, Some(task))?;
        let logits = self.expert_logits_value(store, x)?;
        let mut lw: Vec<f64> = (0..self.cfg.experts)
            .map(|z| lp[z] + bernoulli_log_lik(logits.get(z, task), y))
            .collect();
        crate::numerics::log_softmax_in_place(&mut lw, 1.0);
        Ok(lw.iter().map(|v| v.exp()).collect())
    }

    /// Mixture log-likelihood and the variational lower bound for an
    /// arbitrary distribution `q` over experts:
    /// `bound = E_q[log p(y|x,z)] - KL(q || p(z|x))`.
    /// The bound never exceeds the log-likelihood and is tight at the
    /// posterior.
    pub fn elbo_probe(
        &self,
        store: &ParamStore,
        x: &[f64],
        y: f64,
        q: &[f64],
        task: usize,
    ) -> Result<(f64, f64), MoeError> {
        self.check_task(task)?;
        validate_distribution(q, self.cfg.experts)?;
        let lp = self.gate_log_prior(store, x, Some(task))?;
        let logits = self.expert_logits_value(store, x)?;
        let ll: Vec<f64> = (0..self.cfg.experts)
            .map(|z| bernoulli_log_lik(logits.get(z, task), y))
            .collect();
        let log_lik = log_sum_exp(
            &(0..self.cfg.experts)
                .map(|z| lp[z] + ll[z])
                .collect::<Vec<_>>(),
        );
        let mut bound = 0.0;
        for z in 0..self.cfg.experts {
            if q[z] > 0.0 {
                bound += q[z] * (ll[z] - (q[z].ln() - lp[z]));
            }
        }
        Ok((log_lik, bound))
    }

    // ----- tape paths (training) -------------------------------------------

    /// Gate prior matrix `T x M` on the tape (per-task rows; shared gates
    /// are computed once and repeated).
    pub fn gate_matrix(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let logits = self.gate_logit_rows(tape, store, x);
        match self.cfg.gate_mode {
            GateMode::SingleTask | GateMode::Shared => {
                let p = tape.softmax_rows(logits[0], self.cfg.tau);
                tape.repeat_rows(p, self.cfg.tasks)
            }
            GateMode::Individual => {
                let stacked = tape.vstack(logits);
                tape.softmax_rows(stacked, self.cfg.tau)
            }
        }
    }

    /// Log of [`Self::gate_matrix`], as a log-softmax.
    pub fn gate_log_matrix(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let logits = self.gate_logit_rows(tape, store, x);
        match self.cfg.gate_mode {
            GateMode::SingleTask | GateMode::Shared => {
                let lp = tape.log_softmax_rows(logits[0], self.cfg.tau);
                tape.repeat_rows(lp, self.cfg.tasks)
            }
            GateMode::Individual => {
                let stacked = tape.vstack(logits);
                tape.log_softmax_rows(stacked, self.cfg.tau)
            }
        }
    }

    fn gate_logit_rows(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Vec<NodeId> {
        let xin = if self.cfg.cosine_gate {
            tape.normalize_rows(x)
        } else {
            x
        };
        let mut rows = Vec::with_capacity(self.gates.len());
        for (gi, gate) in self.gates.iter().enumerate() {
            let w = tape.param(store, *gate);
            let w = if self.cfg.cosine_gate {
                let wt = tape.transpose(w);
                let wt = tape.normalize_rows(wt);
                tape.transpose(wt)
            } else {
                w
            };
            let mut row = tape.matmul(xin, w);
            if let Some(&bias) = self.gate_biases.get(gi) {
                let b = tape.param(store, bias);
                row = tape.add(row, b);
            }
            rows.push(row);
        }
        rows
    }

    /// Expert logit matrix `M x T` on the tape.
    pub fn expert_logit_matrix(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut rows = Vec::with_capacity(self.cfg.experts);
        for z in 0..self.cfg.experts {
            let w = tape.param(store, self.expert_w[z]);
            let b = tape.param(store, self.expert_b[z]);
            let s = tape.matmul(x, w);
            rows.push(tape.add(s, b));
        }
        tape.vstack(rows)
    }

    /// Unnormalized per-sample loss: the sum over unmasked tasks of the
    /// selected per-(sample, task) term, plus the number of unmasked pairs.
    /// Batch-level code divides the summed terms by the total pair count.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        y: &[f64],
        mask: &[f64],
        loss: &SampleLoss,
    ) -> (NodeId, usize) {
        let t = self.cfg.tasks;
        let m = self.cfg.experts;
        assert_eq!(y.len(), t, "label width mismatch");
        assert_eq!(mask.len(), t, "mask width mismatch");
        let pairs = mask.iter().filter(|&&v| v != 0.0).count();

        let s = self.expert_logit_matrix(tape, store, x); // M x T
        let ll1 = tape.log_sigmoid(s);
        let neg_s = tape.scale(s, -1.0);
        let ll0 = tape.log_sigmoid(neg_s);

        let y_big = tape.constant(broadcast_rows(y, m));
        let ym_big = tape.constant(broadcast_rows(&one_minus(y), m));
        let mask_row = Mat::row_vector(mask.to_vec());

        let node = match loss {
            SampleLoss::Pri => {
                let p = self.gate_matrix(tape, store, x); // T x M
                let a = tape.mul_elem(y_big, ll1);
                let b = tape.mul_elem(ym_big, ll0);
                let llh = tape.add(a, b); // M x T
                let llh_t = tape.transpose(llh); // T x M
                let weighted = tape.mul_elem(p, llh_t);
                let mask_tm = tape.constant(broadcast_cols(mask, m));
                let masked = tape.mul_elem(weighted, mask_tm);
                let sum = tape.sum_all(masked);
                tape.scale(sum, -1.0)
            }
            SampleLoss::Post { lambda, frozen } => {
                let lp = self.gate_log_matrix(tape, store, x); // T x M
                let post = match frozen {
                    Some(q) => {
                        assert_eq!(q.shape(), (t, m), "frozen posterior shape");
                        q.clone()
                    }
                    None => posterior_from_values(tape.value(lp), tape.value(s), y, mask),
                };
                let a = tape.mul_elem(y_big, ll1);
                let b = tape.mul_elem(ym_big, ll0);
                let llh = tape.add(a, b);
                let llh_t = tape.transpose(llh);
                let post_mask = {
                    let mut pm = post.clone();
                    for task in 0..t {
                        for z in 0..m {
                            pm.set(task, z, pm.get(task, z) * mask[task]);
                        }
                    }
                    pm
                };
                let post_mask_c = tape.constant(post_mask.clone());
                let weighted = tape.mul_elem(post_mask_c, llh_t);
                let sum = tape.sum_all(weighted);
                let first = tape.scale(sum, -1.0);
                // KL(post || prior) = sum post ln post - sum post ln prior;
                // the entropy part is constant under the gradient block.
                let mut entropy = 0.0;
                for task in 0..t {
                    if mask[task] != 0.0 {
                        for z in 0..m {
                            let p = post.get(task, z);
                            if p > 0.0 {
                                entropy += p * p.ln();
                            }
                        }
                    }
                }
                let post_mask_c2 = tape.constant(post_mask);
                let cross = tape.mul_elem(lp, post_mask_c2);
                let cross_sum = tape.sum_all(cross);
                let neg_cross = tape.scale(cross_sum, -1.0);
                let ent_node = tape.constant(Mat::from_vec(1, 1, vec![entropy]).unwrap());
                let kl = tape.add(ent_node, neg_cross);
                let kl_scaled = tape.scale(kl, *lambda);
                tape.add(first, kl_scaled)
            }
            SampleLoss::MeanMix => {
                let lw = Mat::filled(t, m, -( m as f64).ln());
                let lw_node = tape.constant(lw);
                self.mixture_nll(tape, lw_node, ll1, ll0, y, &mask_row)
            }
            SampleLoss::MixtureBce => {
                let lp = self.gate_log_matrix(tape, store, x);
                self.mixture_nll(tape, lp, ll1, ll0, y, &mask_row)
            }
            SampleLoss::MixtureReweight { weights } => {
                assert_eq!(weights.len(), t, "reweight width mismatch");
                let lp = self.gate_log_matrix(tape, store, x);
                let wm: Vec<f64> = mask.iter().zip(weights).map(|(m, w)| m * w).collect();
                self.mixture_nll(tape, lp, ll1, ll0, y, &Mat::row_vector(wm))
            }
            SampleLoss::MixtureFocal { gamma } => {
                let p = self.gate_matrix(tape, store, x); // T x M
                let q = tape.sigmoid(s); // M x T
                let qt = tape.transpose(q); // T x M
                let mix = tape.mul_elem(p, qt);
                let pbar_col = tape.row_sums(mix); // T x 1
                let pbar = tape.transpose(pbar_col); // 1 x T
                let yc = tape.constant(Mat::row_vector(y.to_vec()));
                let ymc = tape.constant(Mat::row_vector(one_minus(y)));
                let neg = tape.scale(pbar, -1.0);
                let one_minus_pbar = tape.add_const(neg, 1.0);
                let a = tape.mul_elem(yc, pbar);
                let b = tape.mul_elem(ymc, one_minus_pbar);
                let pt = tape.add(a, b); // true-class probability
                let negt = tape.scale(pt, -1.0);
                let one_minus_pt = tape.add_const(negt, 1.0);
                let w = tape.pow_const(one_minus_pt, *gamma);
                let lpt = tape.log_clipped(pt);
                let weighted = tape.mul_elem(w, lpt);
                let mask_c = tape.constant(mask_row.clone());
                let masked = tape.mul_elem(weighted, mask_c);
                let sum = tape.sum_all(masked);
                tape.scale(sum, -1.0)
            }
        };
        (node, pairs)
    }

    /// `- sum_t coeff_t * log sum_z exp(lw[t,z] + ll_y[z,t])`, the negative
    /// mixture log-likelihood with per-task coefficients (mask or
    /// mask-times-weight).
    fn mixture_nll(
        &self,
        tape: &mut Tape,
        log_weights: NodeId, // T x M
        ll1: NodeId,         // M x T
        ll0: NodeId,         // M x T
        y: &[f64],
        coeff_row: &Mat, // 1 x T
    ) -> NodeId {
        let ll1_t = tape.transpose(ll1); // T x M
        let ll0_t = tape.transpose(ll0);
        let w1 = tape.add(log_weights, ll1_t);
        let w0 = tape.add(log_weights, ll0_t);
        let w1t = tape.transpose(w1); // M x T
        let w0t = tape.transpose(w0);
        let v1 = tape.log_sum_exp_cols(w1t); // 1 x T
        let v0 = tape.log_sum_exp_cols(w0t);
        let yc = tape.constant(Mat::row_vector(y.to_vec()));
        let ymc = tape.constant(Mat::row_vector(one_minus(y)));
        let a = tape.mul_elem(yc, v1);
        let b = tape.mul_elem(ymc, v0);
        let term = tape.add(a, b);
        let coeff = tape.constant(coeff_row.clone());
        let masked = tape.mul_elem(term, coeff);
        let sum = tape.sum_all(masked);
        tape.scale(sum, -1.0)
    }

    /// Gradient-blocked posterior matrix (`T x M`) for one sample at the
    /// current parameter values; masked tasks get uniform placeholder rows
    /// that no loss term reads.
    pub fn frozen_posterior_value(
        &self,
        store: &ParamStore,
        x: &[f64],
        y: &[f64],
        mask: &[f64],
    ) -> Result<Mat, MoeError> {
        self.check_width(x)?;
        let t = self.cfg.tasks;
        let m = self.cfg.experts;
        let logits = self.expert_logits_value(store, x)?;
        let mut out = Mat::filled(t, m, 1.0 / m as f64);
        for task in 0..t {
            if mask[task] == 0.0 {
                continue;
            }
            let lp = self.gate_log_prior(store, x, Some(task))?;
            let mut lw: Vec<f64> = (0..m)
                .map(|z| lp[z] + bernoulli_log_lik(logits.get(z, task), y[task]))
                .collect();
            crate::numerics::log_softmax_in_place(&mut lw, 1.0);
            for z in 0..m {
                out.set(task, z, lw[z].exp());
            }
        }
        Ok(out)
    }

    // ----- batch-level value-only losses (embedding inputs) ----------------

    /// Mean prior-weighted loss over unmasked (sample, task) pairs.
    pub fn loss_pri(
        &self,
        store: &ParamStore,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        masks: &[Vec<f64>],
    ) -> Result<f64, MoeError> {
        self.batch_loss_value(store, xs, ys, masks, |_| SampleLoss::Pri)
    }

    /// Mean posterior-weighted loss with the KL regularizer.
    pub fn loss_post(
        &self,
        store: &ParamStore,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        masks: &[Vec<f64>],
        lambda: f64,
    ) -> Result<f64, MoeError> {
        self.batch_loss_value(store, xs, ys, masks, |_| SampleLoss::Post {
            lambda,
            frozen: None,
        })
    }

    fn batch_loss_value<F>(
        &self,
        store: &ParamStore,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        masks: &[Vec<f64>],
        pick: F,
    ) -> Result<f64, MoeError>
    where
        F: Fn(usize) -> SampleLoss,
    {
        assert_eq!(xs.len(), ys.len());
        assert_eq!(xs.len(), masks.len());
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..xs.len() {
            self.check_width(&xs[i])?;
            let mut tape = Tape::new();
            let x = tape.constant(Mat::row_vector(xs[i].clone()));
            let (node, p) = self.sample_loss(&mut tape, store, x, &ys[i], &masks[i], &pick(i));
            total += tape.scalar(node);
            pairs += p;
        }
        if pairs == 0 {
            return Err(MoeError::AllMasked);
        }
        Ok(total / pairs as f64)
    }
}

/// `y log q + (1-y) log(1-q)` from the pre-sigmoid logit, with the
/// probability clipped to `[1e-12, 1 - 1e-12]` before the log.
pub fn bernoulli_log_lik(logit: f64, y: f64) -> f64 {
    y * log_sigmoid_clipped(logit) + (1.0 - y) * log_sigmoid_clipped(-logit)
}

fn posterior_from_values(lp: &Mat, s: &Mat, y: &[f64], mask: &[f64]) -> Mat {
    let (t, m) = lp.shape();
    let mut out = Mat::filled(t, m, 1.0 / m as f64);
    for task in 0..t {
        if mask[task] == 0.0 {
            continue;
        }
        let mut lw: Vec<f64> = (0..m)
            .map(|z| lp.get(task, z) + bernoulli_log_lik(s.get(z, task), y[task]))
            .collect();
        crate::numerics::log_softmax_in_place(&mut lw, 1.0);
        for z in 0..m {
            out.set(task, z, lw[z].exp());
        }
    }
    out
}

fn validate_distribution(q: &[f64], m: usize) -> Result<(), MoeError> {
    if q.len() != m {
        return Err(MoeError::InvalidVariational(format!(
            "length {} does not match {} experts",
            q.len(),
            m
        )));
    }
    if q.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(MoeError::InvalidVariational(
            "entries must be finite and nonnegative".to_string(),
        ));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(MoeError::InvalidVariational(format!(
            "sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn one_minus(y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| 1.0 - v).collect()
}

fn l2_normalized(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter().map(|v| v / n).collect()
    } else {
        x.to_vec()
    }
}

/// `rows` copies of `row` stacked into a matrix.
fn broadcast_rows(row: &[f64], rows: usize) -> Mat {
    let mut m = Mat::zeros(rows, row.len());
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

/// Column vector `col` broadcast across `cols` columns.
fn broadcast_cols(col: &[f64], cols: usize) -> Mat {
    let mut m = Mat::zeros(col.len(), cols);
    for (r, &v) in col.iter().enumerate() {
        for c in 0..cols {
            m.set(r, c, v);
        }
    }
    m
}
