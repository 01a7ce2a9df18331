//! Reference imbalanced-learning losses: plain binary cross-entropy,
//! focal loss, and inverse-class-frequency re-weighting.

use thiserror::Error;

use crate::graph::LabelSet;
use crate::numerics::PROB_CLIP;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("task {task} has no unmasked samples of class {class}; re-weighting is degenerate")]
    DegenerateClass { task: usize, class: u8 },
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// `-(y log p + (1-y) log(1-p))` with the probability clipped before logs.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clip(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Focal loss `-(1 - p_t)^gamma * log(p_t)` where `p_t` is the probability
/// assigned to the true class. `gamma = 0` reduces to [`bce`] exactly.
pub fn focal(p: f64, y: f64, gamma: f64) -> f64 {
    assert!(gamma >= 0.0, "focal gamma must be nonnegative");
    let p = clip(p);
    let pt = if y > 0.5 { p } else { 1.0 - p };
    let weight = if gamma == 0.0 {
        1.0
    } else {
        (1.0 - pt).powf(gamma)
    };
    -(weight * pt.ln())
}

/// Per-class weights for one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub positive: f64,
    pub negative: f64,
}

/// Inverse-frequency class weights per task: `w_c = n / (2 * count_c)` over
/// unmasked labels, so balanced data yields `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub per_task: Vec<TaskWeights>,
}

impl ClassWeights {
    /// Uniform weights (plain BCE).
    pub fn unit(tasks: usize) -> Self {
        ClassWeights {
            per_task: vec![
                TaskWeights {
                    positive: 1.0,
                    negative: 1.0,
                };
                tasks
            ],
        }
    }

    /// Weight applied to a `(task, label)` pair.
    pub fn weight(&self, task: usize, y: f64) -> f64 {
        if y > 0.5 {
            self.per_task[task].positive
        } else {
            self.per_task[task].negative
        }
    }
}

/// Compute inverse-frequency weights over the given samples (typically the
/// training split). A task missing one class entirely is degenerate and
/// rejected: the re-weighted variant cannot train on it.
pub fn inverse_frequency_weights(
    labels: &LabelSet,
    samples: &[usize],
) -> Result<ClassWeights, BaselineError> {
    let t = labels.num_tasks();
    let mut per_task = Vec::with_capacity(t);
    for task in 0..t {
        let mut pos = 0usize;
        let mut neg = 0usize;
        for &i in samples {
            match labels.get(i, task) {
                Some(y) if y > 0.5 => pos += 1,
                Some(_) => neg += 1,
                None => {}
            }
        }
        if pos == 0 {
            return Err(BaselineError::DegenerateClass { task, class: 1 });
        }
        if neg == 0 {
            return Err(BaselineError::DegenerateClass { task, class: 0 });
        }
        let n = (pos + neg) as f64;
        per_task.push(TaskWeights {
            positive: n / (2.0 * pos as f64),
            negative: n / (2.0 * neg as f64),
        });
    }
    Ok(ClassWeights { per_task })
}
