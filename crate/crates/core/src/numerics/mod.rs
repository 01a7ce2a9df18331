//! Dense matrices, reverse-mode differentiation, Adam, and
//! finite-difference gradient validation. Everything is double precision.

mod adam;
mod gradcheck;
mod mat;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use mat::Mat;
pub use params::{ParamId, ParamStore};
pub use tape::{NodeId, Tape, TapeGrads};

pub(crate) use tape::{log_sigmoid_clipped, log_softmax_row_inplace, softmax_row_inplace};

/// In-place log-softmax of a logit vector at temperature `tau`.
pub fn log_softmax_in_place(logits: &mut [f64], tau: f64) {
    log_softmax_row_inplace(logits, tau);
}

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("non-finite input: {0}")]
    NonFiniteInput(f64),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
}

/// `softmax(logits / tau)` computed with max-subtraction for stability.
/// Entries are in `(0, 1]` and sum to 1 up to rounding.
pub fn stable_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>, NumericsError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(NumericsError::InvalidTemperature(tau));
    }
    if let Some(&bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(NumericsError::NonFiniteInput(bad));
    }
    let mut out = logits.to_vec();
    softmax_row_inplace(&mut out, tau);
    Ok(out)
}

/// Logistic function `1 / (1 + e^{-x})`; saturates without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic sub-stream derivation (splitmix64 over `base ^ stream`).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded RNG used everywhere randomness is needed; the generator is fixed
/// so runs reproduce across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-style uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Mat::from_vec(rows, cols, data).expect("glorot dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn softmax_symmetric_pair() {
        let p = stable_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_logits_uniform() {
        for &c in &[-3.0, 0.0, 17.5] {
            for &tau in &[0.1, 1.0, 10.0] {
                let p = stable_softmax(&[c, c, c], tau).unwrap();
                for v in p {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_ln2_case() {
        // softmax([ln 2, 0]) = [2/3, 1/3]: exp-normalize directly.
        let p = stable_softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(stable_softmax(&[1.0], 0.0).is_err());
        assert!(stable_softmax(&[1.0], -1.0).is_err());
        assert!(stable_softmax(&[f64::NAN], 1.0).is_err());
        assert!(stable_softmax(&[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        // sigmoid(ln 3) = 3/4 algebraically.
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
        // Deep saturation stays finite and positive.
        let tiny = sigmoid(-1000.0);
        assert!(tiny > 0.0 || tiny == 0.0);
        assert!(tiny <= 1e-300);
        assert!(sigmoid(1000.0) <= 1.0);
    }

    #[test]
    fn sigmoid_antisymmetry() {
        for &x in &[-5.0, -0.3, 0.7, 12.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one_many_draws() {
        // 1e5 random logit vectors across the spec'd temperature range.
        let mut rng = seeded_rng(7);
        for i in 0..100_000 {
            let n = 1 + (i % 8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let tau = [0.1, 1.0, 10.0][i % 3];
            let p = stable_softmax(&logits, tau).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            logits in prop::collection::vec(-20.0..20.0f64, 1..6),
            shift in -50.0..50.0f64,
            tau in prop::sample::select(vec![0.1, 1.0, 10.0]),
        ) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let a = stable_softmax(&logits, tau).unwrap();
            let b = stable_softmax(&shifted, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_temperature_scaling(
            logits in prop::collection::vec(-10.0..10.0f64, 2..6),
            c in 0.05..20.0f64,
        ) {
            // Scaling logits and tau together leaves the distribution unchanged.
            let scaled: Vec<f64> = logits.iter().map(|v| v * c).collect();
            let a = stable_softmax(&logits, 1.0).unwrap();
            let b = stable_softmax(&scaled, c).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(0, 0);
        let b = derive_seed(0, 1);
        let c = derive_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(0, 0));
    }
}
