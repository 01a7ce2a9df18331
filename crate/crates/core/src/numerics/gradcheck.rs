//! Central finite-difference validation of analytic gradients.

use super::ParamStore;

/// Relative-error denominator floor; avoids blowups at true-zero gradients.
const DENOM_FLOOR: f64 = 1e-8;

/// Compare the gradients currently accumulated in `params` against central
/// finite differences of `loss_fn`, perturbing one scalar coordinate at a
/// time. Returns the worst relative error over all coordinates, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The caller runs its backward pass first so the accumulators hold the
/// analytic gradient at the current parameter point. `loss_fn` is evaluated
/// at perturbed copies of that point; any quantity that must stay frozen
/// across evaluations (for example posterior expert weights) is captured by
/// the closure.
pub fn grad_check<F>(loss_fn: F, params: &mut ParamStore, h: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        for j in 0..n {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + h;
            let up = loss_fn(params);
            params.value_mut(id).data_mut()[j] = orig - h;
            let down = loss_fn(params);
            params.value_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let analytic = params.grad(id).data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mat, Tape};

    #[test]
    fn linear_loss_is_exact() {
        // loss = sum(W): gradient is all ones, and central differences are
        // exact for linear functions.
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::from_vec(2, 2, vec![0.3, -1.2, 0.0, 4.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum_all(w);
        tape.backward(loss)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        let err = grad_check(
            |p| {
                let mut t = Tape::new();
                let w = t.param(p, id);
                let l = t.sum_all(w);
                t.scalar(l)
            },
            &mut store,
            1e-5,
        );
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn quadratic_loss_gradient_equals_w() {
        // loss = 0.5 * ||W||^2: gradient equals W itself.
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::from_vec(1, 3, vec![0.5, -2.0, 3.25]).unwrap());
        let build = |p: &ParamStore| {
            let mut t = Tape::new();
            let w = t.param(p, id);
            let sq = t.mul_elem(w, w);
            let half = t.scale(sq, 0.5);
            let l = t.sum_all(half);
            (t, l)
        };
        let (tape, loss) = build(&store);
        tape.backward(loss)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        assert_eq!(store.grad(id).data(), store.value(id).data());
        let err = grad_check(
            |p| {
                let (t, l) = build(p);
                t.scalar(l)
            },
            &mut store,
            1e-5,
        );
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let build = |p: &ParamStore| {
            let mut t = Tape::new();
            let w = t.param(p, id);
            let sq = t.mul_elem(w, w);
            let l = t.sum_all(sq);
            (t, l)
        };
        let (tape, loss) = build(&store);
        tape.backward(loss)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        // Inflate the stored gradient by 10%.
        let inflating = store.grad(id).scale(0.1);
        store.accumulate_grad(id, &inflating).unwrap();
        let err = grad_check(
            |p| {
                let (t, l) = build(p);
                t.scalar(l)
            },
            &mut store,
            1e-5,
        );
        assert!((err - 0.1 / 1.1).abs() < 1e-3, "err = {err}");
    }
}
