//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::param::{ParamId, ParamStore};
use crate::error::{MfnError, Result};

/// Compares an analytic gradient for one parameter against central finite
/// differences of `forward`, coordinate by coordinate.
///
/// Checks every coordinate when the parameter has at most `max_coords`
/// entries, otherwise a seeded random subset of `max_coords` of them.
/// Returns the maximum relative error, with the relative denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `forward` must be deterministic; two baseline evaluations are compared
/// bit-for-bit before any perturbation.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    id: ParamId,
    analytic: &Matrix,
    mut forward: F,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(MfnError::Config(format!(
            "finite_diff_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if analytic.shape() != store.value(id).shape() {
        return Err(MfnError::Contract(format!(
            "analytic gradient shape {:?} does not match parameter shape {:?}",
            analytic.shape(),
            store.value(id).shape()
        )));
    }

    let first = forward(store)?;
    let second = forward(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(MfnError::NonDeterministic { first, second });
    }

    let numel = store.value(id).numel();
    let coords: Vec<usize> = if numel <= max_coords {
        (0..numel).collect()
    } else {
        let mut all: Vec<usize> = (0..numel).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        let mut picked: Vec<usize> = all.into_iter().take(max_coords).collect();
        picked.sort_unstable();
        picked
    };

    let cols = store.value(id).cols();
    let mut max_rel = 0.0_f64;
    for flat in coords {
        let (r, c) = (flat / cols, flat % cols);
        let original = store.value(id).get(r, c);

        store.get_mut(id).value.set(r, c, original + epsilon);
        let plus = forward(store)?;
        store.get_mut(id).value.set(r, c, original - epsilon);
        let minus = forward(store)?;
        store.get_mut(id).value.set(r, c, original);

        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(r, c);
        if a == 0.0 && numeric == 0.0 {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;
    use rand::{Rng, SeedableRng};

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_loss_is_near_exact() {
        let mut store = ParamStore::new();
        let id = store.add("p", seeded_matrix(3, 4, 1));

        let loss_of = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let p = tape.param(s, id);
            let sq = tape.mul_elem(p, p)?;
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul_elem(p, p).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(p).unwrap().clone();

        let err = finite_diff_check(&mut store, id, &analytic, loss_of, 1e-5, 64, 0).unwrap();
        assert!(err < 1e-7, "quadratic check error {err}");
    }

    #[test]
    fn swish_chain_passes_tightly() {
        let mut store = ParamStore::new();
        let id = store.add("w", seeded_matrix(4, 4, 2));
        let x = seeded_matrix(2, 4, 3);

        let loss_of = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let w = tape.param(s, id);
            let xn = tape.constant(x.clone());
            let h = tape.matmul(xn, w)?;
            let a = tape.swish(h);
            let b = tape.swish(a);
            let loss = tape.sum_all(b);
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let xn = tape.constant(x.clone());
        let h = tape.matmul(xn, w).unwrap();
        let a = tape.swish(h);
        let b = tape.swish(a);
        let loss = tape.sum_all(b);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().clone();

        let err = finite_diff_check(&mut store, id, &analytic, loss_of, 1e-5, 64, 0).unwrap();
        assert!(err < 1e-6, "swish chain error {err}");
    }

    #[test]
    fn epsilon_out_of_range_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::scalar(1.0));
        let analytic = Matrix::scalar(0.0);
        let err = finite_diff_check(&mut store, id, &analytic, |_| Ok(0.0), 1e-2, 8, 0);
        assert!(matches!(err, Err(MfnError::Config(_))));
    }

    #[test]
    fn non_deterministic_forward_detected() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::scalar(1.0));
        let analytic = Matrix::scalar(0.0);
        let mut calls = 0.0;
        let err = finite_diff_check(
            &mut store,
            id,
            &analytic,
            move |_| {
                calls += 1.0;
                Ok(calls)
            },
            1e-5,
            8,
            0,
        );
        assert!(matches!(err, Err(MfnError::NonDeterministic { .. })));
    }

    #[test]
    fn samples_large_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("p", seeded_matrix(20, 20, 4));
        let loss_of = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let p = tape.param(s, id);
            let sq = tape.mul_elem(p, p)?;
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul_elem(p, p).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(p).unwrap().clone();
        let err = finite_diff_check(&mut store, id, &analytic, loss_of, 1e-5, 48, 9).unwrap();
        assert!(err < 1e-7);
    }
}
