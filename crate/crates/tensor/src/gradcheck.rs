//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, Grads, ParamStore};
use crate::tape::{Tape, Var};

/// Outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` must build a scalar loss from the bound stores and be deterministic.
/// When the stores hold more than `max_coords` scalars a random subset of that
/// size is checked.
pub fn finite_diff_check<F, R>(
    stores: &mut [&mut ParamStore],
    eps: f64,
    max_coords: usize,
    rng: &mut R,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Bound]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut eval = |stores: &[&mut ParamStore], grad: bool| -> Result<(f64, Vec<Grads>)> {
        let mut tape = Tape::new();
        let bounds: Vec<Bound> = stores.iter().map(|s| s.bind(&mut tape)).collect();
        let loss = f(&mut tape, &bounds)?;
        let value = tape.scalar(loss);
        let grads = if grad {
            let g = tape.backward(loss)?;
            stores
                .iter()
                .zip(&bounds)
                .map(|(s, b)| Grads::collect(&g, b, s))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(stores, true)?;

    let mut coords = Vec::new();
    for (si, s) in stores.iter().enumerate() {
        for (pi, t) in s.tensors().iter().enumerate() {
            for k in 0..t.len() {
                coords.push((si, pi, k));
            }
        }
    }
    let chosen: Vec<(usize, usize, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        sample(rng, coords.len(), max_coords)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut max_rel: f64 = 0.0;
    for &(si, pi, k) in &chosen {
        let orig = stores[si].tensors()[pi].data()[k];
        stores[si].tensors_mut()[pi].data_mut()[k] = orig + eps;
        let plus = eval(stores, false)?.0;
        stores[si].tensors_mut()[pi].data_mut()[k] = orig - eps;
        let minus = eval(stores, false)?.0;
        stores[si].tensors_mut()[pi].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[si].tensors()[pi].data()[k];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: chosen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_two() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut analytic = None;
        let report = finite_diff_check(&mut [&mut s], 1e-5, 64, &mut rng, |tape, b| {
            let w = b[0].var(id);
            let y = tape.mul(w, w)?;
            let loss = tape.sum(y)?;
            if analytic.is_none() {
                analytic = Some(tape.backward(loss)?.get(w).unwrap().item());
            }
            Ok(loss)
        })
        .unwrap();
        assert!((analytic.unwrap() - 4.0).abs() < 1e-12);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
