//! Central-difference gradient verification.
//!
//! The checker rebuilds the forward graph from scratch for every perturbed
//! parameter entry, so the supplied closure must be deterministic (no dropout,
//! or dropout at rate zero).

use super::{Tape, Tensor2, ValueId};
use crate::{Error, Result, Scalar};

/// Maximum relative error between tape gradients and central differences,
/// over every entry of every parameter.
///
/// `f` receives a fresh tape plus one `ValueId` per parameter (in order) and
/// must return the scalar loss value. Relative error uses
/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn grad_check<S: Scalar>(
    f: &dyn Fn(&mut Tape<S>, &[ValueId]) -> Result<ValueId>,
    params: &[Tensor2<S>],
    eps: S,
) -> Result<S> {
    let eps_f = eps.to_f64().unwrap_or(f64::NAN);
    if !(1e-6..=1e-3).contains(&eps_f) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            detail: format!("eps {eps_f} outside [1e-6, 1e-3]"),
        });
    }

    let eval = |ps: &[Tensor2<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|p| tape.input(p.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if !tape.value(loss).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(loss)?;

    let floor = S::from_f64(1e-8).unwrap();
    let two = S::from_f64(2.0).unwrap();
    let mut worst = S::zero();
    let mut work: Vec<Tensor2<S>> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        for k in 0..params[pi].data().len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let fd = (up - down) / (two * eps);
            let an = grads
                .wrt(*id)
                .map(|g| g.data()[k])
                .unwrap_or_else(S::zero);
            let rel = (fd - an).abs() / floor.max(fd.abs() + an.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
