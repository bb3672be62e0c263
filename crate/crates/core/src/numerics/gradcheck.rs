//! Central-difference gradient oracle.

use super::{Grads, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error. Central differences of an
/// O(1) loss resolve a gradient only to about 1e-11 absolute, so entries below
/// the floor are effectively compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Fourth-order central-difference gradient of `loss_fn` for every entry of
/// every parameter in `store`:
/// `(−L(x+2h) + 8L(x+h) − 8L(x−h) + L(x−2h)) / 12h`.
pub fn numeric_gradient<F>(loss_fn: &F, store: &ParamStore, eps: f64) -> Result<Grads>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    numeric_gradient_where(loss_fn, store, |_| true, eps)
}

/// [`numeric_gradient`] restricted to the parameters `include` accepts; the
/// rest are held at their current values.
pub fn numeric_gradient_where<F>(
    loss_fn: &F,
    store: &ParamStore,
    include: impl Fn(&str) -> bool,
    eps: f64,
) -> Result<Grads>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut work = store.clone();
    let mut grads = Grads::new();
    for (name, t) in store.iter().filter(|(n, _)| include(n)) {
        let mut g = t.clone();
        for i in 0..t.len() {
            let orig = t.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = orig + offset;
                let l = loss_fn(&work)?;
                if !l.is_finite() {
                    return Err(Error::Numeric {
                        op: "finite_diff_check",
                        detail: format!("non-finite loss when perturbing {name}[{i}]"),
                    });
                }
                Ok(l)
            };
            let (p2, p1, m1, m2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
            work.get_mut(name)?.data_mut()[i] = orig;
            // Paired differences stay exactly zero when the loss ignores the entry.
            g.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        }
        grads.insert(name.clone(), g);
    }
    Ok(grads)
}

/// `max |a − n| / max(|a|, |n|, 1e-6)` over all entries present in both.
pub fn max_relative_error(analytic: &Grads, numeric: &Grads) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else { continue };
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Builds the loss on a fresh tape, differentiates it, and compares with
/// central differences. Returns the maximum relative error.
pub fn finite_diff_check<F>(build: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    finite_diff_check_where(build, store, |_| true, eps)
}

/// [`finite_diff_check`] over the parameters `include` accepts. Used to
/// leave out parameters whose exact gradient is identically zero (a key
/// bias inside a softmax), where the ratio measures only rounding noise.
pub fn finite_diff_check_where<F>(build: F, store: &ParamStore, include: impl Fn(&str) -> bool, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let analytic = tape.backward(loss, store)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        t.scalar(l)
    };
    let numeric = numeric_gradient_where(&eval, store, include, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn quad_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w.a", Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap());
        s
    }

    fn quad(tape: &mut Tape, s: &ParamStore) -> Result<Var> {
        let w = tape.param(s, "w.a")?;
        let sq = tape.square(w)?;
        let scaled = tape.scale(sq, 1.5)?;
        tape.sum(scaled)
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let err = finite_diff_check(quad, &quad_store(), 1e-6).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let mut s = ParamStore::new();
        s.insert("w.a", Tensor::from_rows(&[[0.4, -0.3, 0.9], [0.1, 0.5, -0.8]]).unwrap());
        let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let w = tape.param(s, "w.a")?;
            let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.3], [0.2, 0.2]])?)?;
            let logits = tape.matmul(x, w)?;
            let p = tape.softmax_rows(logits)?;
            let y = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])?)?;
            let m = tape.mul(p, y)?;
            let picked = tape.sum(m)?;
            let ce = tape.cross_entropy(logits, &[0, 2, 1])?;
            let neg = tape.scale(picked, -0.1)?;
            tape.add(ce, neg)
        };
        let err = finite_diff_check(build, &s, 1e-6).unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let store = quad_store();
        let mut tape = Tape::new();
        let loss = quad(&mut tape, &store).unwrap();
        let mut analytic = tape.backward(loss, &store).unwrap();
        analytic.get_mut("w.a").unwrap().data_mut()[0] += 0.1;
        let eval = |s: &ParamStore| {
            let mut t = Tape::new();
            let l = quad(&mut t, s)?;
            t.scalar(l)
        };
        let numeric = numeric_gradient(&eval, &store, 1e-6).unwrap();
        assert!(max_relative_error(&analytic, &numeric) >= 1e-2);
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_diff_check(quad, &quad_store(), 0.0).is_err());
    }

    #[test]
    fn non_finite_perturbed_loss_is_reported() {
        let mut s = ParamStore::new();
        s.insert("w.a", Tensor::scalar(0.0));
        let eval = |s: &ParamStore| -> Result<f64> {
            let v = s.get("w.a")?.item()?;
            Ok(if v > 0.0 { f64::INFINITY } else { v })
        };
        assert!(matches!(numeric_gradient(&eval, &s, 1e-6), Err(Error::Numeric { .. })));
    }
}
