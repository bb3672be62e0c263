use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{group_of, Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Set of parameter groups an update may touch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamMask {
    groups: BTreeSet<String>,
}

impl ParamMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of<I, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ParamMask {
            groups: groups.into_iter().map(Into::into).collect(),
        }
    }

    pub fn allows(&self, name: &str) -> bool {
        self.groups.contains(group_of(name))
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &String> {
        self.groups.iter()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to the parameters selected by `mask`. Everything
    /// else is left untouched, bit for bit.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, mask: &ParamMask) -> Result<()> {
        if mask.is_empty() {
            log::warn!("optimizer step with an empty mask; nothing updated");
            return Ok(());
        }
        for (name, param) in store.iter_mut() {
            if !mask.allows(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if !g.same_shape(param) {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: param.shape(),
                    rhs: g.shape(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            for ((p, vel), &gv) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gv;
                *p -= self.lr * *vel;
            }
        }
        Ok(())
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn two_group_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("backbone.w", Tensor::from_rows(&[[0.1, 0.2]]).unwrap());
        s.insert("head.w", Tensor::from_rows(&[[0.3, -0.4]]).unwrap());
        s
    }

    fn ones_grads(s: &ParamStore) -> Grads {
        s.iter()
            .map(|(n, t)| (n.clone(), Tensor::ones(t.rows(), t.cols())))
            .collect()
    }

    #[test]
    fn empty_mask_is_a_no_op() {
        let mut s = two_group_store();
        let before = s.clone();
        let g = ones_grads(&s);
        Sgd::new(0.1, 0.9)
            .unwrap()
            .step(&mut s, &g, &ParamMask::none())
            .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn masked_group_is_bit_identical() {
        let mut s = two_group_store();
        let d_before = s.get("head.w").unwrap().to_bits();
        let g = ones_grads(&s);
        Sgd::new(0.1, 0.9)
            .unwrap()
            .step(&mut s, &g, &ParamMask::of(["backbone"]))
            .unwrap();
        assert_eq!(s.get("head.w").unwrap().to_bits(), d_before);
        assert_ne!(s.get("backbone.w").unwrap().data()[0], 0.1);
    }

    #[test]
    fn one_sgd_step_on_shifted_parabola() {
        // y = (w - 3)^2, w0 = 0, lr = 0.1: grad = -6, w1 = 0.6
        let mut s = ParamStore::new();
        s.insert("w.x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let w = tape.param(&s, "w.x").unwrap();
        let three = tape.constant(Tensor::scalar(3.0)).unwrap();
        let d = tape.sub(w, three).unwrap();
        let y = tape.square(d).unwrap();
        let grads = tape.backward(y, &s).unwrap();
        Sgd::new(0.1, 0.9)
            .unwrap()
            .step(&mut s, &grads, &ParamMask::of(["w"]))
            .unwrap();
        assert!((s.get("w.x").unwrap().item().unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.9).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }
}
