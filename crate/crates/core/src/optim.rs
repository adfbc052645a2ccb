//! SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

/// Momentum SGD. The velocity update follows the common convention
/// `v <- mu * v + g` (first step `v = g`), then `w <- w - lr * v`.
/// Weight decay is added to the gradient of every parameter except
/// bitlengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Option<Vec<f64>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<Vec<f64>>>) {
        self.velocity = velocity;
    }

    /// Updates every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(grad) = &p.grad else { continue };
            let decay = if p.kind == ParamKind::Bitlength {
                0.0
            } else {
                self.weight_decay
            };
            let w = p.tensor.data_mut();
            let d: Vec<f64> = grad
                .data()
                .iter()
                .zip(w.iter())
                .map(|(g, wi)| g + decay * wi)
                .collect();
            let step = if self.momentum != 0.0 {
                let v = match &mut self.velocity[id.0] {
                    Some(v) => {
                        for (vi, di) in v.iter_mut().zip(&d) {
                            *vi = self.momentum * *vi + di;
                        }
                        v
                    }
                    slot @ None => slot.insert(d),
                };
                v.clone()
            } else {
                d
            };
            let rate = lr * p.lr_mult;
            for (wi, si) in w.iter_mut().zip(&step) {
                *wi -= rate * si;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(kind: ParamKind, w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(w), kind).unwrap();
        s.accumulate_grad(id, &[g]);
        s
    }

    #[test]
    fn plain_step() {
        let mut s = store_with(ParamKind::Weight, 1.0, 0.5);
        Sgd::new(0.0, 0.0).step(&mut s, 0.1).unwrap();
        assert!((s.get(crate::params::ParamId(0)).tensor.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_bitlengths() {
        let mut s = store_with(ParamKind::Bitlength, 8.0, 0.0);
        Sgd::new(0.0, 1e-4).step(&mut s, 0.1).unwrap();
        assert_eq!(s.bits(crate::params::ParamId(0)), 8.0);

        let mut s = store_with(ParamKind::Weight, 8.0, 0.0);
        Sgd::new(0.0, 1e-4).step(&mut s, 0.1).unwrap();
        assert!(s.get(crate::params::ParamId(0)).tensor.item() < 8.0);
    }

    #[test]
    fn momentum_velocity_recurrence() {
        let g = 0.25;
        let mut s = store_with(ParamKind::Weight, 0.0, g);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, 1.0).unwrap();
        assert_eq!(opt.velocity()[0].as_ref().unwrap()[0], g);
        opt.step(&mut s, 1.0).unwrap();
        assert!((opt.velocity()[0].as_ref().unwrap()[0] - 1.9 * g).abs() < 1e-15);
        assert!((s.get(crate::params::ParamId(0)).tensor.item() + 2.9 * g).abs() < 1e-15);
    }

    #[test]
    fn negative_lr_rejected() {
        let mut s = store_with(ParamKind::Weight, 1.0, 0.5);
        assert!(Sgd::new(0.0, 0.0).step(&mut s, -0.1).is_err());
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store_with(ParamKind::Bitlength, 3.0, 1.0);
        s.get_mut(crate::params::ParamId(0)).frozen = true;
        Sgd::new(0.9, 0.0).step(&mut s, 0.5).unwrap();
        assert_eq!(s.bits(crate::params::ParamId(0)), 3.0);
    }
}
