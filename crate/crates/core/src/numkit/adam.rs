use serde::{Deserialize, Serialize};

use super::kernel::{adam_update, all_finite, AdamCoef};
use super::{NumError, Tensor};

/// Bias-corrected Adam moments for an ordered list of named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<'p>(params: impl IntoIterator<Item = (String, &'p Tensor)>) -> Self {
        let (names, shapes): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .unzip();
        Self {
            names,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One Adam update. Every gradient is checked before any parameter moves.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[impl AsRef<[f64]>],
        lr: f64,
    ) -> Result<(), NumError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NumError::Usage(format!("learning rate {lr} must be >= 0")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumError::Shape(format!(
                "adam state tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.as_ref();
            if p.len() != g.len() || p.shape() != self.m[i].shape() {
                return Err(NumError::Shape(format!(
                    "parameter {} has shape {:?} but gradient has {} values",
                    self.names[i],
                    p.shape(),
                    g.len()
                )));
            }
            if !all_finite(g) {
                return Err(NumError::NonFinite(format!(
                    "gradient of parameter {}",
                    self.names[i]
                )));
            }
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let coef = AdamCoef { b1, b2, step: lr / c1, inv_c2: 1.0 / c2, eps: self.epsilon };
            adam_update(coef, p.as_mut_slice(), g.as_ref(), m.as_mut_slice(), v.as_mut_slice());
        }
        Ok(())
    }
}
