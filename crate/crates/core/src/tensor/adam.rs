use serde::{Deserialize, Serialize};

use super::ParamTensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update to every parameter, then clears the gradients.
    ///
    /// Fails with a usage error when no parameter carries a gradient since
    /// the last step.
    pub fn step<'a, I>(&self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut ParamTensor>,
    {
        let mut params: Vec<&mut ParamTensor> = params.into_iter().collect();
        if !params.iter().any(|p| p.has_grad()) {
            return Err(Error::Usage("adam step without populated gradients".into()));
        }
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let ParamTensor { value, grad, adam_m, adam_v, .. } = &mut **p;
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(adam_m.data_mut().iter_mut().zip(adam_v.data_mut().iter_mut()));
            for ((w, &g), (m, v)) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
