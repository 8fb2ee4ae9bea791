use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamTensor;
use crate::error::{Error, Result};

/// Something with parameters and a scalar loss that can be differentiated.
pub trait GradTarget {
    /// Clears gradients, then evaluates the loss and fills every parameter's
    /// gradient buffer.
    fn loss_and_grad(&mut self) -> Result<f64>;
    /// Evaluates the loss without touching gradients.
    fn loss(&mut self) -> Result<f64>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;
}

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum ParamSelection {
    All,
    /// At most `per_tensor` random entries of every tensor.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a| + |n|, floor)` over checked entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic gradients against central differences with step `step`.
///
/// `floor` bounds the denominator of the relative error from below so that
/// entries whose true gradient is at roundoff level do not dominate.
pub fn gradient_check<T: GradTarget + ?Sized>(
    target: &mut T,
    step: f64,
    floor: f64,
    selection: ParamSelection,
) -> Result<GradCheckReport> {
    let base = target.loss_and_grad()?;
    if !base.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {base} at the unperturbed point")));
    }
    let analytic: Vec<Vec<f64>> = target.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut rng = match selection {
        ParamSelection::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ParamSelection::All => None,
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let indices: Vec<usize> = match (selection, rng.as_mut()) {
            (ParamSelection::Sample { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut v = sample(rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = target.params_mut()[pi].value.data()[i];
            target.params_mut()[pi].value.data_mut()[i] = orig + step;
            let plus = target.loss()?;
            target.params_mut()[pi].value.data_mut()[i] = orig - step;
            let minus = target.loss()?;
            target.params_mut()[pi].value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                let name = target.params_mut()[pi].name.clone();
                return Err(Error::Numerical(format!("non-finite loss perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = target.params_mut()[pi].name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
