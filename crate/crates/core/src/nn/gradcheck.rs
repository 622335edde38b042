//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`, or 0 when
    /// both norms fall below the absolute floor.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Gradients below this norm are considered zero on both sides.
pub const ABS_FLOOR: f64 = 1e-9;

/// Compares `analytic` against central differences of `loss` for every named
/// parameter, perturbing one scalar at a time by `±eps`.
pub fn check<F>(
    store: &mut ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    for name in names {
        let n = store.value(name)?.len();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.value(name)?.data()[i];
            store.get_mut(name)?.value.data_mut()[i] = orig + eps;
            let plus = loss(store)?;
            store.get_mut(name)?.value.data_mut()[i] = orig - eps;
            let minus = loss(store)?;
            store.get_mut(name)?.value.data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * eps);
        }
        let a = analytic
            .get(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let an: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = an.max(nn);
        let rel_error = if denom < ABS_FLOOR { 0.0 } else { diff / denom };
        report.params.push(ParamCheck {
            name: name.clone(),
            rel_error,
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    Ok(report)
}
