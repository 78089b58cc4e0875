//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
}

/// Compare analytic gradients of `loss` with central differences of step
/// `eps` over every entry of every trainable parameter.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradcheck<F>(store: &mut ParamStore, eps: f64, loss: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    gradcheck_sampled(store, eps, usize::MAX, loss)
}

/// As [`gradcheck`], but checks at most `per_param` evenly strided entries
/// of each parameter.
pub fn gradcheck_sampled<F>(store: &mut ParamStore, eps: f64, per_param: usize, loss: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck loss = {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck loss = {v}")));
        }
        g.backward(l)?
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = if per_param >= n { 1 } else { n.div_ceil(per_param) };
        let grad = analytic.get_or_zero(store, id);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{j}]", store.name(id));
            }
        }
    }
    Ok(report)
}
