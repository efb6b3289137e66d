//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Magnitude floor in the relative-error denominator, so gradients that are
/// zero up to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step [`FD_STEP`] on every parameter entry.
/// Parameter values are restored afterwards.
pub fn check_gradients<F>(store: &mut ParameterStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out, 1.0)?
    };
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let grad = analytic
            .iter()
            .find(|(g_id, _)| *g_id == id)
            .map(|(_, t)| t.clone());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |t| t.data()[i]);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
