//! Central finite-difference check of autodiff gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Relative error used throughout: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evaluate `f` once and return the scalar loss value.
pub fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Report of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Compare autodiff gradients of `f` against central differences for every
/// coordinate of every trainable parameter (at most `max_per_param`
/// coordinates each, evenly strided, when given).
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let ids: alloc::vec::Vec<ParamId> = store.ids().filter(|&id| !store.get(id).frozen).collect();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for id in ids {
        let n = store.tensor(id).numel();
        let stride = max_per_param.map(|m| n.div_ceil(m.max(1))).unwrap_or(1).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = eval(store, &f)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = eval(store, &f)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = grads.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
            worst = worst.max(relative_error(ad, fd));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        coordinates,
    })
}
