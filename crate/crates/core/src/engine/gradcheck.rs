//! Central finite-difference checks of reverse-mode gradients (64-bit only).

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let plus = f(&x);
            x[i] = point[i] - h;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Per-parameter outcome of [`check_parameters`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Compares backward gradients of every trainable parameter with central
/// differences of step `h`.
///
/// `loss` builds the scalar loss on a fresh graph from the current store.
pub fn check_parameters<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    store.zero_grad();
    let mut graph = Graph::new();
    let root = loss(store, &mut graph)?;
    graph.backward(root)?;
    graph.accumulate_param_grads(store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(s, &mut g)?;
        Ok(g.value(v).data()[0])
    };

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.len();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for i in 0..n {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            scalars: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { step: h, params })
}
