//! Central finite-difference check of analytic gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all checked entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Entries whose relative error exceeded the caller's threshold, if one was given.
    pub failures: Vec<GradEntry>,
}

/// One compared entry: analytic and central-difference derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of the scalar built by `build` against
/// `(f(p + ε) − f(p − ε)) / 2ε` for every entry of every trainable parameter.
pub fn grad_check<E, F>(
    store: &mut ParamStore,
    epsilon: f64,
    threshold: Option<f64>,
    build: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph) -> Result<Var, E>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        g.backward(root)?
    };

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        failures: Vec::new(),
    };
    for id in store.trainable() {
        for k in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + epsilon;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original - epsilon;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if threshold.is_some_and(|t| err > t) {
                report.failures.push(GradEntry {
                    name: store.get(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_passes() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0), false);
        let r = grad_check::<TensorError, _>(&mut store, 1e-5, None, |g| {
            let x = g.param(0);
            g.mul(x, x)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(store.get(0).value.item(), 3.0);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0]), false);
        let r = grad_check::<TensorError, _>(&mut store, 1e-5, None, |g| {
            let x = g.param(0);
            let z = g.scale(x, 0.0);
            Ok(g.sum_all(z))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.entries_checked, 2);
    }
}
