use serde::Serialize;

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::ParamStore;

/// Largest number of parameter entries [`grad_check`] will perturb.
pub const MAX_CHECKED_ENTRIES: usize = 10_000;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare backprop gradients with central differences for every entry of
/// every trainable parameter the graph references.
///
/// Parameter values are restored exactly after each perturbation.
pub fn grad_check<S: ParamStore + ?Sized>(
    graph: &mut Graph,
    store: &mut S,
    output: NodeId,
    eps: f64,
) -> Result<GradCheckReport> {
    let params: Vec<_> = graph
        .params()
        .into_iter()
        .filter(|p| store.param(*p).trainable)
        .collect();
    let total: usize = params.iter().map(|p| store.param(*p).value.len()).sum();
    if total > MAX_CHECKED_ENTRIES {
        return Err(Error::Config(format!(
            "grad_check over {total} entries exceeds the limit of {MAX_CHECKED_ENTRIES}"
        )));
    }

    graph.forward(&*store)?;
    graph.backward(store, output, 1.0)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| store.param(*p).grad.data().to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        entries_checked: 0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..store.param(*p).value.len() {
            let orig = store.param(*p).value.data()[idx];
            let mut eval = |x: f64, store: &mut S| -> Result<f64> {
                store.param_mut(*p).value.data_mut()[idx] = x;
                graph.forward(&*store)?;
                let f = graph.scalar(output)?;
                if !f.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite output while perturbing '{}'[{idx}] to {x}",
                        store.param(*p).name
                    )));
                }
                Ok(f)
            };
            let plus = eval(orig + eps, store);
            let minus = eval(orig - eps, store);
            store.param_mut(*p).value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][idx];
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_param = store.param(*p).name.clone();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    graph.forward(&*store)?;
    Ok(report)
}
