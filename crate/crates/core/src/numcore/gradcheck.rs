//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference values at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

fn eval_loss<F>(params: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NumericFailure(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences with step `h` for every element of every parameter. The error
/// of one element is `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore<f64>, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, &analytic)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NumericFailure("non-finite loss".into()));
    }
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut analytic)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name)?.len();
        for i in 0..n {
            let orig = params.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval_loss(&probe, &build)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval_loss(&probe, &build)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).unwrap().grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_pair = (a, fd);
            }
        }
    }
    Ok(report)
}
