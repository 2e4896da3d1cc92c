//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval_all<F>(f: &F, store: &ParamStore) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let outs = f(&mut g, store)?;
    outs.iter()
        .map(|v| {
            let x = g.value(*v).item();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::Numeric(format!("non-finite function value {x}")))
            }
        })
        .collect()
}

/// Gradient check of a scalar function over every value of `params`.
pub fn grad_check<F>(f: F, store: &ParamStore, params: &[ParamId], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let wrapped = |g: &mut Graph, s: &ParamStore| f(g, s).map(|v| vec![v]);
    let mut reports = grad_check_multi(wrapped, store, params, eps)?;
    Ok(reports.remove(0))
}

/// Checks several scalar outputs that share one forward computation.
///
/// Each output gets its own backward pass and its own report; every
/// perturbed forward evaluation is reused across outputs.
pub fn grad_check_multi<F>(f: F, store: &ParamStore, params: &[ParamId], eps: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>,
{
    let n = f(&mut Graph::new(), store)?.len();
    grad_check_outputs(f, store, &vec![params.to_vec(); n], eps)
}

/// [`grad_check_multi`] with a separate parameter list per output.
pub fn grad_check_outputs<F>(
    f: F,
    store: &ParamStore,
    params: &[Vec<ParamId>],
    eps: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let outs = f(&mut g, store)?;
    if params.len() != outs.len() {
        return Err(Error::Internal(format!(
            "{} parameter lists for {} outputs",
            params.len(),
            outs.len()
        )));
    }
    let mut union: Vec<ParamId> = params.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    // analytic[o][u]: gradient of output o wrt union[u], if checked.
    let mut analytic: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(outs.len());
    for (out, wanted) in outs.iter().zip(params) {
        let x = g.value(*out).item();
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {x}")));
        }
        let grads = g.backward(*out)?;
        let per_param = union
            .iter()
            .map(|p| {
                wanted.contains(p).then(|| {
                    g.param_vars()
                        .find(|(id, _)| id == p)
                        .and_then(|(_, v)| grads.wrt(v).map(<[f64]>::to_vec))
                        .unwrap_or_else(|| vec![0.0; store.get(*p).len()])
                })
            })
            .collect();
        analytic.push(per_param);
    }

    let mut reports: Vec<GradCheckReport> = outs
        .iter()
        .map(|_| GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        })
        .collect();
    let mut work = store.clone();
    for (pi, p) in union.iter().enumerate() {
        for e in 0..store.get(*p).len() {
            let orig = store.get(*p).data()[e];
            work.get_mut(*p).data_mut()[e] = orig + eps;
            let plus = eval_all(&f, &work)?;
            work.get_mut(*p).data_mut()[e] = orig - eps;
            let minus = eval_all(&f, &work)?;
            work.get_mut(*p).data_mut()[e] = orig;
            for (o, rep) in reports.iter_mut().enumerate() {
                let Some(grad) = &analytic[o][pi] else {
                    continue;
                };
                let numeric = (plus[o] - minus[o]) / (2.0 * eps);
                let a = grad[e];
                let err = rel_error(a, numeric);
                rep.checked += 1;
                if rep.worst.is_none() || err > rep.max_rel_error {
                    rep.max_rel_error = err;
                    rep.worst = Some((store.name(*p).to_string(), e));
                    rep.worst_analytic = a;
                    rep.worst_numeric = numeric;
                }
            }
        }
    }
    Ok(reports)
}
