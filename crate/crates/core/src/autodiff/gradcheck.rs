use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Module, Parameter};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares `backward` against central finite differences on every
/// coordinate of every trainable parameter.
///
/// `f` rebuilds the scalar function from scratch on each call, reading the
/// current parameter values.
pub fn grad_check<F>(mut f: F, params: &mut [Parameter<f64>], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Parameter<f64>]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| grads.param_or_zeros(p).into_data())
        .collect();

    let mut eval = |params: &[Parameter<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, params)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        for i in 0..params[pi].numel() {
            let orig = params[pi].tensor.data()[i];
            params[pi].tensor.data_mut()[i] = orig + h;
            let up = eval(params)?;
            params[pi].tensor.data_mut()[i] = orig - h;
            let down = eval(params)?;
            params[pi].tensor.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params[pi].name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over the trainable parameters of a module. `f` builds the
/// scalar function from the module's current values.
pub fn grad_check_module<M, F>(m: &mut M, mut f: F, h: f64) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    let mut params = Vec::new();
    m.visit(&mut |p| params.push(p.clone()));
    grad_check(
        |g, params| {
            let mut it = params.iter();
            m.visit_mut(&mut |p| p.tensor = it.next().expect("same visit order").tensor.clone());
            f(g, m)
        },
        &mut params,
        h,
    )
}
