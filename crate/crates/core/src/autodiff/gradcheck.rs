//! Central finite-difference gradient checking at any `Real` precision.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::tensor::Real;
use super::AutodiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares analytic gradients of `f` against central differences for every
/// entry of every parameter in `params`.
///
/// The relative error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(
    f: F,
    params: &ParameterStore<T>,
    step: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var, AutodiffError>,
{
    grad_check_where(f, params, step, |_| true)
}

/// [`grad_check`] restricted to the parameters whose names satisfy
/// `select`; the others stay at their stored values.
pub fn grad_check_where<T, F>(
    f: F,
    params: &ParameterStore<T>,
    step: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var, AutodiffError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be > 0, got {step}"),
        });
    }
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteLoss {
                param: "<unperturbed>".into(),
                index: 0,
                value,
            });
        }
        g.backward(loss)?.into_params()
    };

    let eval = |store: &ParameterStore<T>| -> Result<T, AutodiffError> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let h = T::from_f64_lossy(step);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().filter(|n| select(n)).cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            for value in [plus.as_f64(), minus.as_f64()] {
                if !value.is_finite() {
                    return Err(AutodiffError::NonFiniteLoss {
                        param: name.clone(),
                        index: i,
                        value,
                    });
                }
            }
            let numeric = ((plus - minus) / (h + h)).as_f64();
            let a = analytic[&name].data()[i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
