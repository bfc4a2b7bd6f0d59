use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check_report`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

fn eval<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients against central differences for every scalar in
/// `store`. Returns `max |analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    grad_check_report(store, eps, loss_fn).map(|r| r.max_rel_err)
}

pub fn grad_check_report<F>(store: &mut ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    store.zero_grad();
    let grads = {
        let mut tape = Tape::new(&*store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    grads.accumulate_into(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, analytic: 0.0, numeric: 0.0, coords: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = eval(store, &loss_fn);
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = eval(store, &loss_fn);
            store.get_mut(id).value.data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = (a - fd).abs() / fd.abs().max(1.0);
            report.coords += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((store.get(id).name.clone(), j));
                    report.analytic = a;
                    report.numeric = fd;
                }
            }
        }
    }
    Ok(report)
}
