//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    /// Absolute differences up to this are central-difference rounding
    /// noise and count as agreement.
    pub noise_floor: f64,
    /// Entries whose difference fell under the floor.
    pub below_floor: usize,
    pub max_abs_error: f64,
}

/// Rounding noise of a central difference: each evaluation carries about
/// `ε·|f|` error, divided by `2h`, with headroom for accumulation.
pub fn noise_floor(loss: f64, h: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(1.0) / h
}

/// Relative error used by all checks: `|a − d| / (|a| + |d| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of `f` against central differences with step
/// `h` for every scalar in `store`. The relative error ignores entries whose
/// absolute difference is within [`noise_floor`].
///
/// `f` may fail with any error that tensor errors convert into.
pub fn grad_check_store<F, E>(
    store: &ParamStore<f64>,
    h: f64,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let floor = noise_floor(tape.scalar_value(loss)?, h);
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    for (id, g) in grads.params() {
        analytic[id.index()].copy_from_slice(g);
    }

    let mut probe = store.clone();
    let mut eval = |probe: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::no_grad();
        let v = f(&mut tape, probe)?;
        Ok(tape.scalar_value(v)?)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
        noise_floor: floor,
        below_floor: 0,
        max_abs_error: 0.0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()][j];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let err = if (a - numeric).abs() <= floor {
                report.below_floor += 1;
                0.0
            } else {
                relative_error(a, numeric)
            };
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`grad_check_store`] over a plain tensor list; `f` receives one
/// [`Var`] per tensor, in order.
pub fn grad_check<F>(params: &[Tensor<f64>], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("p{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    grad_check_store(&store, h, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        f(tape, &vars)
    })
}
