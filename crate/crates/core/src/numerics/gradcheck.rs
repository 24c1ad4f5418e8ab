//! Central finite-difference gradient checker.
//!
//! The checker only ever calls the forward pass, so it is an independent
//! oracle for the tape's backward rules.

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient is
/// numerically zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.checked > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Fixed projection weights so the reduced scalar exercises every output entry
/// with a distinct coefficient.
fn projection(n: usize) -> Tensor {
    let data = (0..n).map(|j| 0.5 + ((j as f64) * 0.7 + 0.3).sin()).collect();
    Tensor::new(vec![n], data).expect("projection")
}

fn reduced_loss<F>(store: &ParamStore, inputs: &[Tensor], f: &F, track: bool) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    if !track {
        g = g.no_grad();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[n])?;
    let c = g.constant(projection(n));
    let prod = g.mul(flat, c)?;
    let loss = g.sum(prod);
    Ok(g.value(loss).item())
}

fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|j| (j * n) / k + (j * 7919) % ((n / k).max(1))).collect(),
        _ => (0..n).collect(),
    }
}

/// Compare tape gradients of `f` against central differences for every input
/// tensor and every parameter in `store`. `limit` caps the number of entries
/// probed per tensor.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    limit: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let h = DEFAULT_STEP;
    let (input_grads, param_grads) = {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).numel();
        let flat = g.reshape(out, &[n])?;
        let c = g.constant(projection(n));
        let prod = g.mul(flat, c)?;
        let loss = g.sum(prod);
        g.backward(loss)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.numel()]))
            .collect();
        (ig, g.param_grads())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut record = |label: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{label}: analytic {a:e} vs numeric {n:e}");
        }
    };

    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in sample_indices(t.numel(), limit) {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let up = reduced_loss(store, &work, &f, false)?;
            work[ti].data_mut()[j] = orig - h;
            let down = reduced_loss(store, &work, &f, false)?;
            work[ti].data_mut()[j] = orig;
            record(format!("input {ti}[{j}]"), input_grads[ti][j], (up - down) / (2.0 * h));
        }
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = param_grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let name = store.name(id).to_string();
        for j in sample_indices(store.get(id).numel(), limit) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = reduced_loss(store, inputs, &f, false)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = reduced_loss(store, inputs, &f, false)?;
            store.get_mut(id).data_mut()[j] = orig;
            record(format!("{name}[{j}]"), analytic[j], (up - down) / (2.0 * h));
        }
    }
    // Forward value must not depend on tracking mode.
    debug_assert_eq!(
        reduced_loss(store, inputs, &f, true)?,
        reduced_loss(store, inputs, &f, false)?
    );
    Ok(report)
}
