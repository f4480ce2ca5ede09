//! Central finite-difference gradient oracle.

use super::param::{ParamId, ParamStore};
use super::tape::{Graph, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
    /// `(input, entry)` of the first non-finite analytic gradient.
    pub non_finite: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_err <= tol
    }

    fn record(&mut self, input: usize, entry: usize, analytic: f64, numeric: f64) {
        self.entries_checked += 1;
        if !analytic.is_finite() {
            self.non_finite.get_or_insert((input, entry));
            return;
        }
        let err = rel_err(analytic, numeric);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = err;
            self.worst = Some((input, entry));
        }
    }

    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            non_finite: None,
            entries_checked: 0,
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar function against central
/// differences over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars)?;
    scalar_of(&out)?;
    let grads = tape.backward(&out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        scalar_of(&f(&vs)?)
    };

    let mut report = GradCheckReport::empty();
    let mut probe = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            probe[i].data_mut()[e] = x0 + FD_STEP;
            let fp = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - FD_STEP;
            let fm = eval(&probe)?;
            probe[i].data_mut()[e] = x0;
            report.record(i, e, a.data()[e], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Same check against parameters of a store. At most `max_entries` entries per
/// parameter are probed, spread evenly across it.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    max_entries: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g, 'p> Fn(&'g Graph<'p>) -> Result<Var<'g>>,
{
    let graph = Graph::new(store);
    let out = f(&graph)?;
    scalar_of(&out)?;
    let grads = graph.backward(&out);
    let analytic = graph.param_grads(&grads);
    drop(out);

    let mut report = GradCheckReport::empty();
    let mut probe = store.clone();
    for (i, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = store.value(id).data()[e];
            probe.value_mut(id).data_mut()[e] = x0 + FD_STEP;
            let fp = eval_store(&f, &probe)?;
            probe.value_mut(id).data_mut()[e] = x0 - FD_STEP;
            let fm = eval_store(&f, &probe)?;
            probe.value_mut(id).data_mut()[e] = x0;
            report.record(i, e, a.data()[e], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

fn eval_store<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'g, 'p> Fn(&'g Graph<'p>) -> Result<Var<'g>>,
{
    let g = Graph::inference(store);
    let v = f(&g)?;
    scalar_of(&v)
}
