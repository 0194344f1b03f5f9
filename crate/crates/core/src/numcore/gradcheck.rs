//! Central finite-difference verification of analytic gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients whose magnitudes are both below this are compared absolutely.
const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Where the worst disagreement occurred (`parameter[index]` or `x[index]`).
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.coords_checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = at();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// Checks the gradient of a scalar function of one input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = x.clone().with_grad();
    let xv = tape.leaf(&input);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport::new(tol);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(|| format!("x[{i}]"), analytic[i], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

/// Checks d(loss)/d(param) for every coordinate of every parameter in
/// `store` (or every `stride`-th coordinate when `stride > 1`).
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, tol: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut work)?;
    let grads: Vec<Vec<f64>> = work
        .ids()
        .map(|id| {
            work.get(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; work.get(id).len()])
        })
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(&mut tape, s)?;
        Ok(tape.scalar(l))
    };

    let mut report = GradCheckReport::new(tol);
    let ids: Vec<ParamId> = work.ids().collect();
    let mut counter = 0usize;
    for id in ids {
        for i in 0..work.get(id).len() {
            counter += 1;
            if stride > 1 && counter % stride != 0 {
                continue;
            }
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let name = work.name(id).to_string();
            report.record(|| format!("{name}[{i}]"), grads[id.index()][i], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}
