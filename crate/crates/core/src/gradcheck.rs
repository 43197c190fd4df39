//! Central finite-difference checks for tape-built functions.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Error floor in the relative-error denominator, so entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f(inputs)` (a scalar) against central
/// differences with step `h`, for every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vars)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for k in 0..inputs[i].numel() {
            let x0 = work[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric));
            checked += 1;
        }
    }
    Ok(Report {
        max_rel_err: worst,
        checked,
    })
}

/// Like [`check_inputs`] but perturbs trainable parameters of `store`.
/// `select` picks `(parameter index, element index)` pairs to probe.
pub fn check_params<F>(store: &mut ParamStore, probes: &[(usize, usize)], h: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.accumulate(&tape, &grads);
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(p, k)| {
            let param = store.iter().nth(p).unwrap();
            param.grad().map_or(0.0, |g| g[k])
        })
        .collect();
    store.zero_grad();
    let mut worst: f64 = 0.0;
    for (&(p, k), &a) in probes.iter().zip(&analytic) {
        let x0 = store.iter().nth(p).unwrap().tensor.data()[k];
        let eval = |x: f64, store: &mut ParamStore| -> Result<f64> {
            store.iter_mut().nth(p).unwrap().tensor.data_mut()[k] = x;
            let mut t = Tape::inference();
            let l = f(&mut t, store)?;
            Ok(t.value(l).item())
        };
        let fp = eval(x0 + h, store)?;
        let fm = eval(x0 - h, store)?;
        eval(x0, store)?;
        worst = worst.max(rel_err(a, (fp - fm) / (2.0 * h)));
    }
    Ok(Report {
        max_rel_err: worst,
        checked: probes.len(),
    })
}
