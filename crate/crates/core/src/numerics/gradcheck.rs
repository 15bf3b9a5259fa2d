//! Central finite-difference checks against the tape's analytic gradients.
//!
//! The finite-difference side only ever runs forward passes, so it does not
//! depend on any backward rule it is checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative error on near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares d(loss)/d(inputs) from the tape against central differences with step `h`.
///
/// `f` builds a scalar loss from the registered input vars. `probes` selects
/// `(input, flat index)` pairs; `None` checks every element of every input.
pub fn check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    probes: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for &(input, index) in probes {
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + h;
        let up = eval(&work)?;
        work[input].data_mut()[index] = orig - h;
        let down = eval(&work)?;
        work[input].data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[input].data()[index];
        report.entries.push(GradCheckEntry {
            input,
            index,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    Ok(report)
}
