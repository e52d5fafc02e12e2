//! Central finite-difference gradient checking at 64-bit.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to check.

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rtol: f64,
    /// Absolute floor for gradients that are numerically zero.
    pub atol: f64,
}

impl Tolerance {
    pub fn rel(rtol: f64) -> Self {
        Self { rtol, atol: 1e-8 }
    }

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.atol || diff <= self.rtol * analytic.abs().max(numeric.abs())
    }
}

pub fn step_size(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// `(f(x + h) - f(x - h)) / 2h` with `h = 1e-6 (1 + |x|)`.
pub fn central_difference(x: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = step_size(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Checks `f` against finite differences for every element of every input.
///
/// `f` must build a scalar loss from the given input vars and be a
/// deterministic function of the input values.
pub fn check<F>(inputs: &[Tensor<f64>], tol: Tolerance, f: F) -> Result<Report, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut report = Report::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[e];
            let mut err = None;
            let numeric = central_difference(x0, |x| {
                work[k].data_mut()[e] = x;
                match eval(&work) {
                    Ok(v) => v,
                    Err(er) => {
                        err = Some(er);
                        f64::NAN
                    }
                }
            });
            work[k].data_mut()[e] = x0;
            if let Some(er) = err {
                return Err(er);
            }
            report.checked += 1;
            if !tol.accepts(a, numeric) {
                report.mismatches.push(Mismatch {
                    input: k,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
