//! Central finite-difference verification of tape gradients (64-bit only).

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst element of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Finite-difference settings. `floor` bounds the denominator of the relative
/// error so near-zero gradients are compared absolutely.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-6,
            max_elements: None,
        }
    }
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        Self {
            step,
            tol,
            ..Self::default()
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            tape.value(out).item()
        };

        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        let mut reports = Vec::with_capacity(inputs.len());
        for (idx, input) in inputs.iter().enumerate() {
            let n = input.len();
            let stride = match self.max_elements {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            let mut worst = InputReport {
                input: idx,
                max_rel_error: 0.0,
                worst_element: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for e in (0..n).step_by(stride) {
                let orig = input.data()[e];
                probe[idx].data_mut()[e] = orig + self.step;
                let plus = eval(&probe)?;
                probe[idx].data_mut()[e] = orig - self.step;
                let minus = eval(&probe)?;
                probe[idx].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[idx].data()[e];
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                let rel = (a - numeric).abs() / denom;
                let rel = if rel.is_nan() { f64::INFINITY } else { rel };
                if rel > worst.max_rel_error {
                    worst = InputReport {
                        input: idx,
                        max_rel_error: rel,
                        worst_element: e,
                        analytic: a,
                        numeric,
                    };
                }
            }
            reports.push(worst);
        }
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        Ok(GradCheckReport {
            passed: max_rel_error < self.tol,
            max_rel_error,
            tol: self.tol,
            inputs: reports,
        })
    }
}

/// [`GradCheck::run`] with explicit step and tolerance.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(step, tol).run(f, inputs)
}
