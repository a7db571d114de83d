//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    /// Flat element index that attained `max_rel_err`.
    pub worst_element: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`, with `0/0` defined as zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn constants(params: &[Tensor]) -> Result<Vec<Tensor>> {
    params.iter().map(|p| Tensor::new(p.shape(), p.data().to_vec())).collect()
}

/// Compares gradients of the scalar `f` at `params` against central
/// differences with step `h`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let first = f(&constants(params)?)?.item();
    let second = f(&constants(params)?)?.item();
    if first.to_bits() != second.to_bits() {
        return Err(Error::invalid(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::param(p.shape(), p.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    let analytic: Vec<Vec<f64>> = if loss.requires_grad() {
        loss.backward()?;
        leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect()
    } else {
        leaves.iter().map(|l| vec![0.0; l.numel()]).collect()
    };

    let mut report = GradCheckReport { tol, params: Vec::with_capacity(params.len()) };
    for (pi, p) in params.iter().enumerate() {
        let mut worst = 0.0;
        let mut worst_element = 0;
        for e in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs = constants(params)?;
                let mut data = p.data().to_vec();
                data[e] += delta;
                inputs[pi] = Tensor::new(p.shape(), data)?;
                Ok(f(&inputs)?.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = relative_error(analytic[pi][e], numeric);
            if err > worst {
                worst = err;
                worst_element = e;
            }
        }
        report.params.push(ParamCheck {
            index: pi,
            max_rel_err: worst,
            worst_element,
            passed: worst <= tol,
        });
    }
    Ok(report)
}
