use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean squared error over the turbines selected by `turbine_mask` in every
/// row of a `[B, L]` prediction.
pub fn mse_loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    target: &Tensor<T>,
    turbine_mask: &[bool],
) -> Result<Var<'t, T>> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != turbine_mask.len() {
        return Err(Error::shape("mse_loss", &s, &[s[0], turbine_mask.len()]));
    }
    let mask: Vec<bool> = (0..s[0]).flat_map(|_| turbine_mask.iter().copied()).collect();
    pred.masked_mse(target, &mask)
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("metric", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metric over no values".into()));
    }
    Ok(())
}

pub fn mse_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let mut acc = ErrorAccumulator::default();
    acc.extend(pred, target);
    Ok(acc.mse())
}

pub fn mae_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let mut acc = ErrorAccumulator::default();
    acc.extend(pred, target);
    Ok(acc.mae())
}

/// Running sums of squared and absolute errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: usize,
}

impl ErrorAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.sum_sq += e * e;
        self.sum_abs += e.abs();
        self.count += 1;
    }

    pub fn extend(&mut self, pred: &[f64], target: &[f64]) {
        for (&p, &t) in pred.iter().zip(target) {
            self.push(p, t);
        }
    }

    pub fn mse(&self) -> f64 {
        self.sum_sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.count as f64
    }
}
