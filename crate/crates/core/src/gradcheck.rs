//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn loss_value<F>(forward: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract(
            "grad_check forward must return a scalar".into(),
        ));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients against central differences with step [`FD_STEP`].
///
/// A parameter passes when `max |g_ad - g_fd| / max(1, |g_fd|) <= tol` over its entries.
pub fn grad_check<F>(forward: F, params: &[(String, Tensor)], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Probe {
            param: "<unperturbed>".into(),
            detail: format!("loss is {base}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut probe = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..tensor.numel() {
            let orig = tensor.data()[j];
            probe[pi].1.data_mut()[j] = orig + FD_STEP;
            let lp = loss_value(&forward, &probe)?;
            probe[pi].1.data_mut()[j] = orig - FD_STEP;
            let lm = loss_value(&forward, &probe)?;
            probe[pi].1.data_mut()[j] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Probe {
                    param: name.clone(),
                    detail: format!("non-finite loss probing entry {j}"),
                });
            }
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
        report.push(ParamCheck {
            name: name.clone(),
            entries: tensor.numel(),
            max_rel_err: worst,
            passed: worst <= tol,
        });
    }
    Ok(GradCheckReport {
        tol,
        params: report,
    })
}
