//! Adam with bias correction over the named parameter tree.

use std::collections::BTreeMap;

use crate::model::{TmdcParams, TmdcVars};
use crate::tensor::{Gradients, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name, plus the shared
/// step count. Moments appear lazily on first update and always match their
/// parameter's shape.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// Gradient of every bound parameter, keyed by its dotted name. Parameters
/// the loss never touched get explicit zeros.
pub fn collect_grads(vars: &TmdcVars, grads: &Gradients) -> BTreeMap<String, Tensor> {
    vars.named()
        .into_iter()
        .map(|(name, var)| (name, grads.get(var)))
        .collect()
}

/// One bias-corrected Adam update in place. Every parameter must have a
/// gradient entry; shapes are enforced against both parameter and moments.
pub fn adam_step(
    params: &mut TmdcParams,
    grads: &BTreeMap<String, Tensor>,
    hyper: &AdamHyper,
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    let mut failure: Option<TensorError> = None;
    params.for_each_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(&name) else {
            failure = Some(TensorError::InvalidArg {
                op: "adam_step",
                msg: format!("no gradient for parameter {name}"),
            });
            return;
        };
        if g.shape() != p.shape() {
            failure = Some(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
            return;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            failure = Some(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
            return;
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gd[i];
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        if !p.all_finite() {
            failure = Some(TensorError::NonFinite { op: "adam_step" });
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
