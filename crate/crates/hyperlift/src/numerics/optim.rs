//! Adam optimizer and the finite-difference gradient checker.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::{NumericsError, Result, Tensor};

/// Adam hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, aligned with a [`ParamSet`]'s order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently stored on `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(NumericsError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let p = params.get_mut(i);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * g;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Worst relative error between analytic and central-difference gradients for
/// one input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tol).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Check the analytic gradients of `f` against central finite differences.
///
/// `f` receives the leased inputs in order and must return a scalar loss.
/// The error measure per element is |analytic - numeric| / max(1, |analytic|).
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor)], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut working: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // Analytic pass.
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = working.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(&working)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut entries = Vec::with_capacity(inputs.len());
    for i in 0..working.len() {
        let mut worst = 0.0f64;
        for e in 0..working[i].len() {
            let orig = working[i].data()[e];
            working[i].data_mut()[e] = orig + eps;
            let up = eval(&working)?;
            working[i].data_mut()[e] = orig - eps;
            let down = eval(&working)?;
            working[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
        entries.push(GradCheckEntry {
            name: inputs[i].0.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
