//! 1D batch normalization over token sequences.
//!
//! Input is `[B, J, d]`; each of the `d` features is normalized over the
//! `B*J` rows. Train mode uses (biased) batch statistics and reports them so
//! the caller can fold them into the running estimates; eval mode uses the
//! running estimates only. Running variance stores the same biased statistic
//! used for normalization, so a momentum-1 update reproduces train-mode
//! output exactly in eval mode.

use super::tape::{Tape, Var};
use super::tensor::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics plus the fixed normalization hyperparameters.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics computed during one train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnState {
    pub fn new(features: usize) -> BnState {
        BnState {
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// running <- (1 - momentum) * running + momentum * batch
    pub fn apply_update(&mut self, update: &BnUpdate) {
        let keep = 1.0 - self.momentum;
        self.running_mean = self
            .running_mean
            .scale(keep)
            .add(&update.mean.scale(self.momentum))
            .expect("bn state shape");
        self.running_var = self
            .running_var
            .scale(keep)
            .add(&update.var.scale(self.momentum))
            .expect("bn state shape");
    }
}

/// Normalize `z` (shape `[B, J, d]`) per feature; `gamma`/`beta` are the
/// learned scale and shift. Returns the batch statistics in train mode.
pub fn batchnorm(
    tape: &mut Tape,
    z: Var,
    gamma: Var,
    beta: Var,
    state: &BnState,
    mode: Mode,
) -> Result<(Var, Option<BnUpdate>)> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 3 || *shape.last().unwrap() != state.features() {
        return Err(NumericsError::ShapeMismatch {
            op: "batchnorm",
            left: shape,
            right: vec![state.features()],
        });
    }
    match mode {
        Mode::Train => {
            let rows = shape[0] * shape[1];
            if rows < 2 {
                return Err(NumericsError::BatchTooSmall { rows });
            }
            let mu = tape.mean_axes(z, &[0, 1])?;
            let centered = tape.sub(z, mu)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_axes(sq, &[0, 1])?;
            let shifted = tape.add_scalar(var, state.eps);
            let inv = tape.rsqrt(shifted);
            let xhat = tape.mul(centered, inv)?;
            let scaled = tape.mul(xhat, gamma)?;
            let out = tape.add(scaled, beta)?;
            let update = BnUpdate {
                mean: tape.value(mu).clone(),
                var: tape.value(var).clone(),
            };
            Ok((out, Some(update)))
        }
        Mode::Eval => {
            let mean = tape.leaf(state.running_mean.clone());
            let inv = tape.leaf(state.running_var.add_scalar(state.eps).rsqrt());
            let centered = tape.sub(z, mean)?;
            let xhat = tape.mul(centered, inv)?;
            let scaled = tape.mul(xhat, gamma)?;
            let out = tape.add(scaled, beta)?;
            Ok((out, None))
        }
    }
}

/// Convenience wrapper that applies the running-stat update in place.
pub fn batchnorm_mut(
    tape: &mut Tape,
    z: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState,
    mode: Mode,
) -> Result<Var> {
    let (out, update) = batchnorm(tape, z, gamma, beta, state, mode)?;
    if let Some(u) = update {
        state.apply_update(&u);
    }
    Ok(out)
}
