//! Conditional affine coupling: the first `d` coordinates pass through
//! unchanged and parameterize, together with the condition embedding, an
//! elementwise affine transform of the remaining coordinates.
//!
//! Log-scales are tanh-bounded to `[-log_scale_bound, +log_scale_bound]`,
//! which keeps every layer invertible with headroom.

use crate::error::{Error, Result};
use crate::nn::{DenseVars, Mlp};
use crate::tensor::{Tape, Var};

/// One affine coupling layer with scale network `s` and shift network `b`,
/// both fed `concat(x[..d], z)`.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub(crate) split_index: usize,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
    pub(crate) log_scale_bound: f64,
}

/// Tape handles for one registered coupling layer.
pub(crate) struct CouplingVars {
    pub scale: Vec<DenseVars>,
    pub shift: Vec<DenseVars>,
}

impl CouplingLayer {
    /// `dims`: hidden widths of both conditioner networks. With `zero_last`
    /// the nets output exactly zero, making the layer the identity map.
    pub(crate) fn new(
        data_dim: usize,
        cond_dim: usize,
        hidden_dims: &[usize],
        log_scale_bound: f64,
        zero_last: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        if data_dim < 2 {
            return Err(Error::contract("coupling needs data_dim >= 2"));
        }
        if log_scale_bound <= 0.0 {
            return Err(Error::Parameter(format!(
                "log_scale_bound must be positive, got {log_scale_bound}"
            )));
        }
        let split_index = data_dim / 2;
        let out = data_dim - split_index;
        let mut dims = vec![split_index + cond_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(out);
        Ok(CouplingLayer {
            split_index,
            scale_net: Mlp::new(&dims, zero_last, rng)?,
            shift_net: Mlp::new(&dims, zero_last, rng)?,
            log_scale_bound,
        })
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub(crate) fn data_dim(&self) -> usize {
        self.split_index + self.scale_net.out_dim()
    }

    fn conditioner_input(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut inp = Vec::with_capacity(self.split_index + z.len());
        inp.extend_from_slice(&x[..self.split_index]);
        inp.extend_from_slice(z);
        inp
    }

    /// Bounded log-scales and shifts for a passthrough part + condition.
    fn affine_params(&self, x: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let inp = self.conditioner_input(x, z);
        let mut log_s = self.scale_net.eval(&inp);
        for v in log_s.iter_mut() {
            *v = self.log_scale_bound * v.tanh();
        }
        let shift = self.shift_net.eval(&inp);
        (log_s, shift)
    }

    /// Single-sample forward: returns (y, sum of bounded log-scales).
    pub(crate) fn forward_plain(&self, x: &[f64], z: &[f64]) -> (Vec<f64>, f64) {
        let d = self.split_index;
        let (log_s, shift) = self.affine_params(x, z);
        let mut y = x.to_vec();
        let mut log_det = 0.0;
        for (i, (ls, b)) in log_s.iter().zip(&shift).enumerate() {
            y[d + i] = ls.exp() * x[d + i] + b;
            log_det += ls;
        }
        (y, log_det)
    }

    /// Exact algebraic inverse of [`CouplingLayer::forward_plain`].
    pub(crate) fn inverse_plain(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let d = self.split_index;
        let (log_s, shift) = self.affine_params(y, z);
        let mut x = y.to_vec();
        for (i, (ls, b)) in log_s.iter().zip(&shift).enumerate() {
            let s = ls.exp();
            // Unreachable with bounded log-scales; kept as a tripwire.
            if s.abs() < 1e-30 {
                return Err(Error::numeric(format!(
                    "scale underflow {s} at coordinate {}",
                    d + i
                )));
            }
            x[d + i] = (y[d + i] - b) / s;
        }
        Ok(x)
    }

    pub(crate) fn register(&self, tape: &mut Tape) -> Result<CouplingVars> {
        Ok(CouplingVars {
            scale: self.scale_net.register(tape)?,
            shift: self.shift_net.register(tape)?,
        })
    }

    /// Batched tape forward: `x` is `[batch, D]`, `z` is `[batch, cond_dim]`.
    /// Returns the transformed batch and the scalar sum of log-scales over
    /// the whole batch.
    pub(crate) fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &CouplingVars,
        x: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let d = self.split_index;
        let total = self.data_dim();
        let x1 = tape.slice_cols(x, 0, d)?;
        let x2 = tape.slice_cols(x, d, total - d)?;
        let inp = tape.concat_cols(x1, z)?;
        let raw_s = self.scale_net.forward_on(tape, &vars.scale, inp)?;
        let squashed = tape.tanh(raw_s)?;
        let log_s = tape.mul_scalar(squashed, self.log_scale_bound)?;
        let scale = tape.exp(log_s)?;
        let shift = self.shift_net.forward_on(tape, &vars.shift, inp)?;
        let scaled = tape.mul(scale, x2)?;
        let y2 = tape.add(scaled, shift)?;
        let y = tape.concat_cols(x1, y2)?;
        let log_det = tape.sum(log_s)?;
        Ok((y, log_det))
    }

    pub(crate) fn collect_grads(&mut self, tape: &Tape, vars: &CouplingVars) -> Result<()> {
        self.scale_net.collect_grads(tape, &vars.scale)?;
        self.shift_net.collect_grads(tape, &vars.shift)
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        let mut p = self.scale_net.params_mut();
        p.extend(self.shift_net.params_mut());
        p
    }
}
