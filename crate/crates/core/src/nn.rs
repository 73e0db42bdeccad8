//! Dense layers, ELU MLPs, AdamW and learning-rate schedules.
//!
//! Training uses the tape path ([`Mlp::forward_on`]); inference paths that
//! never need gradients (flow inversion, embedding extraction) use the plain
//! [`Mlp::eval`] path. Both compute the same function.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Fully connected layer: `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape handles for one registered [`Dense`] layer.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    /// Xavier-initialized layer.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Dense {
            weight: Tensor::new(&[in_dim, out_dim], data)
                .expect("generated weights are finite")
                .requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).unwrap().requires_grad(true),
        }
    }

    /// Zero-initialized layer (identity output regardless of input).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[in_dim, out_dim]).unwrap().requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).unwrap().requires_grad(true),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: tape.leaf(&self.weight)?,
            bias: tape.leaf(&self.bias)?,
        })
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: DenseVars, x: Var) -> Result<Var> {
        let prod = tape.matmul(x, vars.weight)?;
        tape.add_row(prod, vars.bias)
    }

    /// Plain single-row forward, no recording.
    pub fn eval(&self, input: &[f64], out: &mut Vec<f64>) {
        let (ind, outd) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(input.len(), ind);
        out.clear();
        out.extend_from_slice(self.bias.data());
        let w = self.weight.data();
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * outd..(i + 1) * outd];
            for j in 0..outd {
                out[j] += xi * row[j];
            }
        }
    }
}

/// Stack of dense layers with ELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]. When `zero_last` is set the final
    /// layer starts at exactly zero so the network's initial output is zero.
    pub fn new(dims: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("Mlp needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("Mlp dims must be positive"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            layers.push(Dense::new(w[0], w[1], rng));
        }
        if zero_last {
            let last = layers.len() - 1;
            layers[last] = Dense::zeroed(dims[dims.len() - 2], dims[dims.len() - 1]);
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<Vec<DenseVars>> {
        self.layers.iter().map(|l| l.register(tape)).collect()
    }

    /// Batched tape forward: `x` is `[batch, in_dim]`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[DenseVars], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (layer, lv)) in self.layers.iter().zip(vars).enumerate() {
            h = layer.forward_on(tape, *lv, h)?;
            if i < last {
                h = tape.elu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain single-row forward, no recording.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.eval(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = crate::tensor::elu(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Copy the per-layer gradients off a tape into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[DenseVars]) -> Result<()> {
        for (layer, lv) in self.layers.iter_mut().zip(vars) {
            tape.write_grad(lv.weight, &mut layer.weight)?;
            tape.write_grad(lv.bias, &mut layer.bias)?;
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`, which must be passed in the same order every
    /// step. Each tensor must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, param) in params.iter_mut().enumerate() {
            let grad = param
                .grad()
                .ok_or_else(|| Error::State(format!("parameter {slot} has no gradient")))?
                .to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            crate::tensor::check_finite(data, "parameter after AdamW step")?;
            param.clear_grad();
        }
        Ok(())
    }
}

/// Per-epoch learning rate: optional linear warm-up, then exponential decay.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
}

impl LrSchedule {
    pub fn exponential(base_lr: f64, decay: f64) -> Self {
        LrSchedule { base_lr, warmup_epochs: 0, decay }
    }

    pub fn with_warmup(base_lr: f64, warmup_epochs: usize, decay: f64) -> Self {
        LrSchedule { base_lr, warmup_epochs, decay }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.base_lr * self.decay.powi((epoch - self.warmup_epochs) as i32)
        }
    }
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Gather rows of a `[n, d]` tensor into a `[len(idx), d]` tensor.
pub fn gather_rows(data: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = data.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= data.rows() {
            return Err(Error::Index(format!("row {i} out of {}", data.rows())));
        }
        out.extend_from_slice(data.row(i));
    }
    Tensor::new(&[idx.len(), d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        crate::rng::rng_for(seed, "nn-test")
    }

    #[test]
    fn tape_and_eval_paths_agree() {
        let mut r = rng(3);
        let mlp = Mlp::new(&[4, 8, 3], false, &mut r).unwrap();
        let input = vec![0.3, -0.7, 1.2, 0.05];
        let plain = mlp.eval(&input);

        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape).unwrap();
        let x = tape.leaf(&Tensor::new(&[1, 4], input).unwrap()).unwrap();
        let y = mlp.forward_on(&mut tape, &vars, x).unwrap();
        for (a, b) in tape.value(y).iter().zip(&plain) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng(11);
        let mut mlp = Mlp::new(&[3, 5, 2], false, &mut r).unwrap();
        let x = Tensor::new(&[2, 3], vec![0.5, -0.2, 0.8, -1.0, 0.3, 0.1]).unwrap();
        let labels = vec![0usize, 1];

        let loss_of = |mlp: &Mlp| -> f64 {
            let mut tape = Tape::new();
            let vars = mlp.register(&mut tape).unwrap();
            let xv = tape.leaf(&x).unwrap();
            let logits = mlp.forward_on(&mut tape, &vars, xv).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.value(loss)[0]
        };

        // Autodiff gradients
        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape).unwrap();
        let xv = tape.leaf(&x).unwrap();
        let logits = mlp.forward_on(&mut tape, &vars, xv).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        mlp.collect_grads(&tape, &vars).unwrap();

        // Central differences over every parameter
        let h = 1e-5;
        let ad_grads: Vec<Vec<f64>> = mlp
            .params()
            .iter()
            .map(|p| p.grad().unwrap().to_vec())
            .collect();
        for slot in 0..ad_grads.len() {
            for i in 0..ad_grads[slot].len() {
                let orig = mlp.params()[slot].data()[i];
                mlp.params_mut()[slot].data_mut()[i] = orig + h;
                let up = loss_of(&mlp);
                mlp.params_mut()[slot].data_mut()[i] = orig - h;
                let down = loss_of(&mlp);
                mlp.params_mut()[slot].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = ad_grads[slot][i];
                let err = (ad - fd).abs() / fd.abs().max(1.0);
                assert!(err <= 1e-4, "param {slot} index {i}: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        // minimize sum(w^2) from w = [3, -2]
        let mut w = Tensor::new(&[2], vec![3.0, -2.0]).unwrap().requires_grad(true);
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        for _ in 0..400 {
            let grad: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
            w.set_grad(grad).unwrap();
            opt.step(&mut [&mut w], 0.05).unwrap();
        }
        assert!(w.data().iter().all(|v| v.abs() < 1e-2), "w = {:?}", w.data());
    }

    #[test]
    fn warmup_schedule_shape() {
        let s = LrSchedule::with_warmup(1.0, 4, 0.5);
        assert_abs_diff_eq!(s.lr_at(0), 0.25);
        assert_abs_diff_eq!(s.lr_at(3), 1.0);
        assert_abs_diff_eq!(s.lr_at(4), 1.0);
        assert_abs_diff_eq!(s.lr_at(6), 0.25);
    }

    #[test]
    fn minibatches_cover_all_indices() {
        let mut r = rng(5);
        let batches = minibatches(10, 3, &mut r);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let mut r = rng(9);
        let mlp = Mlp::new(&[4, 6, 2], true, &mut r).unwrap();
        let out = mlp.eval(&[0.4, -0.3, 0.9, 2.0]);
        assert_eq!(out, vec![0.0, 0.0]);
    }
}
