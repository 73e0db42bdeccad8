//! Shared fixtures for unit tests.

use rand::Rng;

use crate::tensor::Tensor;

/// Two Gaussian blobs in `[0,1]^dim`, linearly separable for small `std`.
/// Returns `(features [2n, dim], labels)` with class blocks interleaved.
pub fn two_blobs(n_per_class: usize, dim: usize, std: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = crate::rng::rng_for(seed, "blobs");
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let center = if class == 0 { 0.3 } else { 0.7 };
        let row: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (center + std * z).clamp(0.0, 1.0)
            })
            .collect();
        rows.push(row);
        labels.push(class);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

/// Plain logistic regression by gradient descent; an oracle independent of
/// the tape and the classifier module.
pub struct LogisticOracle {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticOracle {
    pub fn fit(x: &Tensor, labels: &[usize], steps: usize, lr: f64) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..n {
                let row = x.row(i);
                let z: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - labels[i] as f64;
                for j in 0..d {
                    gw[j] += err * row[j];
                }
                gb += err;
            }
            for j in 0..d {
                w[j] -= lr * gw[j] / n as f64;
            }
            b -= lr * gb / n as f64;
        }
        LogisticOracle { weights: w, bias: b }
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let n = x.rows();
        let mut hits = 0;
        for i in 0..n {
            let z: f64 = x
                .row(i)
                .iter()
                .zip(&self.weights)
                .map(|(a, c)| a * c)
                .sum::<f64>()
                + self.bias;
            let pred = usize::from(z > 0.0);
            if pred == labels[i] {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }
}
