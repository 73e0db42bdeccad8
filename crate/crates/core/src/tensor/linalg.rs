//! Symmetric eigendecomposition and PSD matrix square root.
//!
//! Cyclic Jacobi rotations: accurate and dependency-free at the dimensions
//! the evaluation path needs (embedding covariances, dim <= 256).

use crate::error::{Error, Result};
use crate::tensor::check_finite;

/// Maximum matrix dimension accepted by the eigensolver.
pub const MAX_EIG_DIM: usize = 256;

/// Square matrix constrained to be symmetric within 1e-9 per entry.
/// Entries are stored exactly symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymmetricMatrix {
    /// Build from row-major entries; rejects asymmetry beyond 1e-9.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dimension("symmetric matrix of dimension 0"));
        }
        if entries.len() != dim * dim {
            return Err(Error::dimension(format!(
                "{} entries for a {dim}x{dim} matrix",
                entries.len()
            )));
        }
        check_finite(&entries, "symmetric matrix")?;
        let mut sym = entries;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = sym[i * dim + j];
                let b = sym[j * dim + i];
                if (a - b).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "asymmetric entries at ({i},{j}): {a} vs {b}"
                    )));
                }
                let m = 0.5 * (a + b);
                sym[i * dim + j] = m;
                sym[j * dim + i] = m;
            }
        }
        Ok(SymmetricMatrix { dim, entries: sym })
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        SymmetricMatrix { dim, entries }
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let dim = values.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            entries[i * dim + i] = *v;
        }
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.entries[i * self.dim + i]).sum()
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Eigendecomposition of a symmetric matrix: `values` descending, `vectors`
/// row-major with eigenvector `k` in column `k`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub dim: usize,
}

impl EigenDecomposition {
    /// Entry (i, k) of the eigenvector matrix: component i of eigenvector k.
    pub fn vector_entry(&self, i: usize, k: usize) -> f64 {
        self.vectors[i * self.dim + k]
    }

    /// Reconstruct `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors[i * n + k] * self.values[k] * self.vectors[j * n + k];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }
}

/// Eigenvalues (descending) and orthonormal eigenvectors via cyclic Jacobi.
pub fn sym_eig(m: &SymmetricMatrix) -> Result<EigenDecomposition> {
    let n = m.dim;
    if n > MAX_EIG_DIM {
        return Err(Error::contract(format!(
            "sym_eig supports dim <= {MAX_EIG_DIM}, got {n}"
        )));
    }
    let mut a = m.entries.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let scale = m.frobenius().max(1.0);
    let tol = 1e-15 * scale;
    let max_sweeps = 64;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    let nip = c * aip - s * aiq;
                    let niq = s * aip + c * aiq;
                    a[i * n + p] = nip;
                    a[p * n + i] = nip;
                    a[i * n + q] = niq;
                    a[q * n + i] = niq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                // Accumulate the rotation into the eigenvector matrix.
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        // One final check: the last sweep may have finished the job.
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * s).sqrt() > tol {
            return Err(Error::numeric(format!(
                "Jacobi eigensolver did not converge in {max_sweeps} sweeps"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_k, &old_k) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + new_k] = v[i * n + old_k];
        }
    }
    Ok(EigenDecomposition { values, vectors, dim: n })
}

/// Principal square root of a PSD matrix. Eigenvalues in
/// `[-1e-8 * scale, 0)` are clamped to zero; more negative ones are a
/// domain error.
pub fn sqrtm_psd(m: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = sym_eig(m)?;
    let scale = eig
        .values
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let floor = -1e-8 * scale;
    let mut roots = Vec::with_capacity(eig.values.len());
    for &lambda in &eig.values {
        if lambda < floor {
            return Err(Error::Domain(format!(
                "matrix is not PSD: eigenvalue {lambda}"
            )));
        }
        roots.push(lambda.max(0.0).sqrt());
    }
    let n = m.dim;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += eig.vectors[i * n + k] * roots[k] * eig.vectors[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    SymmetricMatrix::new(n, out)
}

/// Row-major product of two square matrices of side `n`.
pub(crate) fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = crate::rng::rng_for(seed, "sym");
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-2.0..2.0);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        SymmetricMatrix::new(n, entries).unwrap()
    }

    #[test]
    fn rejects_asymmetry() {
        let err = SymmetricMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn eig_of_diagonal() {
        let m = SymmetricMatrix::diagonal(&[3.0, 1.0]).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert_abs_diff_eq!(eig.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[1], 1.0, epsilon = 1e-12);
        // Eigenvectors are the standard basis (up to sign).
        assert_abs_diff_eq!(eig.vector_entry(0, 0).abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.vector_entry(1, 1).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_two_by_two_hand_case() {
        // Characteristic polynomial of [[2,1],[1,2]]: (2-l)^2 - 1 = 0 => l = 3, 1.
        let m = SymmetricMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert_abs_diff_eq!(eig.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[1], 1.0, epsilon = 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // Columns match (1,1)/sqrt(2) and (1,-1)/sqrt(2) up to sign.
        let dot0 = (eig.vector_entry(0, 0) * r + eig.vector_entry(1, 0) * r).abs();
        let dot1 = (eig.vector_entry(0, 1) * r - eig.vector_entry(1, 1) * r).abs();
        assert_abs_diff_eq!(dot0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dot1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_reconstructs_random_8x8() {
        let m = random_symmetric(8, 42);
        let eig = sym_eig(&m).unwrap();
        let rec = eig.reconstruct();
        let max_err = rec
            .iter()
            .zip(m.entries())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-8 * 8.0, "reconstruction error {max_err}");
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        for seed in 0..10u64 {
            let n = 2 + (seed as usize % 7);
            let m = random_symmetric(n, seed);
            let eig = sym_eig(&m).unwrap();
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..n)
                        .map(|i| eig.vector_entry(i, a) * eig.vector_entry(i, b))
                        .sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!(
                        (dot - expect).abs() <= 1e-8,
                        "V^T V deviates at ({a},{b}): {dot}"
                    );
                }
            }
        }
    }

    #[test]
    fn eig_rejects_large_dim() {
        let m = SymmetricMatrix::identity(MAX_EIG_DIM + 1);
        assert!(matches!(sym_eig(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn sqrtm_identity_and_diagonal() {
        let id = SymmetricMatrix::identity(3);
        let r = sqrtm_psd(&id).unwrap();
        assert_eq!(r.entries(), id.entries());

        let m = SymmetricMatrix::diagonal(&[4.0, 9.0]).unwrap();
        let r = sqrtm_psd(&m).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(1, 1), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(0, 1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrtm_squares_back_to_input() {
        // Random PSD 6x6 built as B^T B.
        let mut rng = crate::rng::rng_for(7, "psd");
        let n = 6;
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut psd = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += b[k * n + i] * b[k * n + j];
                }
                psd[i * n + j] = acc;
            }
        }
        let m = SymmetricMatrix::new(n, psd).unwrap();
        let root = sqrtm_psd(&m).unwrap();
        let sq = matmul_square(root.entries(), root.entries(), n);
        let num: f64 = sq
            .iter()
            .zip(m.entries())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = m.frobenius().max(1e-12);
        assert!(num / denom <= 1e-6, "relative error {}", num / denom);
    }

    #[test]
    fn sqrtm_rejects_negative_definite() {
        let m = SymmetricMatrix::diagonal(&[1.0, -1.0]).unwrap();
        assert!(matches!(sqrtm_psd(&m), Err(Error::Domain(_))));
    }
}
