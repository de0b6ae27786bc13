//! PCA over vectorized landmark rows for the linear baseline decoder.
//!
//! The basis comes from an eigendecomposition of the N x N Gram matrix of
//! the centered data (cyclic Jacobi rotations), which is cheaper than
//! working in the 2M-dimensional feature space for small training sets.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// [D] column means of the training rows.
    pub mean: Vec<f64>,
    /// [num_components, D] orthonormal principal directions, row-major,
    /// ordered by decreasing explained variance.
    pub components: Vec<f64>,
    /// Sample variance captured by each component (non-increasing).
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn num_components(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coefficients of a row in the basis: (row - mean) . components^T.
    pub fn project(&self, row: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if row.len() != d {
            return Err(Error::invalid(format!(
                "pca project: row has {} values, basis dim is {d}",
                row.len()
            )));
        }
        Ok((0..self.num_components())
            .map(|c| {
                let comp = &self.components[c * d..(c + 1) * d];
                row.iter()
                    .zip(&self.mean)
                    .zip(comp)
                    .map(|((x, m), v)| (x - m) * v)
                    .sum()
            })
            .collect())
    }

    /// mean + coeffs . components.
    pub fn decode(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.num_components() {
            return Err(Error::invalid(format!(
                "pca decode: {} coefficients for {} components",
                coeffs.len(),
                self.num_components()
            )));
        }
        let d = self.dim();
        let mut out = self.mean.clone();
        for (c, coeff) in coeffs.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&self.components[c * d..(c + 1) * d]) {
                *o += coeff * v;
            }
        }
        Ok(out)
    }
}

/// Fit a PCA basis to `n` rows of length `d` (row-major). Components are
/// the leading right singular vectors of the centered data matrix; asking
/// for more components than the data's rank is an error.
pub fn pca_fit(rows: &[f64], n: usize, d: usize, num_components: usize) -> Result<PcaBasis> {
    if rows.len() != n * d {
        return Err(Error::invalid(format!(
            "pca fit: {} values do not form {n} rows of {d}",
            rows.len()
        )));
    }
    if num_components == 0 || n == 0 || d == 0 {
        return Err(Error::invalid("pca fit: empty data or zero components"));
    }
    if num_components > n {
        return Err(Error::invalid(format!(
            "pca fit: {num_components} components from {n} rows"
        )));
    }

    let mut mean = vec![0.0f64; d];
    for row in rows.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = rows
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();

    // Gram matrix G = X X^T; eigenvalues are squared singular values.
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = centered[i * d..(i + 1) * d]
                .iter()
                .zip(&centered[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            gram[i * n + j] = dot;
            gram[j * n + i] = dot;
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(gram, n);

    let tol = eigvals.first().copied().unwrap_or(0.0).max(0.0) * 1e-12 + 1e-18;
    let rank = eigvals.iter().filter(|&&l| l > tol).count();
    if num_components > rank {
        return Err(Error::invalid(format!(
            "pca fit: {num_components} components exceed data rank {rank}"
        )));
    }

    let mut components = vec![0.0f64; num_components * d];
    let mut explained = Vec::with_capacity(num_components);
    for c in 0..num_components {
        let sigma = eigvals[c].sqrt();
        // v_c = X^T u_c / sigma.
        for i in 0..n {
            let u = eigvecs[i * n + c];
            if u == 0.0 {
                continue;
            }
            let coeff = u / sigma;
            for (out, x) in components[c * d..(c + 1) * d]
                .iter_mut()
                .zip(&centered[i * d..(i + 1) * d])
            {
                *out += coeff * x;
            }
        }
        explained.push(eigvals[c] / (n as f64 - 1.0));
    }

    Ok(PcaBasis {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in decreasing order and eigenvectors as the columns
/// of the second matrix (row-major [n, n]).
fn jacobi_eigh(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = (0..n).map(|i| a[i * n + i].abs()).fold(1e-300, f64::max);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut sorted = vec![0.0f64; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            sorted[row * n + new_col] = v[row * n + old_col];
        }
    }
    (eigvals, sorted)
}
