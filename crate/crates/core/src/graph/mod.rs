//! Contour graph structure: organ cycles, graph Laplacians, and the spectral
//! rescaling used by Chebyshev convolution layers.

mod cheb;
mod pool;

pub use cheb::{cheb_conv, ChebLayer};
pub use pool::PoolPlan;

use crate::error::{Error, Result};

pub const POWER_ITER_TOL: f64 = 1e-9;
pub const POWER_ITER_MAX: usize = 10_000;

/// Landmark graph: one closed cycle of nodes per organ, no edges between
/// organs. Node indices are assigned contiguously in organ order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub organ_counts: Vec<usize>,
}

impl Topology {
    pub fn new(organ_counts: Vec<usize>) -> Result<Self> {
        if organ_counts.is_empty() {
            return Err(Error::invalid("topology: need at least one organ"));
        }
        if organ_counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("topology: organ with zero nodes"));
        }
        Ok(Topology { organ_counts })
    }

    /// Chest contour layout: right lung, left lung, heart.
    pub fn chest() -> Self {
        Topology {
            organ_counts: vec![44, 50, 26],
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.organ_counts.iter().sum()
    }

    /// Start index of each organ's node block (plus the total as a sentinel).
    pub fn organ_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.organ_counts.len() + 1);
        let mut acc = 0;
        for &c in &self.organ_counts {
            offs.push(acc);
            acc += c;
        }
        offs.push(acc);
        offs
    }

    /// Undirected edges of all organ cycles. A 1-node organ has no edges and
    /// a 2-node organ has a single edge.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        let offsets = self.organ_offsets();
        for (oi, &count) in self.organ_counts.iter().enumerate() {
            let start = offsets[oi];
            match count {
                1 => {}
                2 => edges.push((start, start + 1)),
                _ => {
                    for i in 0..count {
                        let a = start + i;
                        let b = start + (i + 1) % count;
                        edges.push((a.min(b), a.max(b)));
                    }
                }
            }
        }
        edges
    }

    /// Dense symmetric 0/1 adjacency, [n, n] row-major.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.total_nodes();
        let mut a = vec![0.0; n * n];
        for (i, j) in self.edges() {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        a
    }

    /// Combinatorial Laplacian L = D - A.
    pub fn laplacian(&self) -> Vec<f64> {
        let n = self.total_nodes();
        let l = laplacian_from_adjacency(&self.adjacency(), n);
        debug_assert_eq!(l.len(), n * n);
        // Row sums are exactly zero by construction; keep them that way.
        for i in 0..n {
            let row_sum: f64 = l[i * n..(i + 1) * n].iter().sum();
            debug_assert!(row_sum.abs() < 1e-12);
        }
        l
    }

    /// Topology after one level of contour pooling: consecutive node pairs
    /// merge, an odd trailing node stays as a singleton.
    pub fn coarsened(&self) -> Topology {
        Topology {
            organ_counts: self.organ_counts.iter().map(|c| c.div_ceil(2)).collect(),
        }
    }
}

/// L = D - A for a dense adjacency.
pub fn laplacian_from_adjacency(adj: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            degree += adj[i * n + j];
            l[i * n + j] = -adj[i * n + j];
        }
        l[i * n + i] += degree;
    }
    l
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// The start vector must not be constant: the all-ones vector spans the
/// Laplacian null space and would never leave it. The alternating ramp used
/// here overlaps the top eigenvector for every graph we build.
pub fn lambda_max(l: &[f64], n: usize) -> Result<f64> {
    if n == 0 || l.len() != n * n {
        return Err(Error::invalid("lambda_max: bad matrix size"));
    }
    if n == 1 {
        return Ok(l[0]);
    }
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let row = &l[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * v[j];
            }
            w[i] = s;
        }
        // Rayleigh quotient and eigen-residual ||Lv - lambda v||.
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let residual: f64 = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (b - lambda * a) * (b - lambda * a))
            .sum::<f64>()
            .sqrt();
        if residual < POWER_ITER_TOL {
            return Ok(lambda);
        }
        if normalize(&mut w) == 0.0 {
            // v landed exactly in the null space; L must be all-zero here.
            return Ok(0.0);
        }
        v = w;
    }
    // Iteration cap reached (near-degenerate spectrum): the Rayleigh
    // quotient is still a usable estimate, accurate to O(residual^2).
    Ok(lambda)
}

/// Rescale the Laplacian to put its spectrum in [-1, 1]:
/// L_scaled = 2 L / lambda_max - I. Returns the matrix and lambda_max.
pub fn scaled_laplacian(l: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let lam = lambda_max(l, n)?;
    if lam <= 0.0 {
        return Err(Error::invalid(
            "scaled_laplacian: graph has no edges (lambda_max is not positive)",
        ));
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 2.0 * l[i * n + j] / lam - if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok((s, lam))
}

/// One graph resolution: its topology and precomputed rescaled Laplacian.
#[derive(Debug, Clone)]
pub struct Level {
    pub topology: Topology,
    /// [n, n] tensor, ready to drop onto a tape as a constant.
    pub l_scaled: crate::tensor::Tensor,
    pub lambda_max: f64,
}

/// Resolution pyramid shared by every sample: level 0 is the finest graph,
/// `plans[i]` coarsens level i into level i+1. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub plans: Vec<PoolPlan>,
}

impl Hierarchy {
    pub fn build(finest: &Topology, num_levels: usize) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::invalid("hierarchy: need at least one level"));
        }
        let mut levels = Vec::with_capacity(num_levels);
        let mut plans = Vec::with_capacity(num_levels - 1);
        let mut topo = finest.clone();
        for li in 0..num_levels {
            if let Some(&c) = topo.organ_counts.iter().find(|&&c| c < 3) {
                return Err(Error::invalid(format!(
                    "hierarchy: level {li} degenerates an organ cycle to {c} nodes (< 3)"
                )));
            }
            let n = topo.total_nodes();
            let (l_scaled, lambda_max) = scaled_laplacian(&topo.laplacian(), n)?;
            levels.push(Level {
                topology: topo.clone(),
                l_scaled: crate::tensor::Tensor::new(vec![n, n], l_scaled)?,
                lambda_max,
            });
            if li + 1 < num_levels {
                let plan = PoolPlan::new(&topo);
                topo = plan.coarse.clone();
                plans.push(plan);
            }
        }
        Ok(Hierarchy { levels, plans })
    }

    pub fn finest(&self) -> &Level {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &Level {
        self.levels.last().unwrap()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}
