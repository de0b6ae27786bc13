//! Contour pooling: merge consecutive landmark pairs along each organ cycle,
//! and the matching unpooling that restores the fine resolution with
//! midpoint interpolation. Both directions are expressed as constant
//! matrices so they ride the autodiff tape as plain matmuls.

use super::Topology;
use crate::error::Result;
use crate::tensor::Tensor;

/// Mapping between a fine topology and its coarsened version.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    pub fine: Topology,
    pub coarse: Topology,
}

impl PoolPlan {
    pub fn new(fine: &Topology) -> Self {
        PoolPlan {
            fine: fine.clone(),
            coarse: fine.coarsened(),
        }
    }

    /// [m, n] averaging matrix: coarse node i of an organ is the mean of
    /// fine nodes (2i, 2i+1); a trailing odd fine node maps alone with
    /// weight 1. Every row sums to 1.
    pub fn pool_matrix(&self) -> Tensor {
        let n = self.fine.total_nodes();
        let m = self.coarse.total_nodes();
        let mut p = vec![0.0; m * n];
        let f_off = self.fine.organ_offsets();
        let c_off = self.coarse.organ_offsets();
        for (oi, &fc) in self.fine.organ_counts.iter().enumerate() {
            let cc = self.coarse.organ_counts[oi];
            for ci in 0..cc {
                let row = c_off[oi] + ci;
                let a = f_off[oi] + 2 * ci;
                if 2 * ci + 1 < fc {
                    p[row * n + a] = 0.5;
                    p[row * n + a + 1] = 0.5;
                } else {
                    p[row * n + a] = 1.0;
                }
            }
        }
        Tensor::new(vec![m, n], p).expect("pool matrix shape")
    }

    /// [n, m] interpolation matrix: fine node 2i copies coarse node i, fine
    /// node 2i+1 is the midpoint of coarse nodes i and (i+1) mod m within
    /// the organ. Every row sums to 1.
    pub fn unpool_matrix(&self) -> Tensor {
        let n = self.fine.total_nodes();
        let m = self.coarse.total_nodes();
        let mut u = vec![0.0; n * m];
        let f_off = self.fine.organ_offsets();
        let c_off = self.coarse.organ_offsets();
        for (oi, &fc) in self.fine.organ_counts.iter().enumerate() {
            let cc = self.coarse.organ_counts[oi];
            for fi in 0..fc {
                let row = f_off[oi] + fi;
                if fi % 2 == 0 {
                    u[row * m + c_off[oi] + fi / 2] = 1.0;
                } else {
                    let a = c_off[oi] + fi / 2;
                    let b = c_off[oi] + (fi / 2 + 1) % cc;
                    if a == b {
                        u[row * m + a] = 1.0;
                    } else {
                        u[row * m + a] = 0.5;
                        u[row * m + b] = 0.5;
                    }
                }
            }
        }
        Tensor::new(vec![n, m], u).expect("unpool matrix shape")
    }

    /// Plain (off-tape) pooling of per-node features, e.g. coarsening ground
    /// truth coordinates. `feats` is [n, width] row-major.
    pub fn pool_features(&self, feats: &[f64], width: usize) -> Result<Vec<f64>> {
        let p = self.pool_matrix();
        let m = self.coarse.total_nodes();
        let n = self.fine.total_nodes();
        if feats.len() != n * width {
            return Err(crate::error::Error::invalid(format!(
                "pool_features: expected {} values, got {}",
                n * width,
                feats.len()
            )));
        }
        Ok(crate::tensor::matmul_raw(&p.data, feats, m, n, width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chest_plan_dimensions() {
        let plan = PoolPlan::new(&Topology::chest());
        let p = plan.pool_matrix();
        let u = plan.unpool_matrix();
        assert_eq!(p.shape, vec![60, 120]);
        assert_eq!(u.shape, vec![120, 60]);
    }

    #[test]
    fn pool_rows_sum_to_one() {
        for counts in [vec![44, 50, 26], vec![5, 3], vec![1, 2, 7]] {
            let plan = PoolPlan::new(&Topology::new(counts).unwrap());
            let p = plan.pool_matrix();
            let (m, n) = (p.shape[0], p.shape[1]);
            for i in 0..m {
                let s: f64 = p.data[i * n..(i + 1) * n].iter().sum();
                assert_eq!(s, 1.0, "pool row {i}");
            }
            let u = plan.unpool_matrix();
            let (n, m) = (u.shape[0], u.shape[1]);
            for i in 0..n {
                let s: f64 = u.data[i * m..(i + 1) * m].iter().sum();
                assert_eq!(s, 1.0, "unpool row {i}");
            }
        }
    }

    #[test]
    fn pool_averages_consecutive_pairs() {
        // 4-node organ with coordinates 0,1,2,3 -> coarse 0.5, 2.5.
        let plan = PoolPlan::new(&Topology::new(vec![4]).unwrap());
        let coords = vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0];
        let pooled = plan.pool_features(&coords, 2).unwrap();
        assert_eq!(pooled, vec![0.5, 10.5, 2.5, 12.5]);
    }

    #[test]
    fn odd_organ_keeps_trailing_singleton() {
        // 5 fine nodes -> 3 coarse: (0,1), (2,3), (4) alone.
        let plan = PoolPlan::new(&Topology::new(vec![5]).unwrap());
        assert_eq!(plan.coarse.organ_counts, vec![3]);
        let coords = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let pooled = plan.pool_features(&coords, 1).unwrap();
        assert_eq!(pooled, vec![0.5, 2.5, 4.0]);
    }

    #[test]
    fn unpool_copies_and_interpolates_midpoints() {
        // 3 coarse nodes -> 6 fine; odd fine nodes are cyclic midpoints.
        let plan = PoolPlan::new(&Topology::new(vec![6]).unwrap());
        let u = plan.unpool_matrix();
        let coarse = [0.0, 6.0, 12.0];
        let mut fine = vec![0.0; 6];
        for i in 0..6 {
            for j in 0..3 {
                fine[i] += u.data[i * 3 + j] * coarse[j];
            }
        }
        // Wrap-around midpoint of nodes 2 and 0: (12 + 0) / 2 = 6.
        assert_eq!(fine, vec![0.0, 3.0, 6.0, 9.0, 12.0, 6.0]);
    }

    #[test]
    fn pool_then_unpool_preserves_linear_ramps_in_the_interior() {
        // On an even cycle with linearly spaced values the roundtrip only
        // differs at the wrap; check a few interior nodes exactly.
        let plan = PoolPlan::new(&Topology::new(vec![8]).unwrap());
        let p = plan.pool_matrix();
        let u = plan.unpool_matrix();
        let fine: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let coarse = crate::tensor::matmul_raw(&p.data, &fine, 4, 8, 1);
        assert_eq!(coarse, vec![0.5, 2.5, 4.5, 6.5]);
        let back = crate::tensor::matmul_raw(&u.data, &coarse, 8, 4, 1);
        assert_eq!(back[0], 0.5);
        assert_eq!(back[1], 1.5);
        assert_eq!(back[2], 2.5);
        assert_eq!(back[6], 6.5);
    }

    #[test]
    fn organ_blocks_do_not_mix() {
        let plan = PoolPlan::new(&Topology::new(vec![4, 6]).unwrap());
        let p = plan.pool_matrix();
        let n = 10;
        // Coarse rows of organ 0 (rows 0..2) must not touch fine cols 4..10.
        for row in 0..2 {
            for col in 4..10 {
                assert_eq!(p.data[row * n + col], 0.0);
            }
        }
        let u = plan.unpool_matrix();
        let m = 5;
        for row in 0..4 {
            for col in 2..5 {
                assert_eq!(u.data[row * m + col], 0.0);
            }
        }
    }

    #[test]
    fn chest_pool_has_no_singletons() {
        // 44, 50, 26 are all even, so every coarse row has two 0.5 entries.
        let plan = PoolPlan::new(&Topology::chest());
        let p = plan.pool_matrix();
        let (m, n) = (p.shape[0], p.shape[1]);
        for i in 0..m {
            let nonzero = p.data[i * n..(i + 1) * n]
                .iter()
                .filter(|v| **v != 0.0)
                .count();
            assert_eq!(nonzero, 2);
        }
    }
}
