//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward pass from scratch for every perturbed
//! element, so analytic and numeric values come from fully independent
//! evaluations. Central differences give O(h^2) truncation error.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of checking one scalar function against finite differences.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// |a - b| / max(1, |a|, |b|): absolute near zero, relative when large.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Check d(loss)/d(inputs[i]) for every element of every input against a
/// central difference with step `h`. `build` must record all inputs as
/// leaves (in order) and return a scalar loss.
pub fn check(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids)?;
        if tape.value(root).numel() != 1 {
            return Err(Error::invalid("gradcheck: build must return a scalar"));
        }
        Ok((tape, ids, root))
    };

    let (tape, ids, root) = eval(inputs)?;
    if !tape.value(root).is_finite() {
        return Err(Error::Numeric("gradcheck: non-finite loss".into()));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| grads.get(*id).expect("leaf gradient").to_vec())
        .collect();

    let mut result = CheckResult {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + h;
            let (tape_p, _, root_p) = eval(&work)?;
            let fp = tape_p.value(root_p).data[0];
            work[pi].data[ei] = orig - h;
            let (tape_m, _, root_m) = eval(&work)?;
            let fm = tape_m.value(root_m).data[0];
            work[pi].data[ei] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[pi][ei], numeric);
            result.elements_checked += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = Some((pi, ei));
            }
        }
    }
    Ok(result)
}

/// One named gradient check with its own tolerance.
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub elements: usize,
}

impl SuiteEntry {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn fill(shape: &[usize], seed: u64) -> Tensor {
    // Deterministic quasi-random data kept away from ReLU/max kinks.
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let v = u * 2.0 - 1.0;
            // Push values away from zero so h-perturbations cannot cross kinks.
            v + 0.2 * v.signum()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Node centers for the roi checks, kept clear of bilinear cell boundaries
/// and the clamped border so finite differences never straddle a kink.
fn safe_centers(count: usize, map_w: usize, seed: u64) -> Tensor {
    let raw = fill(&[count, 2], seed);
    let w = map_w as f64;
    let data = raw
        .data
        .iter()
        .map(|v| {
            let s = ((v / 1.2 + 1.0) / 2.0).clamp(0.0, 1.0);
            let mut u = 0.26 + 0.48 * s;
            let c = u * w - 0.5;
            let f = c - c.floor();
            if f < 0.01 {
                u += 0.02 / w;
            } else if f > 0.99 {
                u -= 0.02 / w;
            }
            u
        })
        .collect();
    Tensor::new(vec![count, 2], data).unwrap()
}

/// Gradient checks covering every differentiable tape operation.
pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    op_suite_seeded(0)
}

/// The same suite on re-drawn inputs; `base` 0 reproduces `op_suite`.
pub fn op_suite_seeded(base: u64) -> Result<Vec<SuiteEntry>> {
    let sd = |k: u64| base.wrapping_mul(0x100000001B3).wrapping_add(k);
    let fill = |shape: &[usize], k: u64| fill(shape, sd(k));
    let mut suite = Vec::new();
    let mut push = |name: &'static str, tol: f64, res: CheckResult| {
        suite.push(SuiteEntry {
            name,
            max_rel_err: res.max_rel_err,
            tol,
            elements: res.elements_checked,
        });
    };

    push(
        "add_sub_mul",
        DEFAULT_TOL,
        check(&[fill(&[3, 4], 1), fill(&[3, 4], 2)], DEFAULT_STEP, |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let d = t.sub(s, ids[1])?;
            let p = t.mul(d, ids[1])?;
            Ok(t.sum(p))
        })?,
    );
    push(
        "scale_add_scalar",
        DEFAULT_TOL,
        check(&[fill(&[5], 3)], DEFAULT_STEP, |t, ids| {
            let s = t.scale(ids[0], -2.5);
            let s = t.add_scalar(s, 0.7);
            let sq = t.mul(s, s)?;
            Ok(t.mean(sq))
        })?,
    );
    push(
        "exp",
        DEFAULT_TOL,
        check(&[fill(&[6], 4)], DEFAULT_STEP, |t, ids| {
            let e = t.exp(ids[0]);
            Ok(t.sum(e))
        })?,
    );
    push(
        "relu",
        DEFAULT_TOL,
        check(&[fill(&[8], 5)], DEFAULT_STEP, |t, ids| {
            let r = t.relu(ids[0]);
            let sq = t.mul(r, r)?;
            Ok(t.sum(sq))
        })?,
    );
    push(
        "leaky_relu",
        DEFAULT_TOL,
        check(&[fill(&[8], 45)], DEFAULT_STEP, |t, ids| {
            let r = t.leaky_relu(ids[0], 0.2);
            let sq = t.mul(r, r)?;
            Ok(t.sum(sq))
        })?,
    );
    push(
        "matmul_affine",
        DEFAULT_TOL,
        check(
            &[fill(&[2, 3], 6), fill(&[3, 4], 7), fill(&[4], 8)],
            DEFAULT_STEP,
            |t, ids| {
                let y = t.affine(ids[0], ids[1], ids[2])?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            },
        )?,
    );
    push(
        "layer_norm_rows",
        DEFAULT_TOL,
        check(
            &[fill(&[3, 5], 9), fill(&[5], 10), fill(&[5], 11)],
            DEFAULT_STEP,
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
        )?,
    );
    push(
        "layer_norm_nchw",
        DEFAULT_TOL,
        check(
            &[fill(&[2, 3, 4, 4], 12), fill(&[3], 13), fill(&[3], 14)],
            DEFAULT_STEP,
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
        )?,
    );
    push(
        "conv2d",
        DEFAULT_TOL,
        check(
            &[fill(&[2, 2, 5, 5], 15), fill(&[3, 2, 3, 3], 16), fill(&[3], 17)],
            DEFAULT_STEP,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            },
        )?,
    );
    push(
        "conv2d_stride2",
        DEFAULT_TOL,
        check(
            &[fill(&[1, 2, 6, 6], 18), fill(&[2, 2, 3, 3], 19), fill(&[2], 20)],
            DEFAULT_STEP,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
        )?,
    );
    push(
        "maxpool2d",
        DEFAULT_TOL,
        check(&[fill(&[1, 2, 4, 4], 21)], DEFAULT_STEP, |t, ids| {
            let y = t.maxpool2d(ids[0], 2)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        })?,
    );
    push(
        "roi_pool_map",
        DEFAULT_TOL,
        check(&[fill(&[2, 6, 6], 22)], DEFAULT_STEP, |t, ids| {
            let centers = t.constant(safe_centers(3, 6, sd(33)));
            let y = t.roi_pool(ids[0], centers)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        })?,
    );
    // Bilinear sampling is piecewise linear in the centers; the FD step is
    // tiny relative to a cell but the rule is still inexact at the sampled
    // scale, so the centers get a looser tolerance.
    push(
        "roi_pool_centers",
        1e-3,
        check(&[safe_centers(3, 6, sd(34))], DEFAULT_STEP, |t, ids| {
            let map = t.constant(fill(&[2, 6, 6], 23));
            let y = t.roi_pool(map, ids[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        })?,
    );
    push(
        "reductions_reshape_concat",
        DEFAULT_TOL,
        check(&[fill(&[2, 6], 24), fill(&[2, 3], 25)], DEFAULT_STEP, |t, ids| {
            let r = t.reshape(ids[0], vec![2, 6])?;
            let c = t.concat_cols(r, ids[1])?;
            let m = t.mean(c);
            let s = t.sum(c);
            let both = t.add(m, s)?;
            let sq = t.mul(both, both)?;
            Ok(t.sum(sq))
        })?,
    );
    push(
        "mse_composite",
        DEFAULT_TOL,
        check(&[fill(&[4, 2], 26)], DEFAULT_STEP, |t, ids| {
            let target = t.constant(fill(&[4, 2], 27));
            t.mse(ids[0], target)
        })?,
    );
    push(
        "kl_unit_gaussian",
        DEFAULT_TOL,
        check(&[fill(&[6], 28), fill(&[6], 29)], DEFAULT_STEP, |t, ids| {
            t.kl_unit_gaussian(ids[0], ids[1])
        })?,
    );
    push(
        "reparameterize",
        DEFAULT_TOL,
        check(&[fill(&[5], 30), fill(&[5], 31)], DEFAULT_STEP, |t, ids| {
            let eps = t.constant(fill(&[5], 32));
            let z = t.reparameterize(ids[0], ids[1], eps)?;
            let sq = t.mul(z, z)?;
            Ok(t.sum(sq))
        })?,
    );
    Ok(suite)
}
