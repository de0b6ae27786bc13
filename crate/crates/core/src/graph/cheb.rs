//! Chebyshev spectral graph convolution on the autodiff tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Shape summary of one Chebyshev convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChebLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// Number of Chebyshev terms K (polynomial degree K-1).
    pub order: usize,
}

/// y = sum_k T_k(L_scaled) X theta_k + bias, evaluated via the feature-space
/// recursion X_0 = X, X_1 = L X, X_k = 2 L X_{k-1} - X_{k-2}.
///
/// `l_scaled` is the [M, M] rescaled Laplacian (usually a tape constant),
/// `x` is [M, Fin], each theta is [Fin, Fout], bias is [Fout].
pub fn cheb_conv(
    tape: &mut Tape,
    l_scaled: TensorId,
    x: TensorId,
    thetas: &[TensorId],
    bias: TensorId,
) -> Result<TensorId> {
    if thetas.is_empty() {
        return Err(Error::invalid("cheb_conv: need at least one theta (K >= 1)"));
    }
    let (m, fin) = match tape.shape(x) {
        [m, f] => (*m, *f),
        other => {
            return Err(Error::invalid(format!(
                "cheb_conv: x must be [M, Fin], got {other:?}"
            )))
        }
    };
    if tape.shape(l_scaled) != [m, m] {
        return Err(Error::invalid(format!(
            "cheb_conv: laplacian {:?} does not match {m} nodes",
            tape.shape(l_scaled)
        )));
    }
    let fout = match tape.shape(thetas[0]) {
        [i, o] if *i == fin => *o,
        other => {
            return Err(Error::invalid(format!(
                "cheb_conv: theta_0 {:?} incompatible with Fin={fin}",
                other
            )))
        }
    };
    for (k, th) in thetas.iter().enumerate() {
        if tape.shape(*th) != [fin, fout] {
            return Err(Error::invalid(format!(
                "cheb_conv: theta_{k} {:?} expected [{fin}, {fout}]",
                tape.shape(*th)
            )));
        }
    }

    let mut out = tape.matmul(x, thetas[0])?;
    if thetas.len() > 1 {
        let mut x_prev = x;
        let mut x_cur = tape.matmul(l_scaled, x)?;
        let term = tape.matmul(x_cur, thetas[1])?;
        out = tape.add(out, term)?;
        for th in &thetas[2..] {
            let lx = tape.matmul(l_scaled, x_cur)?;
            let two_lx = tape.scale(lx, 2.0);
            let x_next = tape.sub(two_lx, x_prev)?;
            let term = tape.matmul(x_next, *th)?;
            out = tape.add(out, term)?;
            x_prev = x_cur;
            x_cur = x_next;
        }
    }
    tape.add_row(out, bias)
}
