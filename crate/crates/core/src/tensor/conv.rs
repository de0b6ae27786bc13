//! Dense kernels behind the convolutional tape ops. Forward and backward
//! share the same bounds logic so padding and stride behave identically in
//! both directions.

use super::Tensor;
use crate::error::{Error, Result};

/// input [N, C, H, W] * kernel [F, C, kh, kw] + bias [F] -> [N, F, Ho, Wo].
pub(super) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, c, h, w, f, kh, kw) = conv_dims(input, kernel, bias)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];

    for ni in 0..n {
        for fi in 0..f {
            let out_base = (ni * f + fi) * ho * wo;
            out[out_base..out_base + ho * wo].fill(bias.data[fi]);
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let k_base = (fi * c + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let weight = kernel.data[k_base + khi * kw + kwi];
                        if weight == 0.0 {
                            continue;
                        }
                        // out[oy, ox] += weight * in[oy*stride + khi - p, ox*stride + kwi - p]
                        for oy in 0..ho {
                            let iy = (oy * stride + khi) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &input.data[in_base + iy as usize * w..in_base + (iy as usize + 1) * w];
                            let out_row = &mut out[out_base + oy * wo..out_base + (oy + 1) * wo];
                            if stride == 1 {
                                // ix = ox + kwi - p must lie in [0, w)
                                let off = kwi as isize - padding as isize;
                                let ox_lo = (-off).max(0) as usize;
                                let ox_hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                                let src = &in_row[(ox_lo as isize + off) as usize..];
                                for (o, s) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += weight * s;
                                }
                            } else {
                                for ox in 0..wo {
                                    let ix = (ox * stride + kwi) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        out_row[ox] += weight * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, vec![n, f, ho, wo]))
}

/// Gradients for [`conv2d_forward`]: (d_input, d_kernel, d_bias).
pub(super) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (f, kh, kw) = (kernel.shape[0], kernel.shape[2], kernel.shape[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;

    let mut dx = vec![0.0; input.numel()];
    let mut dk = vec![0.0; kernel.numel()];
    let mut db = vec![0.0; f];

    for ni in 0..n {
        for fi in 0..f {
            let out_base = (ni * f + fi) * ho * wo;
            for v in &g[out_base..out_base + ho * wo] {
                db[fi] += v;
            }
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let k_base = (fi * c + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let weight = kernel.data[k_base + khi * kw + kwi];
                        let mut wgrad = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + khi) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = in_base + iy as usize * w;
                            let g_row = &g[out_base + oy * wo..out_base + (oy + 1) * wo];
                            if stride == 1 {
                                let off = kwi as isize - padding as isize;
                                let ox_lo = (-off).max(0) as usize;
                                let ox_hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                                let in_row = &input.data[row + (ox_lo as isize + off) as usize..];
                                let dx_row = &mut dx[row + (ox_lo as isize + off) as usize..];
                                for (i, gv) in g_row[ox_lo..ox_hi].iter().enumerate() {
                                    wgrad += gv * in_row[i];
                                    dx_row[i] += gv * weight;
                                }
                            } else {
                                for ox in 0..wo {
                                    let ix = (ox * stride + kwi) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        let gv = g_row[ox];
                                        wgrad += gv * input.data[row + ix as usize];
                                        dx[row + ix as usize] += gv * weight;
                                    }
                                }
                            }
                        }
                        dk[k_base + khi * kw + kwi] += wgrad;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.shape.len() != 4 || kernel.shape.len() != 4 {
        return Err(Error::invalid(format!(
            "conv2d: expected 4-axis input/kernel, got {:?} / {:?}",
            input.shape, kernel.shape
        )));
    }
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (f, kc, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc != c {
        return Err(Error::invalid(format!(
            "conv2d: input has {c} channels, kernel expects {kc}"
        )));
    }
    if bias.shape != [f] {
        return Err(Error::invalid(format!(
            "conv2d: bias shape {:?}, expected [{f}]",
            bias.shape
        )));
    }
    Ok((n, c, h, w, f, kh, kw))
}

/// Non-overlapping window max over dimensions divisible by the window.
/// Returns the flat argmax per output cell (first occurrence in row-major
/// order on ties) for the backward pass.
pub(super) fn maxpool_forward(
    input: &Tensor,
    window: usize,
) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    if input.shape.len() != 4 {
        return Err(Error::invalid(format!(
            "maxpool2d: expected 4-axis input, got {:?}",
            input.shape
        )));
    }
    if window == 0 {
        return Err(Error::invalid("maxpool2d: window must be >= 1"));
    }
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    if h % window != 0 || w % window != 0 {
        return Err(Error::invalid(format!(
            "maxpool2d: input {h}x{w} not divisible by window {window}"
        )));
    }
    let ho = h / window;
    let wo = w / window;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    let row = in_base + (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        let v = input.data[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out[out_base + oy * wo + ox] = best;
                argmax[out_base + oy * wo + ox] = best_idx;
            }
        }
    }
    Ok((out, vec![n, c, ho, wo], argmax))
}

const ROI_OFFSETS: [f64; 3] = [-1.0, 0.0, 1.0];

/// map [C, H, W] or [1, C, H, W], centers [M, 2] in [0,1]^2 -> [M, C].
/// Each output is the mean of a 3x3 grid of bilinear samples spaced one
/// feature-map pixel apart around the center.
pub(super) fn roi_pool_forward(map: &Tensor, centers: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let (c, h, w, offset) = roi_map_dims(map)?;
    if centers.shape.len() != 2 || centers.shape[1] != 2 {
        return Err(Error::invalid(format!(
            "roi_pool: centers must be [M, 2], got {:?}",
            centers.shape
        )));
    }
    let m = centers.shape[0];
    let mut out = vec![0.0; m * c];
    for mi in 0..m {
        let cx = centers.data[mi * 2] * w as f64 - 0.5;
        let cy = centers.data[mi * 2 + 1] * h as f64 - 0.5;
        for dy in ROI_OFFSETS {
            for dx in ROI_OFFSETS {
                let sx = (cx + dx).clamp(0.0, (w - 1) as f64);
                let sy = (cy + dy).clamp(0.0, (h - 1) as f64);
                let (x0, wx) = bilinear_cell(sx, w);
                let (y0, wy) = bilinear_cell(sy, h);
                for ci in 0..c {
                    let base = offset + ci * h * w;
                    let f00 = map.data[base + y0 * w + x0];
                    let f01 = map.data[base + y0 * w + (x0 + 1).min(w - 1)];
                    let f10 = map.data[base + (y0 + 1).min(h - 1) * w + x0];
                    let f11 = map.data[base + (y0 + 1).min(h - 1) * w + (x0 + 1).min(w - 1)];
                    let v = (1.0 - wy) * ((1.0 - wx) * f00 + wx * f01)
                        + wy * ((1.0 - wx) * f10 + wx * f11);
                    out[mi * c + ci] += v / 9.0;
                }
            }
        }
    }
    Ok((out, vec![m, c]))
}

/// Gradients for [`roi_pool_forward`]: (d_map, d_centers). Samples whose
/// coordinate was clamped contribute no center gradient on that axis.
pub(super) fn roi_pool_backward(
    map: &Tensor,
    centers: &Tensor,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w, offset) = roi_map_dims(map).expect("validated at forward");
    let m = centers.shape[0];
    let mut dmap = vec![0.0; map.numel()];
    let mut dcenters = vec![0.0; m * 2];
    for mi in 0..m {
        let cx = centers.data[mi * 2] * w as f64 - 0.5;
        let cy = centers.data[mi * 2 + 1] * h as f64 - 0.5;
        for dy in ROI_OFFSETS {
            for dx in ROI_OFFSETS {
                let raw_x = cx + dx;
                let raw_y = cy + dy;
                let sx = raw_x.clamp(0.0, (w - 1) as f64);
                let sy = raw_y.clamp(0.0, (h - 1) as f64);
                let x_free = raw_x > 0.0 && raw_x < (w - 1) as f64;
                let y_free = raw_y > 0.0 && raw_y < (h - 1) as f64;
                let (x0, wx) = bilinear_cell(sx, w);
                let (y0, wy) = bilinear_cell(sy, h);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                for ci in 0..c {
                    let gv = g[mi * c + ci] / 9.0;
                    if gv == 0.0 {
                        continue;
                    }
                    let base = offset + ci * h * w;
                    dmap[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    dmap[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                    dmap[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                    dmap[base + y1 * w + x1] += gv * wy * wx;
                    let f00 = map.data[base + y0 * w + x0];
                    let f01 = map.data[base + y0 * w + x1];
                    let f10 = map.data[base + y1 * w + x0];
                    let f11 = map.data[base + y1 * w + x1];
                    if x_free {
                        let dv_dx = (1.0 - wy) * (f01 - f00) + wy * (f11 - f10);
                        dcenters[mi * 2] += gv * dv_dx * w as f64;
                    }
                    if y_free {
                        let dv_dy = (1.0 - wx) * (f10 - f00) + wx * (f11 - f01);
                        dcenters[mi * 2 + 1] += gv * dv_dy * h as f64;
                    }
                }
            }
        }
    }
    (dmap, dcenters)
}

fn roi_map_dims(map: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match map.shape.as_slice() {
        [c, h, w] => Ok((*c, *h, *w, 0)),
        [1, c, h, w] => Ok((*c, *h, *w, 0)),
        other => Err(Error::invalid(format!(
            "roi_pool: map must be [C,H,W] or [1,C,H,W], got {other:?}"
        ))),
    }
}

/// Left cell index and fractional weight for a coordinate already clamped to
/// [0, size-1]. The left index stays within [0, size-2] so the right
/// neighbour exists (weight soaks up the remainder at the top edge).
fn bilinear_cell(coord: f64, size: usize) -> (usize, f64) {
    if size == 1 {
        return (0, 0.0);
    }
    let left = (coord.floor() as usize).min(size - 2);
    (left, coord - left as f64)
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        // 3x3 kernel with 1 at the middle, padding 1 -> identity
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = tape.leaf(t(&[1, 1, 3, 3], &k));
        let bias = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, kernel, bias, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn conv2d_all_ones_counts_coverage() {
        // 2x2 ones kernel over 3x3 ones image, no padding: every output is 4.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let kernel = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4]));
        let bias = tape.leaf(t(&[1], &[0.5]));
        let y = tape.conv2d(x, kernel, bias, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data, vec![4.5; 4]);
    }

    #[test]
    fn conv2d_padding_shrinks_border_sums() {
        // With padding 1 the corner only covers 1 input pixel of the ones image.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4]));
        let kernel = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let bias = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, kernel, bias, 1, 1).unwrap();
        assert_eq!(tape.value(y).data, vec![4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_stride_two_output_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 8, 8]));
        let kernel = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        let bias = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, kernel, bias, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv2d_matches_brute_force() {
        // Direct quadruple-loop reference on a multi-channel case.
        let (n, c, f, h, w, kh, kw, pad) = (2, 3, 4, 5, 6, 3, 3, 1);
        let xv: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect();
        let kv: Vec<f64> = (0..f * c * kh * kw).map(|i| ((i * 23 % 17) as f64 - 8.0) / 5.0).collect();
        let bv: Vec<f64> = (0..f).map(|i| i as f64 * 0.3 - 0.5).collect();

        let ho = h + 2 * pad - kh + 1;
        let wo = w + 2 * pad - kw + 1;
        let mut expected = vec![0.0; n * f * ho * wo];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = bv[fi];
                        for ci in 0..c {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let iy = oy as isize + khi as isize - pad as isize;
                                    let ix = ox as isize + kwi as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        s += xv[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * kv[((fi * c + ci) * kh + khi) * kw + kwi];
                                    }
                                }
                            }
                        }
                        expected[((ni * f + fi) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[n, c, h, w], &xv));
        let kernel = tape.leaf(t(&[f, c, kh, kw], &kv));
        let bias = tape.leaf(t(&[f], &bv));
        let y = tape.conv2d(x, kernel, bias, 1, pad).unwrap();
        for (got, want) in tape.value(y).data.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let mut tape = Tape::new();
        // Second window has a tie (both 7.0): gradient must go to the first.
        let x = tape.leaf(t(
            &[1, 1, 2, 4],
            &[1.0, 3.0, 7.0, 2.0, 4.0, 2.0, 5.0, 7.0],
        ));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 2]);
        assert_eq!(tape.value(y).data, vec![4.0, 7.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(
            grads.get(x).unwrap(),
            &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn maxpool_halves_even_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 8, 8]));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4, 4]);
    }

    #[test]
    fn maxpool_window_one_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 1).unwrap();
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn maxpool_rejects_non_divisible_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 4]));
        assert!(tape.maxpool2d(x, 2).is_err());
    }

    #[test]
    fn maxpool_two_by_two_window_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data, vec![4.0]);
    }

    #[test]
    fn conv2d_one_by_one_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let kernel = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let bias = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, kernel, bias, 1, 0).unwrap();
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn conv2d_sum_window_by_hand() {
        // 3x3 all-ones kernel over a 3x3 input of all 2s -> 18.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[2.0; 9]));
        let kernel = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let bias = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, kernel, bias, 1, 0).unwrap();
        assert_eq!(tape.value(y).data, vec![18.0]);
    }

    #[test]
    fn roi_pool_two_pixel_midpoint() {
        // 1x1x2 map [0, 1]; the center halfway between the two pixel
        // centers averages to 0.5 (edge samples clamp symmetrically).
        let mut tape = Tape::new();
        let map = tape.leaf(t(&[1, 1, 2], &[0.0, 1.0]));
        let centers = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let y = tape.roi_pool(map, centers).unwrap();
        assert!((tape.value(y).data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_constant_map_returns_constant() {
        let mut tape = Tape::new();
        let map = tape.leaf(t(&[2, 4, 4], &[[3.5; 16], [-1.0; 16]].concat()));
        let centers = tape.constant(t(&[3, 2], &[0.5, 0.5, 0.1, 0.9, 0.0, 0.0]));
        let y = tape.roi_pool(map, centers).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        for mi in 0..3 {
            assert!((tape.value(y).data[mi * 2] - 3.5).abs() < 1e-12);
            assert!((tape.value(y).data[mi * 2 + 1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_pool_center_of_uniform_patch_is_exact() {
        // Map is a ramp in x. The 3x3 samples around an interior center are
        // symmetric, so their mean equals the value at the center.
        let mut map_data = vec![0.0; 8 * 8];
        for y in 0..8 {
            for x in 0..8 {
                map_data[y * 8 + x] = x as f64;
            }
        }
        let mut tape = Tape::new();
        let map = tape.leaf(t(&[1, 8, 8], &map_data));
        // center (0.5, 0.5) -> pixel coords (3.5, 3.5)
        let centers = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let y = tape.roi_pool(map, centers).unwrap();
        assert!((tape.value(y).data[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_out_of_range_center_clamps() {
        let mut tape = Tape::new();
        let map = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let centers = tape.constant(t(&[2, 2], &[-5.0, -5.0, 5.0, 5.0]));
        let y = tape.roi_pool(map, centers).unwrap();
        // Fully clamped to the corner pixels (up to 1/9-weight accumulation).
        assert!((tape.value(y).data[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(y).data[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_map_gradient_sums_to_incoming() {
        // Bilinear weights per sample sum to 1, so d(out)/d(map) sums to 1.
        let mut tape = Tape::new();
        let map = tape.leaf(t(&[1, 6, 6], &(0..36).map(|i| i as f64 * 0.1).collect::<Vec<_>>()));
        let centers = tape.constant(t(&[1, 2], &[0.47, 0.61]));
        let y = tape.roi_pool(map, centers).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let total: f64 = grads.get(map).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_center_gradient_tracks_ramp_slope() {
        // out = mean of samples of f(x,y) = x_px; d out / d u = W exactly
        // (interior, no clamping), since x_px = u*W - 0.5.
        let mut map_data = vec![0.0; 8 * 8];
        for y in 0..8 {
            for x in 0..8 {
                map_data[y * 8 + x] = x as f64;
            }
        }
        let mut tape = Tape::new();
        let map = tape.constant(t(&[1, 8, 8], &map_data));
        let centers = tape.leaf(t(&[1, 2], &[0.5, 0.5]));
        let y = tape.roi_pool(map, centers).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let d = grads.get(centers).unwrap();
        assert!((d[0] - 8.0).abs() < 1e-10);
        assert!(d[1].abs() < 1e-10);
    }
}
