//! Contour-to-mask rasterization: even-odd scanline polygon fill. A pixel
//! belongs to a polygon iff its center lies inside under the even-odd rule,
//! with half-open vertex handling so shared vertices are counted once.

use crate::data::{Mask, LABEL_HEART, LABEL_LUNGS};
use crate::graph::Topology;

/// Crossing of a polygon edge with the horizontal line y = py, using the
/// half-open rule ymin <= py < ymax (horizontal edges contribute nothing).
fn edge_crossing(x1: f64, y1: f64, x2: f64, y2: f64, py: f64) -> Option<f64> {
    if y1 == y2 {
        return None;
    }
    let (ymin, ymax) = if y1 < y2 { (y1, y2) } else { (y2, y1) };
    if py < ymin || py >= ymax {
        return None;
    }
    Some(x1 + (py - y1) * (x2 - x1) / (y2 - y1))
}

/// Set `value` on every pixel of `out` whose center falls inside the closed
/// polygon (flat [N, 2] vertex list, implicitly closed).
pub fn fill_polygon(out: &mut [u8], width: usize, height: usize, polygon: &[f64], value: u8) {
    let n = polygon.len() / 2;
    if n < 3 {
        return;
    }
    let mut crossings: Vec<f64> = Vec::with_capacity(8);
    for iy in 0..height {
        let py = iy as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let j = (i + 1) % n;
            if let Some(x) = edge_crossing(
                polygon[2 * i],
                polygon[2 * i + 1],
                polygon[2 * j],
                polygon[2 * j + 1],
                py,
            ) {
                crossings.push(x);
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Pixel centers strictly between crossing pairs are inside.
        for pair in crossings.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            let start = (xa - 0.5).floor() as isize + 1;
            let end = (xb - 0.5).ceil() as isize - 1;
            let lo = start.max(0) as usize;
            let hi = (end.min(width as isize - 1).max(-1)) as isize;
            for ix in lo as isize..=hi {
                out[iy * width + ix as usize] = value;
            }
        }
    }
}

/// Reference point-in-polygon: count edge crossings strictly right of the
/// point; odd means inside. Shares the exact crossing arithmetic with the
/// scanline fill, so agreement is bit-exact.
pub fn point_in_polygon(px: f64, py: f64, polygon: &[f64]) -> bool {
    let n = polygon.len() / 2;
    let mut count = 0;
    for i in 0..n {
        let j = (i + 1) % n;
        if let Some(x) = edge_crossing(
            polygon[2 * i],
            polygon[2 * i + 1],
            polygon[2 * j],
            polygon[2 * j + 1],
            py,
        ) {
            if x > px {
                count += 1;
            }
        }
    }
    count % 2 == 1
}

/// Rasterize organ contours into a label mask: both lungs filled with label
/// 1, the heart with label 2 on top (heart overwrites lung overlap).
pub fn rasterize(points: &[f64], topology: &Topology, width: usize, height: usize) -> Mask {
    let mut labels = vec![0u8; width * height];
    let offsets = topology.organ_offsets();
    let organs = topology.organ_counts.len();
    for oi in 0..organs {
        let value = if oi + 1 == organs { LABEL_HEART } else { LABEL_LUNGS };
        let poly = &points[2 * offsets[oi]..2 * offsets[oi + 1]];
        fill_polygon(&mut labels, width, height, poly, value);
    }
    Mask::new(width, height, labels).expect("labels constructed in range")
}
