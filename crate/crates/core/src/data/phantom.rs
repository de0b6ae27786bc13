//! Synthetic chest phantoms: two lung ellipses plus a heart ellipse with
//! randomized geometry, rendered as smooth intensity regions with noise.
//! Gives the pipeline a self-contained dataset for tests and demos.

use super::{Image, Sample, Split, LABEL_HEART, LABEL_LUNGS};
use crate::graph::Topology;
use crate::metrics::rasterize;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Output side length; spacing is scaled so the physical field of view
/// matches a 0.35 mm/px acquisition at 1024x1024.
pub const PHANTOM_SIZE: usize = 128;

fn phantom_spacing_mm(size: usize) -> f64 {
    0.35 * 1024.0 / size as f64
}

/// One closed organ outline: an ellipse with mild vertical shaping. The
/// horizontal extent stays exactly [cx - a, cx + a] so width-based
/// measurements (CTR, the rasterization roundtrip) have a known answer.
struct Outline {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    /// Bottom-heavy stretch: y = cy + b sin t (1 + skew sin t).
    skew: f64,
}

impl Outline {
    fn draw(rng: &mut ChaCha8Rng, size: f64, cx: f64, cy: f64, a: f64, b: f64) -> Self {
        let j = |rng: &mut ChaCha8Rng| rng.random_range(0.92..1.08);
        Outline {
            cx: cx * size * j(rng),
            cy: cy * size * j(rng),
            a: a * size * j(rng),
            b: b * size * j(rng),
            skew: rng.random_range(0.00..0.12),
        }
    }

    fn points(&self, count: usize, out: &mut Vec<f64>) {
        for k in 0..count {
            let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            out.push(self.cx + self.a * t.cos());
            out.push(self.cy + self.b * t.sin() * (1.0 + self.skew * t.sin()));
        }
    }
}

/// Geometry drawn for one phantom; exposed so tests can compare generated
/// parameters against measurements on the rendered sample.
pub struct PhantomGeometry {
    pub right_lung: (f64, f64, f64, f64),
    pub left_lung: (f64, f64, f64, f64),
    pub heart: (f64, f64, f64, f64),
}

pub fn synthesize_phantom(rng: &mut ChaCha8Rng) -> Sample {
    synthesize_phantom_sized(rng, PHANTOM_SIZE).0
}

/// Full variant returning the drawn geometry alongside the sample.
pub fn synthesize_phantom_sized(rng: &mut ChaCha8Rng, size: usize) -> (Sample, PhantomGeometry) {
    let topology = Topology::chest();
    let s = size as f64;

    let right = Outline::draw(rng, s, 0.33, 0.46, 0.145, 0.300);
    let left = Outline::draw(rng, s, 0.67, 0.46, 0.145, 0.300);
    let heart = Outline::draw(rng, s, 0.50, 0.62, 0.170, 0.135);

    let mut landmarks = Vec::with_capacity(2 * topology.total_nodes());
    let counts = topology.organ_counts.clone();
    right.points(counts[0], &mut landmarks);
    left.points(counts[1], &mut landmarks);
    heart.points(counts[2], &mut landmarks);

    let mask = rasterize(&landmarks, &topology, size, size);

    // Region base intensities, mildly jittered per phantom.
    let tissue = rng.random_range(0.50..0.60);
    let lung = rng.random_range(0.20..0.30);
    let heart_val = rng.random_range(0.70..0.80);
    let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.random_range(0.0..std::f64::consts::TAU);

    let mut data = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let base = match mask.labels[y * size + x] {
                LABEL_LUNGS => lung,
                LABEL_HEART => heart_val,
                _ => tissue,
            };
            let shade = 0.02
                * (2.0 * std::f64::consts::PI * x as f64 / s + phase_x).sin()
                * (2.0 * std::f64::consts::PI * y as f64 / s + phase_y).sin();
            data[y * size + x] = base + shade;
        }
    }
    blur3(&mut data, size, size);
    blur3(&mut data, size, size);
    for v in data.iter_mut() {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }

    let geometry = PhantomGeometry {
        right_lung: (right.cx, right.cy, right.a, right.b),
        left_lung: (left.cx, left.cy, left.a, left.b),
        heart: (heart.cx, heart.cy, heart.a, heart.b),
    };
    let sample = Sample {
        id: "phantom".to_string(),
        image: Image::new(size, size, data).expect("phantom intensities are finite"),
        landmarks,
        mask: Some(mask),
        spacing_mm: phantom_spacing_mm(size),
        split: Split::Train,
    };
    (sample, geometry)
}

/// In-place 3x3 box blur with edge clamping.
fn blur3(data: &mut [f64], width: usize, height: usize) {
    let src = data.to_vec();
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    acc += src[sy * width + sx];
                }
            }
            data[y * width + x] = acc / 9.0;
        }
    }
}
