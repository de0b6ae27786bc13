//! Training-time augmentation: gamma correction, rotation about the image
//! center, per-axis scaling, and a random crop/pad shift. The geometric part
//! is one composed affine map applied to both the image (by inverse warp
//! with bilinear resampling) and the landmarks (forward).

use super::{Image, Sample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GAMMA_RANGE: (f64, f64) = (0.60, 1.40);
pub const ROTATION_RANGE_DEG: (f64, f64) = (-3.0, 3.0);
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Crop/pad shift range as a fraction of the image side.
pub const OFFSET_FRAC: f64 = 0.05;
pub const MAX_DRAW_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub gamma: f64,
    pub rotation_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            gamma: 1.0,
            rotation_deg: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    pub fn draw(rng: &mut ChaCha8Rng, image_size: usize) -> Self {
        let off = OFFSET_FRAC * image_size as f64;
        AugmentParams {
            gamma: rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
            rotation_deg: rng.random_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1),
            scale_x: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            scale_y: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            offset_x: rng.random_range(-off..=off),
            offset_y: rng.random_range(-off..=off),
        }
    }

    /// Forward affine map on landmark coordinates: rotate about the image
    /// center, scale about the same center, then translate by the crop/pad
    /// offset.
    pub fn affine(&self, width: usize, height: usize) -> Affine2 {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        Affine2::translate(self.offset_x, self.offset_y)
            .compose(&Affine2::translate(cx, cy))
            .compose(&Affine2::scale(self.scale_x, self.scale_y))
            .compose(&Affine2::rotate(self.rotation_deg.to_radians()))
            .compose(&Affine2::translate(-cx, -cy))
    }
}

/// Row-major 2x3 affine: p' = (a x + b y + tx, c x + d y + ty).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 { a: 1.0, b: 0.0, tx: 0.0, c: 0.0, d: 1.0, ty: 0.0 }
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine2 { a: 1.0, b: 0.0, tx, c: 0.0, d: 1.0, ty }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine2 { a: sx, b: 0.0, tx: 0.0, c: 0.0, d: sy, ty: 0.0 }
    }

    pub fn rotate(rad: f64) -> Self {
        let (s, c) = rad.sin_cos();
        Affine2 { a: c, b: -s, tx: 0.0, c: s, d: c, ty: 0.0 }
    }

    /// self after other: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        Affine2 {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Affine2 {
        let det = self.a * self.d - self.b * self.c;
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Affine2 {
            a: ia,
            b: ib,
            tx: -(ia * self.tx + ib * self.ty),
            c: ic,
            d: id,
            ty: -(ic * self.tx + id * self.ty),
        }
    }
}

/// Bilinear sample of an image at continuous coordinates; pixel (i, j) is
/// centered at (j + 0.5, i + 0.5). Points outside the frame read 0.
fn sample_bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor() as isize;
    let y0 = gy.floor() as isize;
    let wx = gx - x0 as f64;
    let wy = gy - y0 as f64;
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= img.width as isize || yi >= img.height as isize {
            0.0
        } else {
            img.data[yi as usize * img.width + xi as usize]
        }
    };
    (1.0 - wy) * ((1.0 - wx) * at(x0, y0) + wx * at(x0 + 1, y0))
        + wy * ((1.0 - wx) * at(x0, y0 + 1) + wx * at(x0 + 1, y0 + 1))
}

/// Apply fixed augmentation parameters. The output image has side
/// `out_size` (crop or zero-pad as the affine dictates); landmarks get the
/// same forward map.
pub fn augment(sample: &Sample, params: &AugmentParams, out_size: usize) -> Sample {
    let src = &sample.image;
    let graded = if params.gamma == 1.0 {
        src.clone()
    } else {
        Image {
            width: src.width,
            height: src.height,
            data: src.data.iter().map(|v| v.powf(params.gamma)).collect(),
        }
    };
    let forward = params.affine(src.width, src.height);
    let inverse = forward.inverse();
    let mut out = Image::zeros(out_size, out_size);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let (sx, sy) = inverse.apply(ox as f64 + 0.5, oy as f64 + 0.5);
            out.data[oy * out_size + ox] = sample_bilinear(&graded, sx, sy);
        }
    }
    let mut landmarks = Vec::with_capacity(sample.landmarks.len());
    for p in sample.landmarks.chunks_exact(2) {
        let (x, y) = forward.apply(p[0], p[1]);
        landmarks.push(x);
        landmarks.push(y);
    }
    Sample {
        id: sample.id.clone(),
        image: out,
        landmarks,
        mask: None,
        spacing_mm: sample.spacing_mm,
        split: sample.split,
    }
}

fn landmarks_strictly_inside(params: &AugmentParams, sample: &Sample, out_size: usize) -> bool {
    let forward = params.affine(sample.image.width, sample.image.height);
    let s = out_size as f64;
    sample.landmarks.chunks_exact(2).all(|p| {
        let (x, y) = forward.apply(p[0], p[1]);
        x > 0.0 && x < s && y > 0.0 && y < s
    })
}

/// Draw augmentation parameters, rejecting draws that would push any
/// landmark out of frame; after `max_attempts` rejections fall back to the
/// identity transform.
pub fn draw_accepted_params(
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    out_size: usize,
    max_attempts: usize,
) -> AugmentParams {
    for _ in 0..max_attempts {
        let params = AugmentParams::draw(rng, out_size);
        if landmarks_strictly_inside(&params, sample, out_size) {
            return params;
        }
    }
    AugmentParams::identity()
}

pub fn augment_random(sample: &Sample, rng: &mut ChaCha8Rng, out_size: usize) -> Sample {
    let params = draw_accepted_params(sample, rng, out_size, MAX_DRAW_ATTEMPTS);
    augment(sample, &params, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::SeedableRng;

    fn test_sample(size: usize) -> Sample {
        let mut data = vec![0.0; size * size];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 31 % 97) as f64) / 97.0;
        }
        let c = size as f64 / 2.0;
        // A small ring of landmarks around the center plus the exact center.
        let mut landmarks = vec![c, c];
        for k in 0..7 {
            let th = k as f64 / 7.0 * std::f64::consts::TAU;
            landmarks.push(c + 0.25 * size as f64 * th.cos());
            landmarks.push(c + 0.25 * size as f64 * th.sin());
        }
        Sample {
            id: "t".into(),
            image: Image::new(size, size, data).unwrap(),
            landmarks,
            mask: None,
            spacing_mm: 1.0,
            split: Split::Train,
        }
    }

    #[test]
    fn identity_params_are_bitwise_identity() {
        let s = test_sample(16);
        let out = augment(&s, &AugmentParams::identity(), 16);
        assert_eq!(out.image.data, s.image.data);
        assert_eq!(out.landmarks, s.landmarks);
    }

    #[test]
    fn rotation_fixes_the_center_landmark() {
        let s = test_sample(32);
        let params = AugmentParams {
            rotation_deg: 3.0,
            ..AugmentParams::identity()
        };
        let out = augment(&s, &params, 32);
        // Landmark 0 sits exactly at the rotation center.
        assert!((out.landmarks[0] - s.landmarks[0]).abs() < 1e-9);
        assert!((out.landmarks[1] - s.landmarks[1]).abs() < 1e-9);
        // Others moved.
        assert!((out.landmarks[2] - s.landmarks[2]).abs() > 1e-3);
    }

    #[test]
    fn landmarks_match_brute_force_matrix_composition() {
        let s = test_sample(24);
        let params = AugmentParams {
            gamma: 0.8,
            rotation_deg: -2.2,
            scale_x: 1.07,
            scale_y: 0.93,
            offset_x: 1.25,
            offset_y: -0.75,
        };
        let out = augment(&s, &params, 24);

        // Independent 3x3 composition: T_off * T_c * S * R * T_{-c}.
        let mat_mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut r = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        r[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            r
        };
        let c = 12.0;
        let th = (-2.2f64).to_radians();
        let t_off = [[1.0, 0.0, 1.25], [0.0, 1.0, -0.75], [0.0, 0.0, 1.0]];
        let t_c = [[1.0, 0.0, c], [0.0, 1.0, c], [0.0, 0.0, 1.0]];
        let sc = [[1.07, 0.0, 0.0], [0.0, 0.93, 0.0], [0.0, 0.0, 1.0]];
        let rot = [
            [th.cos(), -th.sin(), 0.0],
            [th.sin(), th.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let t_nc = [[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]];
        let m = mat_mul(mat_mul(mat_mul(mat_mul(t_off, t_c), sc), rot), t_nc);

        for (i, p) in s.landmarks.chunks_exact(2).enumerate() {
            let ex = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
            let ey = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
            assert!((out.landmarks[2 * i] - ex).abs() < 1e-9);
            assert!((out.landmarks[2 * i + 1] - ey).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_only_touches_intensities() {
        let s = test_sample(8);
        let params = AugmentParams {
            gamma: 0.6,
            ..AugmentParams::identity()
        };
        let out = augment(&s, &params, 8);
        assert_eq!(out.landmarks, s.landmarks);
        for (o, i) in out.image.data.iter().zip(&s.image.data) {
            assert!((o - i.powf(0.6)).abs() < 1e-12);
        }
    }

    #[test]
    fn accepted_draws_keep_landmarks_strictly_inside() {
        let s = test_sample(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let out = augment_random(&s, &mut rng, 64);
            for p in out.landmarks.chunks_exact(2) {
                assert!(p[0] > 0.0 && p[0] < 64.0 && p[1] > 0.0 && p[1] < 64.0);
            }
        }
    }

    #[test]
    fn exhausted_attempts_fall_back_to_identity() {
        let s = test_sample(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = draw_accepted_params(&s, &mut rng, 16, 0);
        assert_eq!(params, AugmentParams::identity());
    }

    #[test]
    fn draws_are_deterministic_per_seed() {
        let a = AugmentParams::draw(&mut ChaCha8Rng::seed_from_u64(42), 128);
        let b = AugmentParams::draw(&mut ChaCha8Rng::seed_from_u64(42), 128);
        assert_eq!(a, b);
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let params = AugmentParams {
            gamma: 1.0,
            rotation_deg: 2.0,
            scale_x: 1.05,
            scale_y: 0.95,
            offset_x: 3.0,
            offset_y: -2.0,
        };
        let f = params.affine(100, 100);
        let inv = f.inverse();
        for (x, y) in [(0.0, 0.0), (31.7, 88.1), (99.5, 0.25)] {
            let (fx, fy) = f.apply(x, y);
            let (bx, by) = inv.apply(fx, fy);
            assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_shifts_image_content() {
        // Pure +2 px x-offset: interior output pixel (x, y) reads source
        // pixel (x-2, y) exactly (bilinear weights collapse to one corner).
        let s = test_sample(16);
        let params = AugmentParams {
            offset_x: 2.0,
            ..AugmentParams::identity()
        };
        let out = augment(&s, &params, 16);
        for y in 0..16 {
            for x in 2..16 {
                assert_eq!(out.image.data[y * 16 + x], s.image.data[y * 16 + x - 2]);
            }
            // Newly exposed border is zero-filled.
            assert_eq!(out.image.data[y * 16], 0.0);
        }
    }
}
