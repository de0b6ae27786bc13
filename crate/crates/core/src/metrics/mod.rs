//! Evaluation metrics: Dice overlap, Hausdorff distance, landmark MSE,
//! cardiothoracic ratio, occlusion robustness sweeps, and their CSV reports.

pub mod raster;

pub use raster::{fill_polygon, point_in_polygon, rasterize};

use crate::data::{Image, Mask, Sample, LABEL_HEART, LABEL_LUNGS};
use crate::error::{Error, Result};
use crate::graph::Topology;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::path::Path;

/// Organ grouping used by the reports: both lungs are one structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Organ {
    Lungs,
    Heart,
}

impl Organ {
    pub fn label(self) -> u8 {
        match self {
            Organ::Lungs => LABEL_LUNGS,
            Organ::Heart => LABEL_HEART,
        }
    }

    /// Contiguous landmark index range of this organ in chest contour order.
    pub fn point_range(self, topology: &Topology) -> std::ops::Range<usize> {
        let offsets = topology.organ_offsets();
        let organs = topology.organ_counts.len();
        match self {
            Organ::Lungs => 0..offsets[organs - 1],
            Organ::Heart => offsets[organs - 1]..offsets[organs],
        }
    }
}

/// 2|A∩B| / (|A|+|B|) over the pixels carrying this organ's label;
/// 1.0 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask, organ: Organ) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid(format!(
            "dice: mask shapes {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let label = organ.label();
    let mut inter = 0usize;
    let mut total = 0usize;
    for (pa, pb) in a.labels.iter().zip(&b.labels) {
        let ia = *pa == label;
        let ib = *pb == label;
        inter += (ia && ib) as usize;
        total += ia as usize + ib as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric Hausdorff distance between two point sets (flat [N, 2], pixel
/// units), scaled to millimeters.
pub fn hausdorff(a: &[f64], b: &[f64], spacing_mm: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "hausdorff: empty point set".into(),
        ));
    }
    Ok(directed_sq(a, b).max(directed_sq(b, a)).sqrt() * spacing_mm)
}

fn directed_sq(from: &[f64], to: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for p in from.chunks_exact(2) {
        let mut best = f64::INFINITY;
        for q in to.chunks_exact(2) {
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
            if d < best {
                best = d;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Pixel centers of mask pixels carrying the organ label that touch a
/// differently-labeled pixel or the frame edge (4-connectivity).
pub fn boundary_points(mask: &Mask, organ: Organ) -> Vec<f64> {
    let label = organ.label();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && mask.labels[(y * w + x) as usize] == label
    };
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(x, y)
                && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1))
            {
                points.push(x as f64 + 0.5);
                points.push(y as f64 + 0.5);
            }
        }
    }
    points
}

/// Mean over all 2M coordinates of the squared pixel error.
pub fn landmark_mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "landmark_mse: {} vs {} coordinates",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Black out a random in-bounds square covering `box_frac` of the image
/// side. Returns the modified image and the box as (x0, y0, side).
pub fn occlude(
    image: &Image,
    box_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, (usize, usize, usize))> {
    if !(0.0..=1.0).contains(&box_frac) {
        return Err(Error::invalid(format!(
            "occlude: box_frac {box_frac} outside [0, 1]"
        )));
    }
    let side = (box_frac * image.width.min(image.height) as f64).round() as usize;
    if side == 0 {
        return Ok((image.clone(), (0, 0, 0)));
    }
    let x0 = rng.random_range(0..=image.width - side);
    let y0 = rng.random_range(0..=image.height - side);
    let mut out = image.clone();
    for y in y0..y0 + side {
        out.data[y * image.width + x0..y * image.width + x0 + side].fill(0.0);
    }
    Ok((out, (x0, y0, side)))
}

/// Cardiothoracic ratio: maximal horizontal heart diameter over maximal
/// horizontal thoracic (lung-to-lung) diameter.
pub fn compute_ctr(landmarks: &[f64], topology: &Topology) -> Result<f64> {
    if landmarks.len() != 2 * topology.total_nodes() {
        return Err(Error::invalid(format!(
            "compute_ctr: {} points do not match topology",
            landmarks.len() / 2
        )));
    }
    let width_of = |range: std::ops::Range<usize>| -> f64 {
        let xs = landmarks[2 * range.start..2 * range.end]
            .chunks_exact(2)
            .map(|p| p[0]);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for x in xs {
            min = min.min(x);
            max = max.max(x);
        }
        max - min
    };
    let thorax = width_of(Organ::Lungs.point_range(topology));
    let heart = width_of(Organ::Heart.point_range(topology));
    if thorax <= 0.0 {
        return Err(Error::UndefinedMetric("compute_ctr: zero thorax width".into()));
    }
    Ok(heart / thorax)
}

pub const CTR_NORMAL_RANGE: (f64, f64) = (0.42, 0.50);

pub fn ctr_is_normal(ctr: f64) -> bool {
    (CTR_NORMAL_RANGE.0..=CTR_NORMAL_RANGE.1).contains(&ctr)
}

/// One evaluated sample in the report.
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub mse: f64,
    pub dice_lungs: f64,
    pub hd_lungs: f64,
    pub dice_heart: f64,
    pub hd_heart: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<SampleMetrics>,
}

impl MetricReport {
    fn aggregate(&self, name: &str, f: impl Fn(&[f64]) -> f64) -> SampleMetrics {
        let col = |get: fn(&SampleMetrics) -> f64| -> f64 {
            let values: Vec<f64> = self.rows.iter().map(get).collect();
            f(&values)
        };
        SampleMetrics {
            sample_id: name.to_string(),
            mse: col(|r| r.mse),
            dice_lungs: col(|r| r.dice_lungs),
            hd_lungs: col(|r| r.hd_lungs),
            dice_heart: col(|r| r.dice_heart),
            hd_heart: col(|r| r.hd_heart),
        }
    }

    pub fn mean(&self) -> SampleMetrics {
        self.aggregate("mean", mean)
    }

    pub fn std(&self) -> SampleMetrics {
        self.aggregate("std", std_dev)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,mse,dice_lungs,hd_lungs,dice_heart,hd_heart\n");
        let push = |out: &mut String, r: &SampleMetrics| {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_id, r.mse, r.dice_lungs, r.hd_lungs, r.dice_heart, r.hd_heart
            ));
        };
        for r in &self.rows {
            push(&mut out, r);
        }
        if !self.rows.is_empty() {
            push(&mut out, &self.mean());
            push(&mut out, &self.std());
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn organ_points(landmarks: &[f64], organ: Organ, topology: &Topology) -> Vec<f64> {
    let r = organ.point_range(topology);
    landmarks[2 * r.start..2 * r.end].to_vec()
}

/// Score one prediction against a sample's ground truth. Dice compares the
/// rasterized prediction with the sample's dense mask (or a rasterized
/// ground-truth contour when no mask ships with the sample). Hausdorff uses
/// contour points for the prediction and mask boundary pixels for dense
/// ground truth.
pub fn evaluate_sample(
    pred_landmarks: &[f64],
    sample: &Sample,
    topology: &Topology,
) -> Result<SampleMetrics> {
    let (w, h) = (sample.image.width, sample.image.height);
    let pred_mask = rasterize(pred_landmarks, topology, w, h);
    let gt_mask = match &sample.mask {
        Some(m) => m.clone(),
        None => rasterize(&sample.landmarks, topology, w, h),
    };
    let mut metrics = SampleMetrics {
        sample_id: sample.id.clone(),
        mse: landmark_mse(pred_landmarks, &sample.landmarks)?,
        dice_lungs: dice(&pred_mask, &gt_mask, Organ::Lungs)?,
        hd_lungs: 0.0,
        dice_heart: dice(&pred_mask, &gt_mask, Organ::Heart)?,
        hd_heart: 0.0,
    };
    for organ in [Organ::Lungs, Organ::Heart] {
        let pred_pts = organ_points(pred_landmarks, organ, topology);
        let gt_pts = match &sample.mask {
            Some(m) => boundary_points(m, organ),
            None => organ_points(&sample.landmarks, organ, topology),
        };
        let hd = hausdorff(&pred_pts, &gt_pts, sample.spacing_mm)?;
        match organ {
            Organ::Lungs => metrics.hd_lungs = hd,
            Organ::Heart => metrics.hd_heart = hd,
        }
    }
    Ok(metrics)
}

/// One row of the occlusion robustness sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub frac: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: f64,
    pub hd_std: f64,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("frac,dice_mean,dice_std,hd_mean,hd_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.frac, r.dice_mean, r.dice_std, r.hd_mean, r.hd_std
        ));
    }
    out
}

/// Evaluate `predict` on every sample under increasing occlusion. Boxes are
/// drawn from per-(fraction, sample) RNG streams derived from `seed`, so a
/// rerun with the same seed reproduces the sweep exactly. Per-sample Dice
/// and HD are the mean of the lungs and heart values.
pub fn occlusion_sweep(
    predict: &dyn Fn(&Image) -> Result<Vec<f64>>,
    samples: &[&Sample],
    topology: &Topology,
    fracs: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fracs.len());
    for (fi, &frac) in fracs.iter().enumerate() {
        let mut dices = Vec::with_capacity(samples.len());
        let mut hds = Vec::with_capacity(samples.len());
        for (si, sample) in samples.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (fi as u64) << 40 ^ (si as u64) << 16);
            let (occluded, _) = occlude(&sample.image, frac, &mut rng)?;
            let pred = predict(&occluded)?;
            let m = evaluate_sample(&pred, sample, topology)?;
            dices.push(0.5 * (m.dice_lungs + m.dice_heart));
            hds.push(0.5 * (m.hd_lungs + m.hd_heart));
        }
        rows.push(SweepRow {
            frac,
            dice_mean: mean(&dices),
            dice_std: std_dev(&dices),
            hd_mean: mean(&hds),
            hd_std: std_dev(&hds),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mask_from(bits: &[u8], w: usize, h: usize, label: u8) -> Mask {
        Mask::new(w, h, bits.iter().map(|b| b * label).collect()).unwrap()
    }

    #[test]
    fn dice_identical_disjoint_half() {
        let a = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0], 4, 2, 1);
        let b = mask_from(&[0, 0, 0, 0, 1, 1, 1, 1], 4, 2, 1);
        assert_eq!(dice(&a, &a, Organ::Lungs).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, Organ::Lungs).unwrap(), 0.0);

        // |A|=|B|=8, overlap 4 -> 0.5.
        let a = mask_from(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0], 4, 3, 1);
        let b = mask_from(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1], 4, 3, 1);
        assert_eq!(dice(&a, &b, Organ::Lungs).unwrap(), 0.5);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let a = Mask::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(dice(&a, &a, Organ::Heart).unwrap(), 1.0);
    }

    #[test]
    fn dice_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let w = rng.random_range(1..=32);
            let h = rng.random_range(1..=32);
            let a_bits: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..2u8)).collect();
            let b_bits: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..2u8)).collect();
            let a = mask_from(&a_bits, w, h, 2);
            let b = mask_from(&b_bits, w, h, 2);
            let got = dice(&a, &b, Organ::Heart).unwrap();
            let inter: usize = a_bits.iter().zip(&b_bits).filter(|(x, y)| **x == 1 && **y == 1).count();
            let na: usize = a_bits.iter().map(|v| *v as usize).sum();
            let nb: usize = b_bits.iter().map(|v| *v as usize).sum();
            let want = if na + nb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (na + nb) as f64
            };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn hausdorff_closed_forms() {
        assert_eq!(hausdorff(&[1.0, 2.0], &[1.0, 2.0], 0.35).unwrap(), 0.0);
        // {(0,0)} vs {(3,4)}: 5 px at 0.35 mm/px = 1.75 mm.
        let hd = hausdorff(&[0.0, 0.0], &[3.0, 4.0], 0.35).unwrap();
        assert!((hd - 1.75).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_empty_is_undefined() {
        assert!(matches!(
            hausdorff(&[], &[0.0, 0.0], 1.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn hausdorff_symmetric_and_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let na = rng.random_range(1..=12);
            let nb = rng.random_range(1..=12);
            let a: Vec<f64> = (0..2 * na).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f64> = (0..2 * nb).map(|_| rng.random_range(-10.0..10.0)).collect();
            let ab = hausdorff(&a, &b, 0.7).unwrap();
            let ba = hausdorff(&b, &a, 0.7).unwrap();
            assert!((ab - ba).abs() < 1e-12);

            // Independent exhaustive evaluation with sqrt-per-pair.
            let directed = |from: &[f64], to: &[f64]| -> f64 {
                from.chunks_exact(2)
                    .map(|p| {
                        to.chunks_exact(2)
                            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            };
            let want = directed(&a, &b).max(directed(&b, &a)) * 0.7;
            assert!((ab - want).abs() < 1e-9);
        }
    }

    #[test]
    fn landmark_mse_shift_example() {
        // +1 px x-shift on every point: x errors 1, y errors 0 -> mean 0.5.
        let gt: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let pred: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v })
            .collect();
        assert_eq!(landmark_mse(&pred, &gt).unwrap(), 0.5);
        assert_eq!(landmark_mse(&gt, &gt).unwrap(), 0.0);
        assert!(landmark_mse(&gt, &gt[..8]).is_err());
    }

    #[test]
    fn occlude_extremes() {
        let img = Image::new(8, 8, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (same, bx) = occlude(&img, 0.0, &mut rng).unwrap();
        assert_eq!(same.data, img.data);
        assert_eq!(bx, (0, 0, 0));
        let (zero, _) = occlude(&img, 1.0, &mut rng).unwrap();
        assert!(zero.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn occlude_changes_exactly_side_squared_pixels() {
        let img = Image::new(16, 16, vec![0.5; 256]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (out, (x0, y0, side)) = occlude(&img, 0.25, &mut rng).unwrap();
        assert_eq!(side, 4);
        let changed = out.data.iter().zip(&img.data).filter(|(a, b)| a != b).count();
        assert_eq!(changed, side * side);
        assert!(x0 + side <= 16 && y0 + side <= 16);
    }

    #[test]
    fn ctr_fixture_and_invariances() {
        // 3-organ topology with simple spans: lungs x in [100,900],
        // heart x in [350,650] -> CTR = 300/800 = 0.375.
        let topo = Topology::new(vec![4, 4, 4]).unwrap();
        let mut pts = vec![
            100.0, 10.0, 400.0, 10.0, 400.0, 90.0, 100.0, 90.0, // right lung
            600.0, 10.0, 900.0, 10.0, 900.0, 90.0, 600.0, 90.0, // left lung
            350.0, 40.0, 650.0, 40.0, 650.0, 80.0, 350.0, 80.0, // heart
        ];
        let ctr = compute_ctr(&pts, &topo).unwrap();
        assert!((ctr - 0.375).abs() < 1e-6);

        // Isotropic scaling leaves the ratio unchanged.
        for p in pts.iter_mut() {
            *p *= 3.7;
        }
        let scaled = compute_ctr(&pts, &topo).unwrap();
        assert!((scaled - ctr).abs() < 1e-12);
    }

    #[test]
    fn ctr_heart_congruent_to_thorax() {
        let topo = Topology::new(vec![3, 3, 3]).unwrap();
        let pts = vec![
            0.0, 0.0, 10.0, 0.0, 5.0, 5.0, // right lung
            0.0, 9.0, 10.0, 9.0, 5.0, 14.0, // left lung
            0.0, 4.0, 10.0, 4.0, 5.0, 8.0, // heart spans the full thorax
        ];
        assert_eq!(compute_ctr(&pts, &topo).unwrap(), 1.0);
    }

    #[test]
    fn ctr_zero_thorax_is_undefined() {
        let topo = Topology::new(vec![3, 3, 3]).unwrap();
        let pts = vec![
            5.0, 0.0, 5.0, 1.0, 5.0, 2.0,
            5.0, 3.0, 5.0, 4.0, 5.0, 5.0,
            2.0, 0.0, 8.0, 1.0, 5.0, 2.0,
        ];
        assert!(matches!(
            compute_ctr(&pts, &topo),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ctr_normal_range_flag() {
        assert!(ctr_is_normal(0.45));
        assert!(!ctr_is_normal(0.375));
        assert!(!ctr_is_normal(0.51));
    }

    #[test]
    fn boundary_points_of_a_block() {
        // 3x3 block of heart label inside a 5x5 mask: all 8 ring pixels plus
        // the center... center is interior (all 4 neighbours set), so 8.
        let mut labels = vec![0u8; 25];
        for y in 1..4 {
            for x in 1..4 {
                labels[y * 5 + x] = 2;
            }
        }
        let mask = Mask::new(5, 5, labels).unwrap();
        let pts = boundary_points(&mask, Organ::Heart);
        assert_eq!(pts.len() / 2, 8);
        assert!(!pts.chunks_exact(2).any(|p| p == [2.5, 2.5]));
    }

    #[test]
    fn report_csv_has_aggregate_rows() {
        let report = MetricReport {
            rows: vec![
                SampleMetrics {
                    sample_id: "a".into(),
                    mse: 1.0,
                    dice_lungs: 0.9,
                    hd_lungs: 2.0,
                    dice_heart: 0.8,
                    hd_heart: 3.0,
                },
                SampleMetrics {
                    sample_id: "b".into(),
                    mse: 3.0,
                    dice_lungs: 0.7,
                    hd_lungs: 4.0,
                    dice_heart: 0.6,
                    hd_heart: 5.0,
                },
            ],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_id,mse,dice_lungs,hd_lungs,dice_heart,hd_heart");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("mean,2,"));
        assert!(lines[4].starts_with("std,1,"));
    }

    #[test]
    fn sweep_csv_row_count() {
        let rows = vec![
            SweepRow { frac: 0.0, dice_mean: 1.0, dice_std: 0.0, hd_mean: 0.0, hd_std: 0.0 },
            SweepRow { frac: 0.5, dice_mean: 0.8, dice_std: 0.1, hd_mean: 2.0, hd_std: 0.5 },
        ];
        let csv = sweep_to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), "frac,dice_mean,dice_std,hd_mean,hd_std");
    }
}
