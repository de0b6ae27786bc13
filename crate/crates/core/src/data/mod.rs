//! Dataset ingestion: landmark files, PGM images, dense masks, the JSON
//! manifest, and split assignment. Landmark files hold one `x y` pair per
//! line in contour order (right lung 44, left lung 50, heart 26), pixel
//! units, matching the structure of the public JSRT annotations so real
//! data can be dropped in unchanged.

pub mod augment;
pub mod pgm;
pub mod phantom;

use crate::error::{Error, Result};
use crate::graph::Topology;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "image: {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }
}

/// Dense segmentation labels: 0 background, 1 lungs, 2 heart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LUNGS: u8 = 1;
pub const LABEL_HEART: u8 = 2;

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid(format!(
                "mask: {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l > LABEL_HEART) {
            return Err(Error::invalid(format!(
                "mask: unexpected label value {l} (expected 0, 1 or 2)"
            )));
        }
        Ok(Mask {
            width,
            height,
            labels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "split must be train|val|test, got {other:?}"
            ))),
        }
    }
}

/// One dataset element: image, ground-truth landmarks and metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// Flat [M, 2] (x, y) pixel coordinates in contour order.
    pub landmarks: Vec<f64>,
    pub mask: Option<Mask>,
    pub spacing_mm: f64,
    pub split: Split,
}

impl Sample {
    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len() / 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub landmarks: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub spacing_mm: f64,
    pub split: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// (train, val, test) sample counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for s in &self.samples {
            match s.split {
                Split::Train => counts.0 += 1,
                Split::Val => counts.1 += 1,
                Split::Test => counts.2 += 1,
            }
        }
        counts
    }
}

/// 70/10/20 split assignment in manifest order: train takes ceil(0.7 n),
/// val floor(0.1 n), test the remainder (247 -> 173/24/50).
pub fn assign_splits(n: usize) -> Vec<Split> {
    let train = (7 * n + 9) / 10;
    let val = n / 10;
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        splits.push(if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
    splits
}

/// Load and fully validate a JSON manifest. Relative paths in entries are
/// resolved against the manifest's directory. Every sample's landmark count
/// must match the topology and all points must lie within the image frame.
pub fn load_manifest(path: &Path, topology: &Topology) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let expected = topology.total_nodes();

    let mut samples = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let context = |what: &str| format!("manifest entry {idx} ({}): {what}", entry.image);
        let split: Split = entry
            .split
            .parse()
            .map_err(|e| Error::Load(context(&format!("{e}"))))?;
        if !(entry.spacing_mm > 0.0) {
            return Err(Error::Load(context(&format!(
                "spacing_mm must be positive, got {}",
                entry.spacing_mm
            ))));
        }
        let img_pgm = pgm::read_pgm(&resolve(base, &entry.image))?;
        let image = Image::new(img_pgm.width, img_pgm.height, img_pgm.to_unit_interval())?;
        let landmarks = read_landmarks(&resolve(base, &entry.landmarks))?;
        if landmarks.len() / 2 != expected {
            return Err(Error::Load(context(&format!(
                "landmark file has {} rows, expected {expected}",
                landmarks.len() / 2
            ))));
        }
        for (i, p) in landmarks.chunks_exact(2).enumerate() {
            if !(p[0].is_finite() && p[1].is_finite())
                || p[0] < 0.0
                || p[0] > image.width as f64
                || p[1] < 0.0
                || p[1] > image.height as f64
            {
                return Err(Error::Load(context(&format!(
                    "landmark {i} ({}, {}) outside image bounds {}x{}",
                    p[0], p[1], image.width, image.height
                ))));
            }
        }
        let mask = match &entry.mask {
            None => None,
            Some(m) => {
                let mask_pgm = pgm::read_pgm(&resolve(base, m))?;
                if (mask_pgm.width, mask_pgm.height) != (image.width, image.height) {
                    return Err(Error::Load(context(&format!(
                        "mask is {}x{} but image is {}x{}",
                        mask_pgm.width, mask_pgm.height, image.width, image.height
                    ))));
                }
                let labels = mask_pgm.pixels.iter().map(|&p| p as u8).collect();
                Some(
                    Mask::new(mask_pgm.width, mask_pgm.height, labels)
                        .map_err(|e| Error::Load(context(&e.to_string())))?,
                )
            }
        };
        let id = Path::new(&entry.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("sample_{idx}"));
        samples.push(Sample {
            id,
            image,
            landmarks,
            mask,
            spacing_mm: entry.spacing_mm,
            split,
        });
    }
    Ok(Dataset { samples })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Parse a landmark file: one `x y` pair per line.
pub fn read_landmarks(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::Load(format!("{}: malformed row at line {}", path.display(), ln + 1))
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Load(format!(
                "{}: extra fields at line {}",
                path.display(),
                ln + 1
            )));
        }
        points.push(x);
        points.push(y);
    }
    Ok(points)
}

pub fn write_landmarks(path: &Path, points: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(points.len() * 12);
    for p in points.chunks_exact(2) {
        out.push_str(&format!("{} {}\n", p[0], p[1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pixel coordinates -> [0,1] features (divide by the square image size).
pub fn normalize_landmarks(points: &[f64], image_size: usize) -> Vec<f64> {
    let s = image_size as f64;
    points.iter().map(|p| p / s).collect()
}

pub fn denormalize_landmarks(points: &[f64], image_size: usize) -> Vec<f64> {
    let s = image_size as f64;
    points.iter().map(|p| p * s).collect()
}

/// Graph view of one sample: normalized node features plus the shared
/// adjacency. The adjacency depends only on the topology, never on the
/// sample, which is what makes the spectral filters shareable.
pub fn build_graph_from_landmarks(
    points: &[f64],
    image_size: usize,
    topology: &Topology,
) -> Result<Vec<f64>> {
    if points.len() != topology.total_nodes() * 2 {
        return Err(Error::invalid(format!(
            "landmarks: {} points do not match topology ({} nodes)",
            points.len() / 2,
            topology.total_nodes()
        )));
    }
    let s = image_size as f64;
    for (i, p) in points.chunks_exact(2).enumerate() {
        if p[0] < 0.0 || p[0] > s || p[1] < 0.0 || p[1] > s {
            return Err(Error::invalid(format!(
                "landmark {i} ({}, {}) outside [0, {image_size}]^2",
                p[0], p[1]
            )));
        }
    }
    Ok(normalize_landmarks(points, image_size))
}

/// Use a dense mask as the model input: labels {0,1,2} scaled to [0,1].
pub fn mask_to_input(mask: &Mask) -> Image {
    Image {
        width: mask.width,
        height: mask.height,
        data: mask.labels.iter().map(|&l| l as f64 / 2.0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hgnet_data_{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn split_rule_examples() {
        let s = assign_splits(247);
        let train = s.iter().filter(|x| **x == Split::Train).count();
        let val = s.iter().filter(|x| **x == Split::Val).count();
        let test = s.iter().filter(|x| **x == Split::Test).count();
        assert_eq!((train, val, test), (173, 24, 50));

        let s = assign_splits(10);
        let train = s.iter().filter(|x| **x == Split::Train).count();
        let val = s.iter().filter(|x| **x == Split::Val).count();
        let test = s.iter().filter(|x| **x == Split::Test).count();
        assert_eq!((train, val, test), (7, 1, 2));

        assert!(assign_splits(0).is_empty());
    }

    #[test]
    fn landmark_file_roundtrip() {
        let dir = tmp_dir("lmk");
        let path = dir.join("sample.txt");
        let points = vec![1.5, 2.25, 100.0, 0.0, 3.000000001, 64.125];
        write_landmarks(&path, &points).unwrap();
        let back = read_landmarks(&path).unwrap();
        assert_eq!(back, points);
    }

    #[test]
    fn malformed_landmark_row_is_cited() {
        let dir = tmp_dir("lmk_bad");
        let path = dir.join("bad.txt");
        std::fs::write(&path, "1 2\n3 x\n").unwrap();
        let err = read_landmarks(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn normalization_roundtrip() {
        let points = vec![0.0, 12.75, 127.3, 64.0001, 1.0, 126.0];
        let norm = normalize_landmarks(&points, 128);
        assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize_landmarks(&norm, 128);
        for (a, b) in points.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_features_reject_out_of_bounds() {
        let topo = Topology::new(vec![3]).unwrap();
        let ok = build_graph_from_landmarks(&[0.0, 0.0, 5.0, 5.0, 9.0, 2.0], 10, &topo);
        assert!(ok.is_ok());
        let bad = build_graph_from_landmarks(&[0.0, 0.0, 5.0, 11.0, 9.0, 2.0], 10, &topo);
        assert!(matches!(bad, Err(Error::InvalidArgument(_))));
        let short = build_graph_from_landmarks(&[0.0, 0.0], 10, &topo);
        assert!(short.is_err());
    }

    #[test]
    fn adjacency_is_sample_independent() {
        // Two different landmark sets share one adjacency object by
        // construction; node features differ.
        let topo = Topology::chest();
        let a1 = topo.adjacency();
        let a2 = topo.adjacency();
        assert_eq!(a1, a2);
    }

    #[test]
    fn mask_to_input_scaling() {
        let mask = Mask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let img = mask_to_input(&mask);
        assert_eq!(img.data, vec![0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn mask_rejects_unexpected_labels() {
        assert!(Mask::new(1, 2, vec![0, 3]).is_err());
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tmp_dir("manifest_empty");
        let path = dir.join("manifest.json");
        std::fs::write(&path, "[]").unwrap();
        let ds = load_manifest(&path, &Topology::chest()).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.split_counts(), (0, 0, 0));
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tmp_dir("manifest_rt");
        let topo = Topology::new(vec![3]).unwrap();
        // 4x4 image, 3 landmarks.
        let img = pgm::Pgm::new(4, 4, 255, vec![128; 16]).unwrap();
        pgm::write_pgm(&dir.join("s0.pgm"), &img).unwrap();
        write_landmarks(&dir.join("s0.txt"), &[1.0, 1.0, 2.0, 1.0, 2.0, 3.0]).unwrap();
        let manifest = serde_json::to_string(&vec![ManifestEntry {
            image: "s0.pgm".into(),
            landmarks: "s0.txt".into(),
            mask: None,
            spacing_mm: 0.35,
            split: "train".into(),
        }])
        .unwrap();
        std::fs::write(dir.join("manifest.json"), manifest).unwrap();
        let ds = load_manifest(&dir.join("manifest.json"), &topo).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].id, "s0");
        assert_eq!(ds.samples[0].split, Split::Train);
        assert_eq!(ds.samples[0].image.data[0], 128.0 / 255.0);
    }

    #[test]
    fn manifest_wrong_landmark_count_cites_entry() {
        let dir = tmp_dir("manifest_badcount");
        let topo = Topology::new(vec![3]).unwrap();
        let img = pgm::Pgm::new(4, 4, 255, vec![0; 16]).unwrap();
        pgm::write_pgm(&dir.join("s0.pgm"), &img).unwrap();
        write_landmarks(&dir.join("s0.txt"), &[1.0, 1.0, 2.0, 1.0]).unwrap();
        std::fs::write(
            dir.join("manifest.json"),
            r#"[{"image":"s0.pgm","landmarks":"s0.txt","spacing_mm":0.35,"split":"train"}]"#,
        )
        .unwrap();
        let err = load_manifest(&dir.join("manifest.json"), &topo).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("entry 0") && msg.contains("2 rows"), "{msg}");
    }

    #[test]
    fn manifest_missing_file_is_load_error() {
        let dir = tmp_dir("manifest_missing");
        std::fs::write(
            dir.join("manifest.json"),
            r#"[{"image":"nope.pgm","landmarks":"nope.txt","spacing_mm":1.0,"split":"test"}]"#,
        )
        .unwrap();
        let err = load_manifest(&dir.join("manifest.json"), &Topology::chest()).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        assert!(err.to_string().contains("nope.pgm"), "{err}");
    }
}
