//! Dataset ingestion: IDX-format image/label files and synthetic
//! generators for controlled experiments.
//!
//! Features are kept in full precision and scaled to [0, 1]; all
//! quantization happens downstream in the network layers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated at byte {offset}, {needed} bytes required")]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("image file has {images} samples but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
}

/// An immutable supervised dataset: one flattened feature row per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f32], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// New dataset holding the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, num_classes: self.num_classes }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.to_owned(),
            offset: bytes.len(),
            needed: end,
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image/label file pair (the de-facto MNIST container).
///
/// Pixel bytes are scaled by 1/255 into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_owned(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.to_owned(),
            offset: img_bytes.len(),
            needed,
        });
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_owned(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let lbl_needed = 8 + lbl_count;
    if lbl_bytes.len() < lbl_needed {
        return Err(DataError::Truncated {
            path: labels_path.to_owned(),
            offset: lbl_bytes.len(),
            needed: lbl_needed,
        });
    }
    if count != lbl_count {
        return Err(DataError::CountMismatch { images: count, labels: lbl_count });
    }

    let features = Matrix::from_vec(
        count,
        dim,
        img_bytes[16..needed].iter().map(|&b| b as f32 / 255.0).collect(),
    );
    let num_classes = 10;
    let mut labels = Vec::with_capacity(count);
    for &b in &lbl_bytes[8..lbl_needed] {
        if b as usize >= num_classes {
            return Err(DataError::LabelOutOfRange { label: b, classes: num_classes });
        }
        labels.push(b as usize);
    }
    Ok(Dataset { features, labels, num_classes })
}

/// Which synthetic distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    GaussianBlobs,
    LinearlySeparable,
}

/// A synthetic dataset is a pure function of this spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    pub dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Blobs: per-coordinate standard deviation. Separable: minimum score
    /// gap between the best and second-best class.
    pub margin: f64,
}

impl SyntheticSpec {
    pub fn blobs(dim: usize, classes: usize, samples: usize, seed: u64) -> Self {
        Self { kind: GeneratorKind::GaussianBlobs, dim, classes, samples, seed, margin: 0.05 }
    }

    pub fn separable(dim: usize, classes: usize, samples: usize, seed: u64) -> Self {
        Self { kind: GeneratorKind::LinearlySeparable, dim, classes, samples, seed, margin: 0.1 }
    }
}

/// Generate a synthetic dataset. Deterministic for a fixed spec.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.dim > 0 && spec.classes > 0 && spec.samples > 0, "counts must be positive");
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let mut features = Matrix::zeros(spec.samples, spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    match spec.kind {
        GeneratorKind::GaussianBlobs => {
            // Class means in the middle of the unit cube, i.i.d. noise on
            // top, clamped back into [0, 1].
            let means: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| (0..spec.dim).map(|_| rng.gen_range(0.15..0.85)).collect())
                .collect();
            let noise = Normal::new(0.0, spec.margin).expect("finite std");
            for i in 0..spec.samples {
                let class = i % spec.classes;
                let row = features.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    let v = means[class][j] + noise.sample(&mut rng);
                    *slot = v.clamp(0.0, 1.0) as f32;
                }
                labels.push(class);
            }
        }
        GeneratorKind::LinearlySeparable => {
            // Fixed random linear scorer; labels are its argmax and any
            // sample whose top-two score gap is below the margin is
            // rejected, so the scorer itself separates the data.
            let w: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut accepted = 0;
            while accepted < spec.samples {
                let x: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(0.0..1.0)).collect();
                let scores: Vec<f64> = w
                    .iter()
                    .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                let runner_up = scores
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != best)
                    .map(|(_, &s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                if scores[best] - runner_up < spec.margin {
                    continue;
                }
                let row = features.row_mut(accepted);
                for (slot, v) in row.iter_mut().zip(&x) {
                    *slot = *v as f32;
                }
                labels.push(best);
                accepted += 1;
            }
        }
    }
    Dataset { features, labels, num_classes: spec.classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_pair(dir: &Path, count: u32, rows: u32, cols: u32) -> (PathBuf, PathBuf) {
        let dim = (rows * cols) as usize;
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&count.to_be_bytes());
        img.extend_from_slice(&rows.to_be_bytes());
        img.extend_from_slice(&cols.to_be_bytes());
        for i in 0..count as usize * dim {
            img.push((i % 256) as u8);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&count.to_be_bytes());
        for i in 0..count as usize {
            lbl.push((i % 10) as u8);
        }
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip() {
        let dir = std::env::temp_dir().join("lbasim-idx-ok");
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = write_idx_pair(&dir, 7, 4, 3);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.dim(), 12);
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4, 5, 6]);
        // Pixel 5 of sample 0 is byte 5 scaled.
        assert_eq!(ds.features.get(0, 5), 5.0 / 255.0);
    }

    #[test]
    fn idx_error_cases() {
        let dir = std::env::temp_dir().join("lbasim-idx-err");
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = write_idx_pair(&dir, 5, 2, 2);

        // Wrong magic.
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        let bad = dir.join("badmagic.idx");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_idx(&bad, &lp),
            Err(DataError::BadMagic { found: 0x0000_0899, .. })
        ));

        // Truncated pixel data.
        let bytes = fs::read(&ip).unwrap();
        let cut = dir.join("truncated.idx");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        match load_idx(&cut, &lp) {
            Err(DataError::Truncated { offset, needed, .. }) => {
                assert_eq!(needed, 16 + 5 * 4);
                assert_eq!(offset, 16 + 5 * 4 - 3);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        // Count mismatch.
        let (ip2, _) = write_idx_pair(&dir, 5, 2, 2);
        let (_, lp3) = {
            let d2 = dir.join("three");
            fs::create_dir_all(&d2).unwrap();
            write_idx_pair(&d2, 3, 2, 2)
        };
        assert!(matches!(
            load_idx(&ip2, &lp3),
            Err(DataError::CountMismatch { images: 5, labels: 3 })
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::blobs(6, 3, 120, 17);
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let other = generate(&SyntheticSpec::blobs(6, 3, 120, 18));
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn blobs_are_nearest_neighbor_consistent() {
        let spec = SyntheticSpec::blobs(8, 4, 400, 3);
        let ds = generate(&spec);
        let mut agree = 0;
        for i in 0..ds.len() {
            let (xi, yi) = ds.sample(i);
            let mut best = (f32::INFINITY, 0);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let (xj, yj) = ds.sample(j);
                let d: f32 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, yj);
                }
            }
            if best.1 == yi {
                agree += 1;
            }
        }
        let rate = agree as f64 / ds.len() as f64;
        assert!(rate >= 0.99, "1-NN self-consistency {rate}");
    }

    #[test]
    fn separable_data_is_separable_by_construction() {
        let spec = SyntheticSpec::separable(5, 3, 200, 11);
        let ds = generate(&spec);
        // Refit the construction: labels must be reproducible by SOME
        // linear scorer; here we verify a margin exists by checking that
        // same-class points are closer to their class mean score-wise.
        // Direct check: regenerate the scorer the generator used.
        let mut rng = stream_rng(11, Stream::Synth);
        let w: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for i in 0..ds.len() {
            let (x, y) = ds.sample(i);
            let scores: Vec<f64> = w
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, &b)| a * b as f64).sum())
                .collect();
            let best = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap();
            assert_eq!(best, y, "sample {i} not separated by the generating scorer");
        }
    }
}
