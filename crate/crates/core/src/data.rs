//! Dataset ingestion (IDX image files), synthetic Gaussian class data, and
//! deterministic mini-batch iteration.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Inputs in [0,1]^d with integer class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// First `k` samples of a fixed shuffled order; the reproducible subset
    /// used for metric averaging.
    pub fn metric_subset(&self, k: usize, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        order.truncate(k.min(self.len()));
        self.select(&order)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs: Tensor::matrix(idx.len(), d, data).unwrap(),
            labels,
            name: self.name.clone(),
            split: self.split,
            class_count: self.class_count,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Mini-batches with a permutation determined by (shuffle_seed, epoch);
    /// the final short batch is emitted.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<(Tensor, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
            .chunks(batch_size)
            .map(|chunk| {
                let sub = self.select(chunk);
                (sub.inputs, sub.labels)
            })
            .collect()
    }

    /// Synthetic datasets export to CSV with header x0..x{d-1},label.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for j in 0..d {
                out.push_str(&format!("{},", self.inputs.data()[i * d + j]));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }

    /// Re-serializes the dataset as IDX (images, labels) byte payloads.
    /// Parsing is lossless for byte-valued pixels, so this reproduces the
    /// original files.
    pub fn to_idx_bytes(&self, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let n = self.len();
        let mut images = vec![0u8; 16 + n * rows * cols];
        BigEndian::write_u32(&mut images[0..4], IDX_IMAGE_MAGIC);
        BigEndian::write_u32(&mut images[4..8], n as u32);
        BigEndian::write_u32(&mut images[8..12], rows as u32);
        BigEndian::write_u32(&mut images[12..16], cols as u32);
        for (i, v) in self.inputs.data().iter().enumerate() {
            images[16 + i] = (v * 255.0).round() as u8;
        }
        let mut labels = vec![0u8; 8 + n];
        BigEndian::write_u32(&mut labels[0..4], IDX_LABEL_MAGIC);
        BigEndian::write_u32(&mut labels[4..8], n as u32);
        for (i, &l) in self.labels.iter().enumerate() {
            labels[8 + i] = l as u8;
        }
        (images, labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses big-endian IDX image/label file pairs; pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let check_magic = |buf: &[u8], path: &Path, expected: u32| -> Result<u32, DataError> {
        if buf.len() < 4 {
            return Err(DataError::Truncated {
                path: path.display().to_string(),
                expected: 4,
                got: buf.len(),
            });
        }
        let found = BigEndian::read_u32(&buf[0..4]);
        if found != expected {
            return Err(DataError::BadMagic {
                path: path.display().to_string(),
                found,
                expected,
            });
        }
        Ok(found)
    };

    check_magic(&img, images_path, IDX_IMAGE_MAGIC)?;
    check_magic(&lab, labels_path, IDX_LABEL_MAGIC)?;

    if img.len() < 16 {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            expected: 16,
            got: img.len(),
        });
    }
    let n = BigEndian::read_u32(&img[4..8]) as usize;
    let rows = BigEndian::read_u32(&img[8..12]) as usize;
    let cols = BigEndian::read_u32(&img[12..16]) as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            expected,
            got: img.len(),
        });
    }

    if lab.len() < 8 {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            expected: 8,
            got: lab.len(),
        });
    }
    let n_lab = BigEndian::read_u32(&lab[4..8]) as usize;
    if lab.len() != 8 + n_lab {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            expected: 8 + n_lab,
            got: lab.len(),
        });
    }
    if n != n_lab {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_lab,
        });
    }

    let d = rows * cols;
    let data: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        inputs: Tensor::matrix(n, d, data).unwrap(),
        labels,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        split: Split::Train,
        class_count,
    })
}

/// Class-conditional Gaussians with means `separation` apart, clipped to
/// [0,1]; deterministic per seed.
pub fn synth_gaussians(
    d: usize,
    classes: usize,
    n: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Dataset {
    assert!(d >= 1 && classes >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class geometry depends only on (d, classes): splits drawn with
    // different seeds share the same means and differ only in noise.
    let mut mean_rng =
        ChaCha8Rng::seed_from_u64(0x4745_4F4D ^ (d as u64) ^ ((classes as u64) << 32));
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..d).map(|_| mean_rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mean: Vec<f64> = dir
            .iter()
            .map(|v| 0.5 + 0.5 * separation * v / norm)
            .collect();
        means.push(mean);
    }
    let normal = Normal::new(0.0, noise).unwrap();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d {
            let v: f64 = means[c][j] + normal.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset {
        inputs: Tensor::matrix(n, d, data).unwrap(),
        labels,
        name: format!("gaussians-d{d}-c{classes}"),
        split: Split::Train,
        class_count: classes,
    }
}

/// Writes a dataset out as an IDX image/label file pair.
pub fn write_idx(dataset: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> std::io::Result<()> {
    let (img, lab) = dataset.to_idx_bytes(rows, cols);
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}
