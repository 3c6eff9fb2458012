//! Datasets: MNIST IDX ingestion, synthetic Gaussian classes, IID sharding and
//! minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `len()` samples of `dim` features in `[0, 1]`-ish scale, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::Format("dataset must have at least one sample and feature".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Format(format!(
                "{} input values for {} samples of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the listed samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            input_dim: self.dim,
        }
    }

    /// Keeps the first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() && n > 0 {
            self.labels.truncate(n);
            self.inputs.truncate(n * self.dim);
        }
        self
    }

    /// Consecutive, fixed-size evaluation batches.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    /// Random holdout split: returns (train, test).
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} leaves an empty side of the split"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::chacha(seed));
        let (test, train) = idx.split_at(n_test);
        let pick = |ix: &[usize]| {
            let b = self.gather(ix);
            Dataset::new(b.inputs, b.labels, self.dim, self.num_classes)
        };
        Ok((pick(train)?, pick(test)?))
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file into `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let dim = rows * cols;
    let need = 16 + count * dim;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated IDX image file: {} bytes, header promises {need}",
            bytes.len()
        )));
    }
    Ok((count, dim, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Format(format!(
            "truncated IDX label file: {} bytes, header promises {}",
            bytes.len(),
            8 + count
        )));
    }
    Ok(&bytes[8..8 + count])
}

/// Builds a dataset from IDX bytes; pixels are scaled by 1/255.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        inputs,
        labels.iter().map(|&l| l as usize).collect(),
        dim,
        num_classes,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// Loads `train-*` and `t10k-*` MNIST files from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Serialises a dataset as an IDX image/label pair. Inputs are quantised to
/// bytes (`round(255 x)`), images are stored as `1 x dim` rows unless `dim`
/// is a perfect square.
pub fn to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.num_classes > 256 {
        return Err(Error::Format("IDX labels hold at most 256 classes".into()));
    }
    let side = (ds.dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == ds.dim { (side, side) } else { (1, ds.dim) };
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(ds.inputs.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// `classes` Gaussian blobs with identity covariance. The class means sit on
/// a regular simplex, so every pair of means is exactly `separation` apart.
pub fn synth_gaussian(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument("classes, per_class and dim must be positive".into()));
    }
    if classes > dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "{classes} equidistant means need dim >= {}",
            classes - 1
        )));
    }
    // Scaled standard basis vectors e_c * s / sqrt(2) are pairwise `s` apart.
    // For classes == dim + 1 the last mean is placed on the far side of the
    // centroid so the simplex stays regular.
    let scale = separation / std::f64::consts::SQRT_2;
    let mut means = vec![vec![0.0; dim]; classes];
    for (c, mean) in means.iter_mut().enumerate().take(classes.min(dim)) {
        mean[c] = scale;
    }
    if classes == dim + 1 {
        let d = dim as f64;
        let t = scale * (1.0 - (1.0 + d).sqrt()) / d;
        means[dim] = vec![t; dim];
    }
    let mut rng = rng::chacha(seed);
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        for m in &means[c] {
            let e: f64 = StandardNormal.sample(&mut rng);
            inputs.push(m + e);
        }
        labels.push(c);
    }
    Dataset::new(inputs, labels, dim, classes)
}

/// `num_clients` disjoint shards covering `[0, n)`; sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

pub fn partition_iid(ds: &Dataset, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if num_clients == 0 || num_clients > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {num_clients} clients",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::chacha(seed));
    let base = ds.len() / num_clients;
    let extra = ds.len() % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        shards.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(PartitionPlan { shards })
}

/// Positions `0..len` shuffled by `epoch_seed` and chunked; the last chunk may
/// be short.
pub fn batch_positions(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty shard".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::chacha(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of minibatches over `shard`.
pub fn batches(ds: &Dataset, shard: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    Ok(batch_positions(shard.len(), batch_size, epoch_seed)?
        .into_iter()
        .map(|pos| {
            let ix: Vec<usize> = pos.iter().map(|&p| shard[p]).collect();
            ds.gather(&ix)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn parses_hand_built_idx_pair() {
        let (images, labels) = tiny_idx();
        let ds = dataset_from_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.row(1), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!(ds.labels, vec![7, 3]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (mut images, labels) = tiny_idx();
        images[3] = 2;
        assert!(matches!(dataset_from_idx(&images, &labels), Err(Error::Format(_))));
        let (images, labels) = tiny_idx();
        assert!(dataset_from_idx(&images[..images.len() - 1], &labels).is_err());
        assert!(dataset_from_idx(&images, &labels[..9]).is_err());
        let mut short = labels.clone();
        short[7] = 1;
        assert!(dataset_from_idx(&images, &short[..9]).is_err());
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let (images, labels) = tiny_idx();
        let ds = dataset_from_idx(&images, &labels).unwrap();
        let (i2, l2) = to_idx(&ds).unwrap();
        assert_eq!(i2, images);
        assert_eq!(l2, labels);
    }

    #[test]
    fn synth_means_are_equidistant_and_deterministic() {
        let a = synth_gaussian(3, 5, 4, 2.0, 11).unwrap();
        assert_eq!(a, synth_gaussian(3, 5, 4, 2.0, 11).unwrap());
        assert_ne!(a, synth_gaussian(3, 5, 4, 2.0, 12).unwrap());
        assert_eq!(a.len(), 15);
        // Full simplex case.
        let d = synth_gaussian(3, 20_000, 2, 6.0, 1).unwrap();
        let mut means = vec![vec![0.0; 2]; 3];
        for i in 0..d.len() {
            for j in 0..2 {
                means[d.labels[i]][j] += d.row(i)[j] / 20_000.0;
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let dist = crate::vector::norm2(&crate::vector::sub(&means[a], &means[b]));
                assert!((dist - 6.0).abs() < 0.1, "{dist}");
            }
        }
    }

    #[test]
    fn partition_sizes_and_coverage() {
        let ds = synth_gaussian(2, 5, 2, 1.0, 0).unwrap();
        let p = partition_iid(&ds, 2, 3).unwrap();
        assert_eq!(p.shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        let p = partition_iid(&ds, 3, 3).unwrap();
        let mut sizes: Vec<usize> = p.shards.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let mut all: Vec<usize> = p.shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(partition_iid(&ds, 11, 0).is_err());
    }

    #[test]
    fn batching_shapes_and_permutation() {
        let sizes: Vec<usize> = batch_positions(130, 64, 5).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let ones = batch_positions(7, 1, 5).unwrap();
        assert_eq!(ones.len(), 7);
        let mut seen: Vec<usize> = batch_positions(130, 64, 9).unwrap().concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..130).collect::<Vec<_>>());
        assert!(batch_positions(0, 4, 0).is_err());

        let ds = synth_gaussian(2, 10, 3, 1.0, 0).unwrap();
        let shard = vec![1, 4, 9];
        let b = batches(&ds, &shard, 2, 0).unwrap();
        let mut labels_rows: Vec<Vec<f64>> = b.iter().flat_map(|b| (0..b.len()).map(|i| b.row(i).to_vec())).collect();
        labels_rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<Vec<f64>> = shard.iter().map(|&i| ds.row(i).to_vec()).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(labels_rows, expect);
    }
}
