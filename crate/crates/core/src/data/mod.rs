//! Labeled image sets: CIFAR-10 binary batches, a procedural three-class
//! generator, stratified splitting and on-disk persistence.

mod cifar;
mod store;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cifar::{cifar10_present, load_cifar10, parse_cifar_batch, Cifar10, CIFAR10_CLASSES, RECORD_LEN};
pub use store::{load_dataset, save_dataset, CLASSES_FILE, DATASET_FILE, INDEX_FILE};
pub use synthetic::{gen_synthetic, DEFAULT_COUNTS, SYNTHETIC_CLASSES};

/// Images stored contiguously as `N × C × H × W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::Contract("image dimensions must be positive".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Contract(format!(
                "{} pixel values for {} images of {channels}×{height}×{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Contract(format!(
                "label {l} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(LabeledDataset {
            channels,
            height,
            width,
            pixels,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image_data(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self.image_data(i).iter().map(|&v| T::of(v)).collect();
        Tensor::from_parts(vec![self.channels, self.height, self.width], data)
    }

    /// Stacks the selected images into an `B × C × H × W` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image_data(i).iter().map(|&v| T::of(v)));
        }
        Tensor::from_parts(vec![indices.len(), self.channels, self.height, self.width], data)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_data(i));
        }
        LabeledDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Validation count of a class: `fraction · count` rounded half up.
pub fn stratum_size(fraction: f64, count: usize) -> usize {
    (fraction * count as f64 + 0.5).floor() as usize
}

/// Per-class shuffled index lists, classes in label order.
fn shuffled_strata(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut strata = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        strata[l].push(i);
    }
    for s in &mut strata {
        s.shuffle(rng);
    }
    strata
}

/// Stratified train/validation split. Each class sends
/// `round_half_up(fraction · count)` samples to validation and the rest to
/// training. Both halves keep the original sample order.
pub fn split(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, val) = split_indices(ds, val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Index form of [`split`].
pub fn split_indices(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, stratum) in shuffled_strata(ds, &mut rng).into_iter().enumerate() {
        if stratum.is_empty() {
            continue;
        }
        let k = stratum_size(val_fraction, stratum.len());
        if k == 0 || k == stratum.len() {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} leaves class {class} ({} samples) empty in one split",
                stratum.len()
            )));
        }
        val.extend_from_slice(&stratum[..k]);
        train.extend_from_slice(&stratum[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Seeded class-stratified subsample of about `size` samples, each class
/// keeping its share rounded half up. Sample order is preserved.
pub fn stratified_subsample(ds: &LabeledDataset, size: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(ds.subset(&stratified_subsample_indices(ds, size, seed)?))
}

/// Sorted indices drawn by [`stratified_subsample`].
pub fn stratified_subsample_indices(ds: &LabeledDataset, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > ds.len() {
        return Err(Error::Config(format!("cannot draw {size} samples from {}", ds.len())));
    }
    if size == ds.len() {
        return Ok((0..ds.len()).collect());
    }
    let fraction = size as f64 / ds.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = shuffled_strata(ds, &mut rng)
        .into_iter()
        .flat_map(|s| {
            let k = stratum_size(fraction, s.len());
            s.into_iter().take(k)
        })
        .collect();
    keep.sort_unstable();
    Ok(keep)
}
