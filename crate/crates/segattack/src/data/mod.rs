//! Dataset layer: samples and datasets, RLE mask codec, synthetic phantom
//! generation, leakage-free scan-grouped splitting, preprocessing and
//! augmentation, and the on-disk formats (16-bit PGM images, mask CSV,
//! manifest).

pub mod augment;
pub mod io;
pub mod phantom;
pub mod rle;

use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

/// Mask channel order, fixed across the whole toolkit.
pub const CLASS_NAMES: [&str; 3] = ["large_bowel", "small_bowel", "stomach"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("rle: {0}")]
    Rle(String),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("split: {0}")]
    Split(String),
    #[error("preprocess: {0}")]
    Preprocess(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One slice of one scan: grayscale image in `[0, 1]` plus a binary
/// three-channel mask (large bowel, small bowel, stomach).
#[derive(Debug, Clone)]
pub struct Sample {
    pub scan_id: String,
    pub slice_index: usize,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[3, H, W]`, strictly binary.
    pub mask: Tensor,
}

impl Sample {
    /// Identity used in mask CSVs and image filenames.
    pub fn id(&self) -> String {
        format!("{}_slice_{:04}", self.scan_id, self.slice_index)
    }

    /// True when at least one class channel is nonempty.
    pub fn has_mask(&self) -> bool {
        self.mask.data().iter().any(|&v| v != 0.0)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(DataError::InvalidConfig(format!(
                "sample {} image must be [1, H, W], got {shape:?}",
                self.id()
            )));
        }
        if self.mask.shape() != [CLASS_NAMES.len(), shape[1], shape[2]] {
            return Err(DataError::InvalidConfig(format!(
                "sample {} mask shape {:?} does not match image {shape:?}",
                self.id(),
                self.mask.shape()
            )));
        }
        if !self.mask.is_binary() {
            return Err(DataError::InvalidConfig(format!(
                "sample {} mask is not binary",
                self.id()
            )));
        }
        if self.image.min() < 0.0 || self.image.max() > 1.0 {
            return Err(DataError::InvalidConfig(format!(
                "sample {} image leaves [0, 1]",
                self.id()
            )));
        }
        Ok(())
    }
}

/// An ordered collection of samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct scan ids, sorted.
    pub fn scan_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.scan_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Subset of slices that carry at least one nonempty mask channel
    /// (the evaluation protocol scores only mask-bearing slices).
    pub fn with_masks(&self) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| s.has_mask()).cloned().collect())
    }

    /// `(H, W)` of the first sample.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    /// Stack samples `[lo, hi)` into `[N, 1, H, W]` and `[N, 3, H, W]` batch tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor), DataError> {
        let first = indices
            .first()
            .and_then(|&i| self.samples.get(i))
            .ok_or_else(|| DataError::InvalidConfig("empty batch".into()))?;
        let (h, w) = (first.image.shape()[1], first.image.shape()[2]);
        let n = indices.len();
        let mut images = Vec::with_capacity(n * h * w);
        let mut masks = Vec::with_capacity(n * 3 * h * w);
        for &i in indices {
            let s = &self.samples[i];
            images.extend_from_slice(s.image.data());
            masks.extend_from_slice(s.mask.data());
        }
        Ok((
            Tensor::new(vec![n, 1, h, w], images)?,
            Tensor::new(vec![n, 3, h, w], masks)?,
        ))
    }
}

/// Split whole scans into train and test sides so no scan leaks across.
/// Scans are shuffled by `seed`, then assigned to the test side until it
/// holds at least `test_fraction` of the slices (so the achieved share is
/// within one scan of the target).
pub fn split_by_scan(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut scans = dataset.scan_ids();
    if scans.len() < 2 {
        return Err(DataError::Split(format!(
            "need at least 2 scans to split, got {}",
            scans.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scans.shuffle(&mut rng);

    let slices_of = |scan: &str| dataset.samples.iter().filter(|s| s.scan_id == scan).count();
    let target = dataset.len() as f64 * test_fraction;
    let mut test_scans: BTreeSet<String> = BTreeSet::new();
    let mut test_slices = 0usize;
    for scan in &scans {
        if (test_slices as f64) >= target || test_scans.len() + 1 == scans.len() {
            break;
        }
        test_slices += slices_of(scan);
        test_scans.insert(scan.clone());
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for sample in &dataset.samples {
        if test_scans.contains(&sample.scan_id) {
            test.push(sample.clone());
        } else {
            train.push(sample.clone());
        }
    }
    Ok((Dataset::new(train), Dataset::new(test)))
}

/// Min-max normalize to `[0, 1]` (a constant image maps to all zeros) and
/// bilinear-resize a raw `[H, W]` intensity array to `[1, S, S]`.
/// `required_divisor` mirrors the paired model's spatial constraint.
pub fn preprocess(
    image: &Tensor,
    target_size: usize,
    required_divisor: usize,
) -> Result<Tensor, DataError> {
    let (h, w) = match image.shape() {
        &[h, w] if h > 0 && w > 0 => (h, w),
        other => {
            return Err(DataError::Preprocess(format!(
                "expected a nonempty [H, W] image, got {other:?}"
            )))
        }
    };
    if target_size == 0 || required_divisor == 0 || !target_size.is_multiple_of(required_divisor) {
        return Err(DataError::Preprocess(format!(
            "target size {target_size} must be a positive multiple of {required_divisor} \
             (the model halves resolution per level)"
        )));
    }
    let lo = image.min();
    let hi = image.max();
    let range = hi - lo;
    let normalized: Vec<f64> = if range == 0.0 {
        vec![0.0; h * w]
    } else {
        image.data().iter().map(|&v| (v - lo) / range).collect()
    };
    let resized = bilinear_resize(&normalized, h, w, target_size, target_size);
    Ok(Tensor::new(vec![1, target_size, target_size], resized)?)
}

/// Nearest-neighbor resize for binary masks, re-binarized on the way out.
pub fn preprocess_mask(mask: &Tensor, target_size: usize) -> Result<Tensor, DataError> {
    let (c, h, w) = match mask.shape() {
        &[c, h, w] if h > 0 && w > 0 => (c, h, w),
        other => {
            return Err(DataError::Preprocess(format!(
                "expected a [C, H, W] mask, got {other:?}"
            )))
        }
    };
    let s = target_size;
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        let src = &mask.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * s * s..(ch + 1) * s * s];
        for y in 0..s {
            let sy = (((y as f64 + 0.5) * h as f64 / s as f64 - 0.5).round().max(0.0) as usize)
                .min(h - 1);
            for x in 0..s {
                let sx = (((x as f64 + 0.5) * w as f64 / s as f64 - 0.5).round().max(0.0)
                    as usize)
                    .min(w - 1);
                dst[y * s + x] = if src[sy * w + sx] >= 0.5 { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Tensor::new(vec![c, s, s], out)?)
}

fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[y * ow + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(scans: usize, slices: usize) -> Dataset {
        let mut samples = Vec::new();
        for s in 0..scans {
            for t in 0..slices {
                samples.push(Sample {
                    scan_id: format!("scan{s:03}"),
                    slice_index: t,
                    image: Tensor::zeros(vec![1, 8, 8]),
                    mask: Tensor::zeros(vec![3, 8, 8]),
                });
            }
        }
        Dataset::new(samples)
    }

    #[test]
    fn split_never_shares_scans() {
        let ds = toy_dataset(7, 5);
        for seed in 0..20 {
            let (train, test) = split_by_scan(&ds, 0.3, seed).unwrap();
            let train_ids: BTreeSet<_> = train.scan_ids().into_iter().collect();
            let test_ids: BTreeSet<_> = test.scan_ids().into_iter().collect();
            assert!(train_ids.is_disjoint(&test_ids));
            assert_eq!(train.len() + test.len(), ds.len());
            assert!(!train.is_empty() && !test.is_empty());
        }
    }

    #[test]
    fn ten_percent_of_ten_equal_scans_is_one_scan() {
        let ds = toy_dataset(10, 12);
        let (train, test) = split_by_scan(&ds, 0.1, 3).unwrap();
        assert_eq!(test.scan_ids().len(), 1);
        assert_eq!(train.scan_ids().len(), 9);
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let ds = toy_dataset(1, 5);
        assert!(split_by_scan(&ds, 0.5, 0).is_err());
        let ds2 = toy_dataset(3, 5);
        assert!(split_by_scan(&ds2, 0.0, 0).is_err());
        assert!(split_by_scan(&ds2, 1.0, 0).is_err());
    }

    #[test]
    fn preprocess_normalizes_and_resizes() {
        // Constant image maps to zeros.
        let flat = Tensor::full(vec![6, 6], 42.0);
        let out = preprocess(&flat, 8, 4).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));

        // 16-bit style ramp: endpoints map to 0 and 1.
        let ramp = Tensor::new(vec![1, 4], vec![0.0, 1000.0, 30000.0, 65535.0]).unwrap();
        let p = preprocess(&ramp, 4, 1).unwrap();
        assert_eq!(p.min(), 0.0);
        assert_eq!(p.max(), 1.0);

        // Already-normalized image at target size is unchanged.
        let id = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.25, 0.75]).unwrap();
        let q = preprocess(&id, 2, 1).unwrap();
        assert_eq!(q.data(), id.data());

        assert!(preprocess(&flat, 9, 4).is_err());
    }

    #[test]
    fn preprocess_stays_in_unit_range() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(-500.0..500.0)).collect();
        let img = Tensor::new(vec![6, 8], data).unwrap();
        let out = preprocess(&img, 16, 4).unwrap();
        assert!(out.min() >= 0.0 && out.max() <= 1.0);
    }

    #[test]
    fn mask_resize_keeps_binarity() {
        let mask = Tensor::new(
            vec![1, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let big = preprocess_mask(&mask, 8).unwrap();
        assert!(big.is_binary());
        assert_eq!(big.shape(), &[1, 8, 8]);
    }

    #[test]
    fn split_preserves_class_distributions() {
        // Presence windows give every scan the same per-class positive
        // count, so train/test proportions must agree closely.
        let mut cfg = crate::data::phantom::PhantomConfig {
            n_scans: 10,
            slices_per_scan: 20,
            image_size: 32,
            ..Default::default()
        };
        for class in &mut cfg.classes {
            class.radius = (2.0, 3.2);
            class.blob_count = (1, 1);
        }
        let ds = crate::data::phantom::generate_phantoms(&cfg).unwrap();
        let (train, test) = split_by_scan(&ds, 0.2, 7).unwrap();
        let positives = |ds: &Dataset, ci: usize| -> f64 {
            let n = ds
                .samples()
                .iter()
                .filter(|s| {
                    let plane = s.mask.shape()[1] * s.mask.shape()[2];
                    s.mask.data()[ci * plane..(ci + 1) * plane].iter().any(|&v| v != 0.0)
                })
                .count();
            n as f64 / ds.len() as f64
        };
        for ci in 0..3 {
            let p_train = positives(&train, ci);
            let p_test = positives(&test, ci);
            let rel = (p_train - p_test).abs() / p_train.max(1e-9);
            assert!(rel < 0.10, "class {ci}: train {p_train:.3} vs test {p_test:.3}");
        }
    }

    #[test]
    fn sample_ids_and_mask_presence() {
        let mut s = toy_dataset(1, 3).samples()[2].clone();
        assert_eq!(s.id(), "scan000_slice_0002");
        assert!(!s.has_mask());
        s.mask.data_mut()[5] = 1.0;
        assert!(s.has_mask());
        let ds = Dataset::new(vec![s.clone()]);
        assert_eq!(ds.with_masks().len(), 1);
    }
}
