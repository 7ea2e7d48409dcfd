//! Datasets of 3 x 32 x 32 images in [0, 1] with integer labels: IDX and
//! raw-dump loaders, a procedural digits generator, and fixed target-domain
//! shifts for evaluation.

mod idx;
mod shift;
mod synth;

use std::path::Path;

use crate::autodiff::Tensor;
use crate::classifier::checkpoint;
use crate::classifier::{IMAGE_SIZE, IN_CHANNELS};
use crate::error::{Error, Result};

pub use idx::{load_idx, parse_idx, write_idx};
pub use shift::{make_target_domain, ShiftOp, ShiftSpec};
pub use synth::synth_digits;

/// Values per image.
pub const IMAGE_LEN: usize = IN_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// `images` holds `labels.len()` row-major 3 x 32 x 32 images.
    pub fn new(name: impl Into<String>, images: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::contract(format!(
                "{} image values for {} labels (expected {} per image)",
                images.len(),
                labels.len(),
                IMAGE_LEN
            )));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("pixel {i} = {} outside [0, 1]", images[i])));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {y} outside [0, {classes})")));
        }
        Ok(Dataset { name: name.into(), images, labels, classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Stacks the chosen images into a `[B, 3, 32, 32]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(vec![indices.len(), IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("consistent batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous range `[start, end)` as a tensor plus labels.
    pub fn range(&self, start: usize, end: usize) -> (Tensor<f32>, Vec<usize>) {
        let data = self.images[start * IMAGE_LEN..end * IMAGE_LEN].to_vec();
        let t = Tensor::new(vec![end - start, IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("consistent range");
        (t, self.labels[start..end].to_vec())
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n * IMAGE_LEN].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Same labels, new pixels; the replacement must keep the layout.
    pub fn with_images(&self, name: impl Into<String>, images: Vec<f32>) -> Result<Dataset> {
        Dataset::new(name, images, self.labels.clone(), self.classes)
    }

    /// Writes `images: [N, 3, 32, 32]` and `labels: [N]` in the checkpoint container.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let images = Tensor::new(vec![self.len(), IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], self.images.clone())?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&y| y as f32).collect())?;
        let classes = Tensor::new(vec![1], vec![self.classes as f32])?;
        checkpoint::save(path, &[("images", &images), ("labels", &labels), ("classes", &classes)])
    }

    pub fn load_raw(path: &Path, name: impl Into<String>) -> Result<Dataset> {
        let arrays = checkpoint::load(path)?;
        let find = |key: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::contract(format!("raw dump lacks `{key}`")))
        };
        let images = find("images")?;
        let labels = find("labels")?;
        let n = labels.numel();
        if images.shape() != [n, IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape("load_raw", format!("images {:?} for {n} labels", images.shape())));
        }
        let labels: Vec<usize> = labels
            .data()
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(Error::contract(format!("label {y} is not a class index")))
                }
            })
            .collect::<Result<_>>()?;
        let classes = match find("classes") {
            Ok(c) => c.data()[0] as usize,
            Err(_) => labels.iter().max().map_or(0, |&m| m + 1),
        };
        Dataset::new(name, images.data().to_vec(), labels, classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_parts() {
        assert!(Dataset::new("x", vec![0.0; IMAGE_LEN], vec![0, 1], 2).is_err());
        assert!(Dataset::new("x", vec![1.5; IMAGE_LEN], vec![0], 2).is_err());
        assert!(Dataset::new("x", vec![0.5; IMAGE_LEN], vec![2], 2).is_err());
        assert!(Dataset::new("x", vec![], vec![], 10).unwrap().is_empty());
    }

    #[test]
    fn raw_dump_round_trip() {
        let ds = synth_digits(2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save_raw(&path).unwrap();
        let back = Dataset::load_raw(&path, ds.name()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn batches_keep_labels() {
        let ds = synth_digits(1, 0).unwrap();
        let (t, y) = ds.batch(&[3, 7]);
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![ds.labels()[3], ds.labels()[7]]);
        assert_eq!(&t.data()[IMAGE_LEN..], ds.image(7));
    }
}
