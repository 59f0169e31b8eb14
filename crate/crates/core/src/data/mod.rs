//! Datasets, reward subsets and augmentation.

pub mod augment;
pub mod cifar;
pub mod subset;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use subset::{make_reward_subset, stratified_indices, RewardSubset};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization applied to the stored images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images stored as normalized `f32` in `[N, C, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: Split,
    pub norm: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} images of {}",
                self.images.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Dataset(format!("label {bad} >= {} classes", self.num_classes)));
        }
        Ok(())
    }

    /// Stack the images at `idx` into a `[B, C, H, W]` tensor.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| S::lit(v as f64)));
        }
        let t = Tensor::new(&[idx.len(), self.channels, self.height, self.width], data)
            .expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Copy of the images at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Split `0..n` into consecutive batches, shuffled first when `rng` is given.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        order.shuffle(r);
    }
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
