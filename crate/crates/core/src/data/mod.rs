//! Bi-temporal samples, dataset loading, preprocessing, paired augmentation
//! and the synthetic desk-scale generator.
//!
//! Images are stored planar as `(C, H, W)` `f32` arrays. Freshly decoded
//! images hold values in `[0, 1]`; [`preprocess`] switches them to
//! ImageNet-normalized space, which is what the augmentation and the model
//! consume.

mod augment;
mod dataset;
mod ingest;
pub mod imageops;
mod preprocess;
mod synthetic;

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{
    apply_paired_augmentation, blur_sigma_for_kernel, AugmentationConfig, AugmentationTrace,
    ColorParams, FiredAugmentation, GeometricOp, BLUR_KERNEL_CHOICES,
};
pub use dataset::{
    load_dataset, write_sample, DatasetName, DatasetSpec, SplitCounts, SyntheticSpec,
};
pub use ingest::{ingest_directory, ingest_synthetic, IngestReport, SplitIngest};
pub use preprocess::{denormalize, normalize, preprocess, IMAGENET_MEAN, IMAGENET_STD};
pub use synthetic::{make_synthetic_dataset, RECOLOR_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// A registered pre/post image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pre: Array3<f32>,
    pub post: Array3<f32>,
    pub sample_id: String,
}

impl ImagePair {
    pub fn new(pre: Array3<f32>, post: Array3<f32>, sample_id: impl Into<String>) -> Result<Self> {
        let sample_id = sample_id.into();
        if pre.dim() != post.dim() {
            return Err(Error::CorruptSample {
                sample_id,
                reason: format!("pre {:?} and post {:?} differ", pre.dim(), post.dim()),
            });
        }
        Ok(Self {
            pre,
            post,
            sample_id,
        })
    }

    /// `(height, width)`.
    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.pre.dim();
        (h, w)
    }

    pub fn swapped(&self) -> Self {
        Self {
            pre: self.post.clone(),
            post: self.pre.clone(),
            sample_id: self.sample_id.clone(),
        }
    }
}

/// Binary change mask, 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask(Array2<u8>);

impl ChangeMask {
    pub fn new(mask: Array2<u8>) -> Result<Self> {
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidMask(format!("found value {v}, expected 0 or 1")));
        }
        Ok(Self(mask))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }

    /// Thresholds an 8-bit label raster: any value above 127 marks change.
    pub fn from_label_u8(label: &Array2<u8>) -> Self {
        Self(label.mapv(|v| u8::from(v > 127)))
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.0
    }

    pub fn hw(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn changed_pixels(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair: ImagePair,
    pub gt: ChangeMask,
    pub split: Split,
}

impl Sample {
    pub fn new(pair: ImagePair, gt: ChangeMask, split: Split) -> Result<Self> {
        if pair.hw() != gt.hw() {
            return Err(Error::CorruptSample {
                sample_id: pair.sample_id.clone(),
                reason: format!("image {:?} vs mask {:?}", pair.hw(), gt.hw()),
            });
        }
        Ok(Self { pair, gt, split })
    }

    pub fn id(&self) -> &str {
        &self.pair.sample_id
    }
}
