use std::fmt;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synthetic::make_synthetic_dataset;
use super::{ChangeMask, ImagePair, Sample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetName {
    Sysu,
    Levir,
    Egybcd,
    Gvlm,
    Clcd,
    Oscd,
    Synthetic,
}

/// Per-split image counts of the public distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: Option<usize>,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> Option<usize> {
        match split {
            Split::Train => Some(self.train),
            Split::Val => self.val,
            Split::Test => Some(self.test),
        }
    }
}

impl DatasetName {
    pub const REAL: [DatasetName; 6] = [
        DatasetName::Sysu,
        DatasetName::Levir,
        DatasetName::Egybcd,
        DatasetName::Gvlm,
        DatasetName::Clcd,
        DatasetName::Oscd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Sysu => "SYSU",
            DatasetName::Levir => "LEVIR",
            DatasetName::Egybcd => "EGYBCD",
            DatasetName::Gvlm => "GVLM",
            DatasetName::Clcd => "CLCD",
            DatasetName::Oscd => "OSCD",
            DatasetName::Synthetic => "SYNTHETIC",
        }
    }

    pub fn expected_counts(self) -> Option<SplitCounts> {
        let (train, val, test) = match self {
            DatasetName::Sysu => (12000, Some(4000), 4000),
            DatasetName::Levir => (7120, Some(1024), 2048),
            DatasetName::Egybcd => (3654, Some(1219), 1218),
            DatasetName::Gvlm => (4558, Some(1519), 1519),
            DatasetName::Clcd => (1440, Some(480), 480),
            DatasetName::Oscd => (827, None, 385),
            DatasetName::Synthetic => return None,
        };
        Some(SplitCounts { train, val, test })
    }

    pub fn patch_size(self) -> usize {
        match self {
            DatasetName::Oscd => 96,
            _ => 256,
        }
    }

    pub fn resize_to(self) -> Option<usize> {
        match self {
            DatasetName::Oscd => Some(256),
            _ => None,
        }
    }

    /// Fraction of changed pixels in the public distribution.
    pub fn change_ratio(self) -> Option<f64> {
        match self {
            DatasetName::Sysu => Some(0.218),
            DatasetName::Levir => Some(0.047),
            DatasetName::Egybcd => Some(0.070),
            DatasetName::Gvlm => Some(0.066),
            DatasetName::Clcd => Some(0.076),
            DatasetName::Oscd => Some(0.032),
            DatasetName::Synthetic => None,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            DatasetName::Oscd => 50,
            _ => 100,
        }
    }

    pub fn has_split(self, split: Split) -> bool {
        match self.expected_counts() {
            Some(c) => c.get(split).is_some(),
            None => true,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase().replace(['-', '_'], "");
        Ok(match upper.as_str() {
            "SYSU" => DatasetName::Sysu,
            "LEVIR" => DatasetName::Levir,
            "EGYBCD" => DatasetName::Egybcd,
            "GVLM" => DatasetName::Gvlm,
            "CLCD" => DatasetName::Clcd,
            "OSCD" => DatasetName::Oscd,
            "SYNTHETIC" => DatasetName::Synthetic,
            _ => return Err(Error::InvalidArgument(format!("unknown dataset `{s}`"))),
        })
    }
}

/// Parameters of an in-memory synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
    pub change_ratio: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(default)]
    pub root_path: PathBuf,
    pub patch_size: usize,
    #[serde(default)]
    pub resize_to: Option<usize>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSpec {
    pub fn for_dataset(name: DatasetName, root: impl Into<PathBuf>) -> Self {
        Self {
            name,
            root_path: root.into(),
            patch_size: name.patch_size(),
            resize_to: name.resize_to(),
            synthetic: None,
        }
    }

    pub fn synthetic(size: usize, params: SyntheticSpec) -> Self {
        Self {
            name: DatasetName::Synthetic,
            root_path: PathBuf::new(),
            patch_size: size,
            resize_to: None,
            synthetic: Some(params),
        }
    }

    /// Side length of the samples handed to the model.
    pub fn model_size(&self) -> usize {
        self.resize_to.unwrap_or(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name != DatasetName::Synthetic {
            if self.patch_size != self.name.patch_size() {
                return Err(Error::config(
                    "dataset.patch_size",
                    format!("{} uses {} pixel patches", self.name, self.name.patch_size()),
                ));
            }
            if self.resize_to != self.name.resize_to() {
                return Err(Error::config(
                    "dataset.resize_to",
                    format!("{} expects resize_to = {:?}", self.name, self.name.resize_to()),
                ));
            }
            if self.synthetic.is_some() {
                return Err(Error::config(
                    "dataset.synthetic",
                    "only the SYNTHETIC dataset takes generator parameters",
                ));
            }
        } else if let Some(s) = &self.synthetic {
            if !(s.change_ratio > 0.0 && s.change_ratio < 1.0) {
                return Err(Error::config("dataset.synthetic.change_ratio", "must lie in (0, 1)"));
            }
            if self.patch_size < 32 {
                return Err(Error::config("dataset.patch_size", "synthetic patches need >= 32 px"));
            }
        }
        Ok(())
    }
}

fn split_seed(seed: u64, split: Split) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    seed.wrapping_mul(3).wrapping_add(offset)
}

/// Loads every sample of `split` in lexicographic `sample_id` order. Images
/// are scaled to `[0, 1]`; labels are binarized at `> 127`.
pub fn load_dataset(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    if !spec.name.has_split(split) {
        return Err(Error::InvalidSplit {
            dataset: spec.name.to_string(),
            split: split.to_string(),
        });
    }
    if let Some(params) = &spec.synthetic {
        let samples = make_synthetic_dataset(
            params.count(split),
            params.change_ratio,
            spec.patch_size,
            split_seed(params.seed, split),
        )?;
        return Ok(samples
            .into_iter()
            .map(|mut s| {
                s.split = split;
                s
            })
            .collect());
    }
    let split_dir = spec.root_path.join(split.as_str());
    let a_dir = split_dir.join("A");
    if !a_dir.is_dir() {
        return Err(Error::DatasetNotFound(a_dir));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&a_dir).map_err(|e| Error::io(&a_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&a_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    ids.par_iter()
        .map(|id| read_sample(&split_dir, id, split, spec.patch_size))
        .collect()
}

fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn read_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

fn read_sample(split_dir: &Path, id: &str, split: Split, patch: usize) -> Result<Sample> {
    let file = format!("{id}.png");
    let pre = read_rgb(&split_dir.join("A").join(&file))?;
    let post = read_rgb(&split_dir.join("B").join(&file))?;
    let label = read_label(&split_dir.join("label").join(&file))?;
    let corrupt = |reason: String| Error::CorruptSample {
        sample_id: id.to_owned(),
        reason,
    };
    if pre.dim() != post.dim() {
        return Err(corrupt(format!("A {:?} vs B {:?}", pre.dim(), post.dim())));
    }
    let (_, h, w) = pre.dim();
    if label.dim() != (h, w) {
        return Err(corrupt(format!("image {h}x{w} vs label {:?}", label.dim())));
    }
    if h != patch || w != patch {
        return Err(corrupt(format!("expected {patch}x{patch}, found {h}x{w}")));
    }
    let pair = ImagePair::new(pre, post, id)?;
    Sample::new(pair, ChangeMask::from_label_u8(&label), split)
}

fn to_rgb8(img: &Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes one sample into the canonical `<root>/<split>/{A,B,label}` layout.
/// Images must still be in `[0, 1]` space.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let split_dir = root.join(sample.split.as_str());
    let file = format!("{}.png", sample.id());
    for sub in ["A", "B", "label"] {
        let dir = split_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let save_err = |path: PathBuf| move |source| Error::Image { path, source };
    let a = split_dir.join("A").join(&file);
    to_rgb8(&sample.pair.pre).save(&a).map_err(save_err(a.clone()))?;
    let b = split_dir.join("B").join(&file);
    to_rgb8(&sample.pair.post).save(&b).map_err(save_err(b.clone()))?;
    let l = split_dir.join("label").join(&file);
    let (h, w) = sample.gt.hw();
    let mask = sample.gt.as_array();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]] * 255])
    })
    .save(&l)
    .map_err(save_err(l.clone()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn public_split_counts() {
        let levir = DatasetName::Levir.expected_counts().unwrap();
        assert_eq!((levir.train, levir.val, levir.test), (7120, Some(1024), 2048));
        assert_eq!(DatasetName::Oscd.expected_counts().unwrap().val, None);
        assert_eq!(DatasetName::Oscd.patch_size(), 96);
        assert_eq!(DatasetName::Oscd.resize_to(), Some(256));
        for d in DatasetName::REAL.iter().filter(|d| **d != DatasetName::Oscd) {
            assert_eq!(d.patch_size(), 256);
            assert_eq!(d.resize_to(), None);
        }
    }

    #[test]
    fn oscd_has_no_val_split() {
        let spec = DatasetSpec::for_dataset(DatasetName::Oscd, "/nonexistent");
        let err = load_dataset(&spec, Split::Val).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit { .. }));
    }

    #[test]
    fn missing_root_is_reported() {
        let spec = DatasetSpec::for_dataset(DatasetName::Levir, "/definitely/not/here");
        let err = load_dataset(&spec, Split::Test).unwrap_err();
        assert!(matches!(err, Error::DatasetNotFound(_)));
    }

    #[test]
    fn synthetic_split_sizes() {
        let spec = DatasetSpec::synthetic(
            256,
            SyntheticSpec {
                train: 16,
                val: 0,
                test: 4,
                change_ratio: 0.05,
                seed: 0,
            },
        );
        let train = load_dataset(&spec, Split::Train).unwrap();
        assert_eq!(train.len(), 16);
        assert!(train.iter().all(|s| s.pair.hw() == (256, 256) && s.split == Split::Train));
        assert_eq!(load_dataset(&spec, Split::Test).unwrap().len(), 4);
    }

    #[test]
    fn name_parsing() {
        assert_eq!("egy-bcd".parse::<DatasetName>().unwrap(), DatasetName::Egybcd);
        assert!("modis".parse::<DatasetName>().is_err());
    }
}
