//! Paired random augmentation.
//!
//! Each enabled primitive fires independently with `probability`. The flip
//! family contributes three primitives (horizontal flip, vertical flip,
//! rotation); crop, color and blur contribute one each. Geometric primitives
//! are applied with identical parameters to both images and the mask;
//! photometric ones touch only the images, again with shared parameters.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imageops::{self, Interp};
use super::preprocess::{denormalize, normalize};
use super::{ChangeMask, ImagePair, Sample};
use crate::error::{Error, Result};

pub const BLUR_KERNEL_CHOICES: [usize; 4] = [3, 5, 7, 9];

fn default_probability() -> f64 {
    0.3
}
fn default_crop_range() -> [f64; 2] {
    [0.3, 1.0]
}
fn default_rotation_range() -> [f64; 2] {
    [-90.0, 90.0]
}
fn default_color_range() -> [f64; 2] {
    [0.7, 1.3]
}
fn default_hue_range() -> [f64; 2] {
    [-0.05, 0.05]
}
fn default_blur_kernels() -> Vec<usize> {
    BLUR_KERNEL_CHOICES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    #[serde(default)]
    pub enable_flip: bool,
    #[serde(default)]
    pub enable_crop: bool,
    #[serde(default)]
    pub enable_color: bool,
    #[serde(default)]
    pub enable_blur: bool,
    #[serde(default = "default_probability")]
    pub probability: f64,
    #[serde(default = "default_crop_range")]
    pub crop_ratio_range: [f64; 2],
    #[serde(default = "default_rotation_range")]
    pub rotation_range_deg: [f64; 2],
    #[serde(default = "default_color_range")]
    pub color_factor_range: [f64; 2],
    #[serde(default = "default_hue_range")]
    pub hue_range: [f64; 2],
    #[serde(default = "default_blur_kernels")]
    pub blur_kernel_choices: Vec<usize>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enable_flip: false,
            enable_crop: false,
            enable_color: false,
            enable_blur: false,
            probability: default_probability(),
            crop_ratio_range: default_crop_range(),
            rotation_range_deg: default_rotation_range(),
            color_factor_range: default_color_range(),
            hue_range: default_hue_range(),
            blur_kernel_choices: default_blur_kernels(),
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn flip() -> Self {
        Self {
            enable_flip: true,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.enable_flip || self.enable_crop || self.enable_color || self.enable_blur
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("augmentation.{field}"), why));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability", "must lie in [0, 1]");
        }
        let ranges = [
            ("crop_ratio_range", self.crop_ratio_range),
            ("rotation_range_deg", self.rotation_range_deg),
            ("color_factor_range", self.color_factor_range),
            ("hue_range", self.hue_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return bad(name, "interval is empty");
            }
        }
        if self.crop_ratio_range[0] <= 0.0 || self.crop_ratio_range[1] > 1.0 {
            return bad("crop_ratio_range", "must lie within (0, 1]");
        }
        if self.color_factor_range[0] < 0.0 {
            return bad("color_factor_range", "factors must be non-negative");
        }
        if self.blur_kernel_choices.is_empty() {
            return bad("blur_kernel_choices", "needs at least one kernel size");
        }
        if self
            .blur_kernel_choices
            .iter()
            .any(|&k| k < 3 || k > 9 || k % 2 == 0)
        {
            return bad("blur_kernel_choices", "kernel sizes must be odd and within [3, 9]");
        }
        Ok(())
    }
}

/// Gaussian sigma for an odd kernel size, solving `k = int(3.5 * sigma) * 2 + 1`.
pub fn blur_sigma_for_kernel(ksize: usize) -> f64 {
    (ksize as f64 - 1.0) / 7.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricOp {
    HFlip,
    VFlip,
    Rotate { degrees: f32 },
    /// Square crop of side `side` at `(y0, x0)`, resized back afterwards.
    Crop { y0: usize, x0: usize, side: usize },
}

impl GeometricOp {
    pub fn apply_plane(&self, plane: ndarray::ArrayView2<f32>) -> Array2<f32> {
        let (h, w) = plane.dim();
        match *self {
            GeometricOp::HFlip => imageops::hflip(plane),
            GeometricOp::VFlip => imageops::vflip(plane),
            GeometricOp::Rotate { degrees } => {
                imageops::rotate(plane, degrees, Interp::Bilinear, 0.0f32)
            }
            GeometricOp::Crop { y0, x0, side } => {
                let c = imageops::crop(plane, y0, x0, side, side);
                imageops::resize_bilinear(c.view(), h, w)
            }
        }
    }

    pub fn apply_image(&self, img: &Array3<f32>) -> Array3<f32> {
        imageops::map_planes(img, |p| self.apply_plane(p))
    }

    pub fn apply_mask(&self, mask: &Array2<u8>) -> Array2<u8> {
        let (h, w) = mask.dim();
        let view = mask.view();
        match *self {
            GeometricOp::HFlip => imageops::hflip(view),
            GeometricOp::VFlip => imageops::vflip(view),
            GeometricOp::Rotate { degrees } => imageops::rotate(view, degrees, Interp::Nearest, 0u8),
            GeometricOp::Crop { y0, x0, side } => {
                let c = imageops::crop(view, y0, x0, side, side);
                imageops::resize_nearest(c.view(), h, w)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl ColorParams {
    /// Applies the jitter to an ImageNet-normalized image.
    pub fn apply(&self, img: &Array3<f32>) -> Array3<f32> {
        let mut raw = denormalize(img);
        raw.mapv_inplace(|v| v.clamp(0.0, 1.0));
        imageops::adjust_brightness(&mut raw, self.brightness);
        imageops::adjust_contrast(&mut raw, self.contrast);
        imageops::adjust_saturation(&mut raw, self.saturation);
        imageops::adjust_hue(&mut raw, self.hue);
        normalize(&raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FiredAugmentation {
    Geometric(GeometricOp),
    Color(ColorParams),
    Blur { kernel: usize, sigma: f64 },
}

impl FiredAugmentation {
    pub fn kind(&self) -> &'static str {
        match self {
            FiredAugmentation::Geometric(GeometricOp::HFlip) => "hflip",
            FiredAugmentation::Geometric(GeometricOp::VFlip) => "vflip",
            FiredAugmentation::Geometric(GeometricOp::Rotate { .. }) => "rotate",
            FiredAugmentation::Geometric(GeometricOp::Crop { .. }) => "crop",
            FiredAugmentation::Color(_) => "color",
            FiredAugmentation::Blur { .. } => "blur",
        }
    }
}

/// The primitives that fired, in application order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentationTrace {
    pub fired: Vec<FiredAugmentation>,
}

impl AugmentationTrace {
    pub fn count(&self, kind: &str) -> usize {
        self.fired.iter().filter(|f| f.kind() == kind).count()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn draw<R: Rng + ?Sized>(config: &AugmentationConfig, h: usize, w: usize, rng: &mut R) -> AugmentationTrace {
    let mut fired = Vec::new();
    let p = config.probability;
    if config.enable_flip {
        if rng.random_bool(p) {
            fired.push(FiredAugmentation::Geometric(GeometricOp::HFlip));
        }
        if rng.random_bool(p) {
            fired.push(FiredAugmentation::Geometric(GeometricOp::VFlip));
        }
        if rng.random_bool(p) {
            let degrees = uniform(rng, config.rotation_range_deg) as f32;
            fired.push(FiredAugmentation::Geometric(GeometricOp::Rotate { degrees }));
        }
    }
    if config.enable_crop && rng.random_bool(p) {
        let ratio = uniform(rng, config.crop_ratio_range);
        let side = ((h.min(w) as f64 * ratio).round() as usize).clamp(1, h.min(w));
        let y0 = rng.random_range(0..=h - side);
        let x0 = rng.random_range(0..=w - side);
        fired.push(FiredAugmentation::Geometric(GeometricOp::Crop { y0, x0, side }));
    }
    if config.enable_color && rng.random_bool(p) {
        let r = config.color_factor_range;
        fired.push(FiredAugmentation::Color(ColorParams {
            brightness: uniform(rng, r) as f32,
            contrast: uniform(rng, r) as f32,
            saturation: uniform(rng, r) as f32,
            hue: uniform(rng, config.hue_range) as f32,
        }));
    }
    if config.enable_blur && rng.random_bool(p) {
        let kernel = config.blur_kernel_choices[rng.random_range(0..config.blur_kernel_choices.len())];
        fired.push(FiredAugmentation::Blur {
            kernel,
            sigma: blur_sigma_for_kernel(kernel),
        });
    }
    AugmentationTrace { fired }
}

/// Applies the randomly drawn augmentations to a preprocessed sample and
/// returns the result together with the trace of what fired.
pub fn apply_paired_augmentation<R: Rng + ?Sized>(
    sample: &Sample,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Sample, AugmentationTrace)> {
    let (h, w) = sample.pair.hw();
    let trace = draw(config, h, w, rng);
    if trace.fired.is_empty() {
        return Ok((sample.clone(), trace));
    }
    let mut pre = sample.pair.pre.clone();
    let mut post = sample.pair.post.clone();
    let mut mask = sample.gt.as_array().clone();
    for op in &trace.fired {
        match op {
            FiredAugmentation::Geometric(g) => {
                pre = g.apply_image(&pre);
                post = g.apply_image(&post);
                mask = g.apply_mask(&mask);
            }
            FiredAugmentation::Color(c) => {
                pre = c.apply(&pre);
                post = c.apply(&post);
            }
            FiredAugmentation::Blur { kernel, sigma } => {
                let blur = |p: ndarray::ArrayView2<f32>| imageops::gaussian_blur(p, *kernel, *sigma);
                pre = imageops::map_planes(&pre, blur);
                post = imageops::map_planes(&post, blur);
            }
        }
    }
    let pair = ImagePair::new(pre, post, sample.pair.sample_id.clone())?;
    Ok((Sample::new(pair, ChangeMask::new(mask)?, sample.split)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured_sample(size: usize) -> Sample {
        let img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            ((y * 7 + x * 3 + c * 11) % 17) as f32 / 17.0 - 0.5
        });
        let mask = Array2::from_shape_fn((size, size), |(y, x)| u8::from((x + y) % 5 == 0));
        let pair = ImagePair::new(img.clone(), img, "t").unwrap();
        Sample::new(pair, ChangeMask::new(mask).unwrap(), Split::Train).unwrap()
    }

    fn all_on() -> AugmentationConfig {
        AugmentationConfig {
            enable_flip: true,
            enable_crop: true,
            enable_color: true,
            enable_blur: true,
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = textured_sample(32);
        let cfg = AugmentationConfig {
            probability: 0.0,
            ..all_on()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (out, trace) = apply_paired_augmentation(&s, &cfg, &mut rng).unwrap();
            assert!(trace.fired.is_empty());
            assert_eq!(out, s);
        }
    }

    #[test]
    fn identical_inputs_stay_identical() {
        let s = textured_sample(24);
        let cfg = AugmentationConfig {
            probability: 1.0,
            ..all_on()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (out, trace) = apply_paired_augmentation(&s, &cfg, &mut rng).unwrap();
            assert_eq!(trace.fired.len(), 6);
            assert_eq!(out.pair.pre, out.pair.post);
            assert!(out.gt.as_array().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn blur_sigma_satisfies_kernel_relation() {
        for k in BLUR_KERNEL_CHOICES {
            let sigma = blur_sigma_for_kernel(k);
            assert_eq!((sigma * 3.5) as usize * 2 + 1, k, "kernel {k}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            blur_kernel_choices: vec![4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            crop_ratio_range: [0.9, 0.3],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_crop_is_clamped() {
        let s = textured_sample(32);
        let cfg = AugmentationConfig {
            enable_crop: true,
            probability: 1.0,
            crop_ratio_range: [0.001, 0.001],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, trace) = apply_paired_augmentation(&s, &cfg, &mut rng).unwrap();
        assert!(matches!(
            trace.fired[0],
            FiredAugmentation::Geometric(GeometricOp::Crop { side: 1, .. })
        ));
        assert_eq!(out.pair.hw(), (32, 32));
    }
}
