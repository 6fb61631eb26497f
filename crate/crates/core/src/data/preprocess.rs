use ndarray::{Array3, Axis};

use super::imageops::{resize_image, resize_nearest};
use super::{ChangeMask, DatasetSpec, ImagePair, Sample};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn normalize(img: &Array3<f32>) -> Array3<f32> {
    let mut out = img.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c % 3], IMAGENET_STD[c % 3]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

pub fn denormalize(img: &Array3<f32>) -> Array3<f32> {
    let mut out = img.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c % 3], IMAGENET_STD[c % 3]);
        plane.mapv_inplace(|v| v * s + m);
    }
    out
}

/// Normalizes both images with ImageNet statistics and, when the dataset
/// declares `resize_to`, rescales images bilinearly and the mask by nearest
/// neighbour.
pub fn preprocess(sample: Sample, spec: &DatasetSpec) -> Result<Sample> {
    let (h, w) = sample.pair.hw();
    if h != spec.patch_size || w != spec.patch_size {
        return Err(Error::CorruptSample {
            sample_id: sample.pair.sample_id.clone(),
            reason: format!(
                "expected {p}x{p} patch, found {h}x{w}",
                p = spec.patch_size
            ),
        });
    }
    let Sample { pair, gt, split } = sample;
    let (mut pre, mut post) = (normalize(&pair.pre), normalize(&pair.post));
    let mut gt = gt;
    if let Some(target) = spec.resize_to.filter(|&t| t != h || t != w) {
        pre = resize_image(&pre, target, target);
        post = resize_image(&post, target, target);
        gt = ChangeMask::new(resize_nearest(gt.as_array().view(), target, target))?;
    }
    Sample::new(ImagePair::new(pre, post, pair.sample_id)?, gt, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetName, Split};
    use proptest::prelude::*;

    fn constant_sample(size: usize, values: [f32; 3]) -> Sample {
        let img = Array3::from_shape_fn((3, size, size), |(c, _, _)| values[c]);
        let pair = ImagePair::new(img.clone(), img, "s").unwrap();
        Sample::new(pair, ChangeMask::zeros(size, size), Split::Train).unwrap()
    }

    #[test]
    fn mean_valued_image_normalizes_to_zero() {
        let spec = DatasetSpec::for_dataset(DatasetName::Sysu, "/nonexistent");
        let out = preprocess(constant_sample(256, IMAGENET_MEAN), &spec).unwrap();
        assert!(out.pair.pre.iter().all(|v| v.abs() < 1e-7));
        assert_eq!(out.pair.hw(), (256, 256));
    }

    #[test]
    fn oscd_patches_are_rescaled() {
        let spec = DatasetSpec::for_dataset(DatasetName::Oscd, "/nonexistent");
        let mut s = constant_sample(96, [0.3, 0.4, 0.5]);
        let mut m = s.gt.clone().into_inner();
        m.slice_mut(ndarray::s![10..40, 20..60]).fill(1);
        s.gt = ChangeMask::new(m).unwrap();
        let out = preprocess(s, &spec).unwrap();
        assert_eq!(out.pair.hw(), (256, 256));
        assert_eq!(out.gt.hw(), (256, 256));
        assert!(out.gt.as_array().iter().all(|&v| v <= 1));
        assert!(out.gt.changed_pixels() > 0);
    }

    #[test]
    fn wrong_patch_size_is_corrupt() {
        let spec = DatasetSpec::for_dataset(DatasetName::Levir, "/nonexistent");
        let err = preprocess(constant_sample(96, [0.1; 3]), &spec).unwrap_err();
        assert!(matches!(err, Error::CorruptSample { .. }));
    }

    proptest! {
        #[test]
        fn normalization_round_trip(values in proptest::collection::vec(0.0f32..=1.0, 3 * 4 * 5)) {
            let img = Array3::from_shape_vec((3, 4, 5), values).unwrap();
            let back = denormalize(&normalize(&img));
            for (a, b) in img.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
