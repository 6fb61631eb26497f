//! The change-detection model: one shared encoder applied to both dates,
//! per-level feature subtraction, UPerNet decoding and a 0.5 threshold.

mod pyramid;
mod upernet;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbones::{
    build_backbone, default_decoder_channels, noise_rng, parameter_split, BackboneSpec,
    BuildOptions, Encoder, LoadReport, ParamSplit,
};
use crate::data::{ChangeMask, ImagePair};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub use pyramid::{FeaturePyramid, PYRAMID_STRIDES};
pub use upernet::{UperNet, POOL_SCALES};

/// Inputs are zero-padded to a multiple of this before encoding.
pub const SIZE_MULTIPLE: usize = 32;
pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

fn default_threshold() -> f32 {
    0.5
}

/// Declarative model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Decoder width; defaults to 512 (32 for `nano` encoders).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_channels: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    /// Stochastic-depth override for the encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_path: Option<f64>,
}

impl ModelConfig {
    pub fn new(backbone: BackboneSpec) -> Self {
        Self {
            backbone,
            decoder_channels: None,
            threshold: 0.5,
            drop_path: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.decoder_channels
            .unwrap_or_else(|| default_decoder_channels(&self.backbone.size))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("model.threshold", "must lie in [0, 1]"));
        }
        if self.channels() == 0 {
            return Err(Error::config("model.decoder_channels", "must be positive"));
        }
        if let Some(dp) = self.drop_path {
            if !(0.0..1.0).contains(&dp) {
                return Err(Error::config("model.drop_path", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Probability map and its binarization for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prob: Array2<f32>,
    pub mask: ChangeMask,
}

/// `prob > threshold` as a change mask.
pub fn binarize(prob: &Array2<f32>, threshold: f32) -> ChangeMask {
    ChangeMask::new(prob.mapv(|p| u8::from(p > threshold))).expect("indicator values are binary")
}

/// Elementwise `f1 - f2` at every level.
pub fn fuse_subtract(f1: &FeaturePyramid, f2: &FeaturePyramid) -> Result<FeaturePyramid> {
    for (a, b) in f1.levels().iter().zip(f2.levels()) {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "cannot fuse levels of shape {:?} and {:?}",
                a.dims(),
                b.dims()
            )));
        }
    }
    let levels = f1
        .levels()
        .iter()
        .zip(f2.levels())
        .map(|(a, b)| Ok((a - b)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid::from_levels_unchecked(levels))
}

/// Converts a planar `(C, H, W)` image to a `(1, C, H, W)` tensor.
pub fn image_to_tensor(img: &Array3<f32>, device: &Device) -> Result<Tensor> {
    let (c, h, w) = img.dim();
    let data: Vec<f32> = img.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), device)?)
}

/// Stacks equally sized planar images into a `(B, C, H, W)` tensor.
pub fn stack_images<'a>(imgs: impl Iterator<Item = &'a Array3<f32>>, device: &Device) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for img in imgs {
        match dims {
            None => dims = Some(img.dim()),
            Some(d) if d != img.dim() => {
                return Err(Error::Shape(format!("cannot batch {:?} with {d:?}", img.dim())))
            }
            _ => {}
        }
        data.extend(img.iter().copied());
        b += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (b, c, h, w), device)?)
}

/// Siamese change detector.
pub struct ChangeModel {
    config: ModelConfig,
    store: Arc<ParamStore>,
    encoder: Encoder,
    decoder: UperNet,
    load_report: Option<LoadReport>,
}

impl ChangeModel {
    /// Builds a model with seeded random init and, when the backbone names a
    /// source, pretrained encoder weights.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32, device.clone());
        Self::build(config, store, true)
    }

    /// Builds a model without fetching pretrained weights.
    pub fn random(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, ParamStore::new(seed, dtype, device.clone()), false)
    }

    /// Builds a model with all-zero weights on the CPU, for counting
    /// parameters and operations quickly.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        Self::build(config, ParamStore::zeroed(DType::F32, Device::Cpu), false)
    }

    fn build(config: &ModelConfig, store: Arc<ParamStore>, load: bool) -> Result<Self> {
        config.validate()?;
        let rng = noise_rng(store.seed());
        let opts = BuildOptions {
            load_pretrained: load,
            drop_path: config.drop_path,
        };
        let root = store.root();
        let (encoder, load_report) = build_backbone(&config.backbone, &root.pp("encoder"), rng.clone(), opts)?;
        let decoder = UperNet::new(&root.pp("decoder"), encoder.widths(), config.channels(), rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            load_report,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &UperNet {
        &self.decoder
    }

    pub fn threshold(&self) -> f32 {
        self.config.threshold
    }

    pub fn set_threshold(&mut self, t: f32) {
        self.config.threshold = t;
    }

    pub fn load_report(&self) -> Option<&LoadReport> {
        self.load_report.as_ref()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn parameter_split(&self) -> ParamSplit {
        parameter_split(&self.store)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape(format!("expected a (B, 3, H, W) batch, got {dims:?}")));
        }
        if dims[2] < SIZE_MULTIPLE || dims[3] < SIZE_MULTIPLE {
            return Err(Error::Shape(format!(
                "input {}x{} is smaller than {SIZE_MULTIPLE}x{SIZE_MULTIPLE}",
                dims[2], dims[3]
            )));
        }
        Ok((dims[2], dims[3]))
    }

    fn pad(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_input(x)?;
        let ph = h.next_multiple_of(SIZE_MULTIPLE) - h;
        let pw = w.next_multiple_of(SIZE_MULTIPLE) - w;
        let x = x.to_dtype(self.dtype())?;
        let x = if ph > 0 { x.pad_with_zeros(2, 0, ph)? } else { x };
        Ok(if pw > 0 { x.pad_with_zeros(3, 0, pw)? } else { x })
    }

    /// Encodes one batch; the input is padded to a multiple of 32.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let x = self.pad(x)?;
        let (_, _, h, w) = x.dims4()?;
        FeaturePyramid::new(self.encoder.forward(&x, train)?, (h, w))
    }

    /// Pyramids of both dates from the single shared encoder.
    pub fn encode_batch(&self, pre: &Tensor, post: &Tensor, train: bool) -> Result<(FeaturePyramid, FeaturePyramid)> {
        if pre.dims() != post.dims() {
            return Err(Error::Shape(format!(
                "pre {:?} and post {:?} differ",
                pre.dims(),
                post.dims()
            )));
        }
        Ok((self.encode(pre, train)?, self.encode(post, train)?))
    }

    /// Inference-mode pyramids of a single pair.
    pub fn encode_pair(&self, pair: &ImagePair) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let dev = self.device();
        self.encode_batch(&image_to_tensor(&pair.pre, dev)?, &image_to_tensor(&pair.post, dev)?, false)
    }

    /// Decoder logits at the (padded) input resolution.
    pub fn decode_logits(&self, fused: &FeaturePyramid, train: bool) -> Result<Tensor> {
        let (h, w) = fused.input_hw();
        let logits = self.decoder.forward(fused.levels(), train)?;
        crate::nn::ops::resize_bilinear(&logits, h, w)
    }

    /// Change probabilities `(B, 1, H, W)` at the (padded) input resolution.
    pub fn decode(&self, fused: &FeaturePyramid, train: bool) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.decode_logits(fused, train)?)?)
    }

    /// Full forward path on batches, returning `f32` logits cropped to the
    /// input size.
    pub fn forward_logits(&self, pre: &Tensor, post: &Tensor, train: bool) -> Result<Tensor> {
        let (h, w) = self.check_input(pre)?;
        let (f1, f2) = self.encode_batch(pre, post, train)?;
        let logits = self.decode_logits(&fuse_subtract(&f1, &f2)?, train)?;
        Ok(logits.narrow(2, 0, h)?.narrow(3, 0, w)?.to_dtype(DType::F32)?)
    }

    /// Full forward path on batches, returning `f32` probabilities cropped
    /// to the input size.
    pub fn forward_batch(&self, pre: &Tensor, post: &Tensor, train: bool) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.forward_logits(pre, post, train)?)?)
    }

    /// Inference on several equally sized pairs at once.
    pub fn predict(&self, pairs: &[&ImagePair]) -> Result<Vec<Prediction>> {
        let Some(first) = pairs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.hw();
        let pre = stack_images(pairs.iter().map(|p| &p.pre), self.device())?;
        let post = stack_images(pairs.iter().map(|p| &p.post), self.device())?;
        let prob = self.forward_batch(&pre, &post, false)?;
        let flat = prob.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(h * w)
            .map(|c| {
                let prob = Array2::from_shape_vec((h, w), c.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
                let mask = binarize(&prob, self.config.threshold);
                Ok(Prediction { prob, mask })
            })
            .collect()
    }

    /// Inference on one pair.
    pub fn forward(&self, pair: &ImagePair) -> Result<Prediction> {
        let dev = self.device();
        let prob = self.forward_batch(&image_to_tensor(&pair.pre, dev)?, &image_to_tensor(&pair.post, dev)?, false)?;
        let (h, w) = pair.hw();
        let prob = Array2::from_shape_vec((h, w), prob.flatten_all()?.to_vec1::<f32>()?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mask = binarize(&prob, self.config.threshold);
        Ok(Prediction { prob, mask })
    }

    /// Writes all weights, the model config and an optional experiment
    /// description to one safetensors file.
    pub fn save_checkpoint(&self, path: &Path, experiment_json: Option<&str>) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> = self
            .store
            .named_tensors()
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?.contiguous()?)))
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.config)?);
        if let Some(e) = experiment_json {
            meta.insert("experiment_config".to_string(), e.to_string());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(tensors.iter(), Some(meta), path)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    /// Returns the model and the stored experiment description, if any.
    pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Self, Option<String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta = header.metadata().clone().unwrap_or_default();
        match meta.get("format_version").map(String::as_str) {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            other => return Err(Error::UnsupportedVersion(other.unwrap_or("<missing>").to_string())),
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| Error::Serde("checkpoint lacks model_config".into()))?,
        )?;
        let model = Self::random(&config, 0, DType::F32, device)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let names = model.store.named_tensors();
        for name in names.keys() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Serde(format!("checkpoint lacks tensor `{name}`")))?;
            model.store.assign(name, t)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !names.contains_key(*k)) {
            return Err(Error::Serde(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok((model, meta.get("experiment_config").cloned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nano(family: &str) -> ModelConfig {
        ModelConfig::new(BackboneSpec::parse(&format!("{family}-nano")).unwrap())
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| r.random_range(-2.0..2.0))
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn identity_pair_fuses_to_zero_for_every_family() {
        for fam in ["swin", "swinv2", "vit", "resnet", "convnext"] {
            let m = ChangeModel::random(&nano(fam), 1, DType::F32, &Device::Cpu).unwrap();
            let x = random_image(2, 64, 64);
            let pair = ImagePair::new(x.clone(), x, "s").unwrap();
            let (f1, f2) = m.encode_pair(&pair).unwrap();
            let f = fuse_subtract(&f1, &f2).unwrap();
            for l in f.levels() {
                assert_eq!(max_abs(l), 0.0, "{fam}");
            }
            let p = m.forward(&pair).unwrap();
            let first = p.prob[[0, 0]];
            assert!(p.prob.iter().all(|&v| (v - first).abs() < 1e-5), "{fam}");
        }
    }

    #[test]
    fn output_matches_input_size_after_padding() {
        let m = ChangeModel::random(&nano("swin"), 0, DType::F32, &Device::Cpu).unwrap();
        let pair = ImagePair::new(random_image(1, 40, 70), random_image(2, 40, 70), "s").unwrap();
        let p = m.forward(&pair).unwrap();
        assert_eq!(p.prob.dim(), (40, 70));
        assert!(p.prob.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn swap_negates_fusion() {
        let m = ChangeModel::random(&nano("resnet"), 0, DType::F32, &Device::Cpu).unwrap();
        let pair = ImagePair::new(random_image(1, 64, 64), random_image(2, 64, 64), "s").unwrap();
        let (a, b) = m.encode_pair(&pair).unwrap();
        let (c, d) = m.encode_pair(&pair.swapped()).unwrap();
        let f = fuse_subtract(&a, &b).unwrap();
        let g = fuse_subtract(&c, &d).unwrap();
        for (x, y) in f.levels().iter().zip(g.levels()) {
            assert_eq!(max_abs(&(x + y).unwrap()), 0.0);
        }
    }

    #[test]
    fn threshold_is_strict() {
        let prob = Array2::from_shape_vec((1, 3), vec![0.49, 0.5, 0.51]).unwrap();
        assert_eq!(binarize(&prob, 0.5).as_array().as_slice().unwrap(), &[0, 0, 1]);
    }

    #[test]
    fn too_small_input_is_shape_error() {
        let m = ChangeModel::random(&nano("resnet"), 0, DType::F32, &Device::Cpu).unwrap();
        let pair = ImagePair::new(random_image(1, 16, 64), random_image(2, 16, 64), "s").unwrap();
        assert!(matches!(m.forward(&pair), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_width_mismatch_is_config_error() {
        let m = ChangeModel::random(&nano("resnet"), 0, DType::F32, &Device::Cpu).unwrap();
        let levels: Vec<Tensor> = PYRAMID_STRIDES
            .iter()
            .map(|s| Tensor::zeros((1, 5, 64 / s, 64 / s), DType::F32, &Device::Cpu).unwrap())
            .collect();
        let f = FeaturePyramid::new(levels, (64, 64)).unwrap();
        assert!(matches!(m.decode(&f, false), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let m = ChangeModel::random(&nano("convnext"), 3, DType::F32, &Device::Cpu).unwrap();
        m.save_checkpoint(&path, Some("{\"k\":1}")).unwrap();
        let (n, extra) = ChangeModel::load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(extra.as_deref(), Some("{\"k\":1}"));
        let pair = ImagePair::new(random_image(1, 64, 64), random_image(2, 64, 64), "s").unwrap();
        assert_eq!(m.forward(&pair).unwrap().prob, n.forward(&pair).unwrap().prob);

        let t: HashMap<String, Tensor> = HashMap::from([("a".into(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap())]);
        let meta = HashMap::from([("format_version".to_string(), "99".to_string())]);
        let bad = dir.path().join("bad.safetensors");
        safetensors::serialize_to_file(t.iter(), Some(meta), &bad).unwrap();
        assert!(matches!(
            ChangeModel::load_checkpoint(&bad, &Device::Cpu),
            Err(Error::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn weight_sharing_is_structural() {
        let m = ChangeModel::skeleton(&nano("swin")).unwrap();
        let split = m.parameter_split();
        assert_eq!(split.total, split.encoder_params + split.decoder_params);
        assert_eq!(split.total, m.store().count_params(""));
    }
}
