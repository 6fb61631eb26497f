//! Encoder registry: manifest lookup, architecture table, construction and
//! pretrained weight loading.
//!
//! Every encoder maps a `(B, 3, H, W)` image batch to four feature maps at
//! strides 4, 8, 16 and 32. Encoder parameters live under `encoder.` in the
//! model's [`ParamStore`](crate::nn::ParamStore).

mod convnext;
mod registry;
mod resnet;
mod swin;
mod vit;
pub mod weights;

use std::sync::{Arc, Mutex};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NoiseRng, ParamBuilder, ParamStore};

pub use convnext::{ConvNext, ConvNextConfig};
pub use registry::{
    list_backbones, lookup, manifest_entries, parse_manifest, BackboneSpec, Family, ManifestEntry,
    Pretrain, PretrainDataset, PretrainTask, WeightSource,
};
pub use resnet::{ResNet, ResNetConfig};
pub use swin::{Swin, SwinConfig, SwinVersion};
pub use vit::{Vit, VitConfig};
pub use weights::LoadReport;

/// Store prefix of all encoder parameters.
pub const ENCODER_PREFIX: &str = "encoder.";
/// Store prefix of all decoder parameters.
pub const DECODER_PREFIX: &str = "decoder.";

/// Architecture hyperparameters of one `(family, size)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Swin(SwinConfig),
    Vit(VitConfig),
    ResNet(ResNetConfig),
    ConvNext(ConvNextConfig),
}

impl Arch {
    pub fn widths(&self) -> [usize; 4] {
        match self {
            Arch::Swin(c) => c.widths(),
            Arch::Vit(c) => [c.dim; 4],
            Arch::ResNet(c) => c.widths,
            Arch::ConvNext(c) => c.widths,
        }
    }

    /// Overrides the stochastic-depth rate where the family has one.
    pub fn with_drop_path(mut self, rate: f64) -> Self {
        match &mut self {
            Arch::Swin(c) => c.drop_path = rate,
            Arch::Vit(c) => c.drop_path = rate,
            Arch::ConvNext(c) => c.drop_path = rate,
            Arch::ResNet(_) => {}
        }
        self
    }
}

fn swin(version: SwinVersion, embed_dim: usize, depths: [usize; 4], heads: [usize; 4], window: usize, dp: f64) -> Arch {
    Arch::Swin(SwinConfig {
        version,
        embed_dim,
        depths,
        heads,
        window,
        mlp_ratio: 4,
        drop_path: dp,
    })
}

fn vit(dim: usize, depth: usize, heads: usize, pos_grid: usize) -> Arch {
    Arch::Vit(VitConfig {
        dim,
        depth,
        heads,
        mlp_ratio: 4,
        patch: 16,
        pos_grid,
        drop_path: 0.1,
    })
}

/// Architecture of a registered `(family, size)`. `nano` sizes are tiny
/// random-init variants for fast tests and desk-scale runs.
pub fn arch_for(family: Family, size: &str) -> Result<Arch> {
    use SwinVersion::*;
    let arch = match (family, size) {
        (Family::Swin, "tiny") => swin(V1, 96, [2, 2, 6, 2], [3, 6, 12, 24], 7, 0.1),
        (Family::Swin, "small") => swin(V1, 96, [2, 2, 18, 2], [3, 6, 12, 24], 7, 0.1),
        (Family::Swin, "base") => swin(V1, 128, [2, 2, 18, 2], [4, 8, 16, 32], 12, 0.1),
        (Family::Swin, "nano") => swin(V1, 16, [1, 1, 2, 1], [1, 2, 4, 8], 4, 0.1),
        (Family::Swinv2, "tiny") => swin(V2, 96, [2, 2, 6, 2], [3, 6, 12, 24], 8, 0.1),
        (Family::Swinv2, "nano") => swin(V2, 16, [1, 1, 2, 1], [1, 2, 4, 8], 4, 0.1),
        (Family::Vit, "tiny") => vit(192, 12, 3, 14),
        (Family::Vit, "base") => vit(768, 12, 12, 14),
        (Family::Vit, "nano") => vit(32, 4, 2, 4),
        (Family::Resnet, "18") => Arch::ResNet(ResNetConfig {
            stem: 64,
            widths: [64, 128, 256, 512],
            depths: [2, 2, 2, 2],
            bottleneck: false,
        }),
        (Family::Resnet, "50") => Arch::ResNet(ResNetConfig {
            stem: 64,
            widths: [256, 512, 1024, 2048],
            depths: [3, 4, 6, 3],
            bottleneck: true,
        }),
        (Family::Resnet, "nano") => Arch::ResNet(ResNetConfig {
            stem: 8,
            widths: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            bottleneck: false,
        }),
        (Family::Convnext, "base") => Arch::ConvNext(ConvNextConfig {
            widths: [128, 256, 512, 1024],
            depths: [3, 3, 27, 3],
            drop_path: 0.0,
            layer_scale_init: 1e-6,
        }),
        (Family::Convnext, "nano") => Arch::ConvNext(ConvNextConfig {
            widths: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            drop_path: 0.0,
            layer_scale_init: 1e-6,
        }),
        _ => {
            return Err(Error::InvalidSpec(format!(
                "no architecture for {family}-{size}"
            )))
        }
    };
    Ok(arch)
}

/// Default decoder width for an encoder size.
pub fn default_decoder_channels(size: &str) -> usize {
    if size == "nano" {
        32
    } else {
        512
    }
}

/// A constructed encoder.
pub enum Encoder {
    Swin(Swin),
    Vit(Vit),
    ResNet(ResNet),
    ConvNext(ConvNext),
}

impl Encoder {
    /// Four feature maps at strides 4, 8, 16, 32.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        match self {
            Encoder::Swin(m) => m.forward(x, train),
            Encoder::Vit(m) => m.forward(x, train),
            Encoder::ResNet(m) => m.forward(x, train),
            Encoder::ConvNext(m) => m.forward(x, train),
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        match self {
            Encoder::Swin(m) => m.widths(),
            Encoder::Vit(m) => m.widths(),
            Encoder::ResNet(m) => m.widths(),
            Encoder::ConvNext(m) => m.widths(),
        }
    }

    /// First-layer kernel, used to verify weight loading.
    pub fn probe(&self) -> &Tensor {
        match self {
            Encoder::Swin(m) => m.probe(),
            Encoder::Vit(m) => m.probe(),
            Encoder::ResNet(m) => m.probe(),
            Encoder::ConvNext(m) => m.probe(),
        }
    }
}

/// Store name of the probe tensor for a family.
pub fn probe_name(family: Family) -> &'static str {
    match family {
        Family::Swin | Family::Swinv2 => "encoder.embeddings.patch_embeddings.projection.weight",
        Family::Vit => "encoder.patch_embed.proj.weight",
        Family::Resnet => "encoder.embedder.embedder.convolution.weight",
        Family::Convnext => "encoder.embeddings.patch_embeddings.weight",
    }
}

/// Parameters that classification checkpoints do not carry and that stay
/// randomly initialized.
const OPTIONAL_PARAMS: [&str; 1] = ["hidden_states_norms"];

/// How to build an encoder.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Load pretrained weights when the spec names a source.
    pub load_pretrained: bool,
    /// Overrides the architecture's stochastic-depth rate.
    pub drop_path: Option<f64>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            load_pretrained: true,
            drop_path: None,
        }
    }
}

/// Noise source for dropout and drop-path, derived from the model seed.
pub fn noise_rng(seed: u64) -> NoiseRng {
    Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d40b)))
}

/// Builds the encoder for `spec` under `pb` (normally the `encoder` prefix)
/// and, if requested, loads its pretrained weights.
pub fn build_backbone(
    spec: &BackboneSpec,
    pb: &ParamBuilder,
    rng: NoiseRng,
    opts: BuildOptions,
) -> Result<(Encoder, Option<LoadReport>)> {
    let entry = spec.validate()?;
    let mut arch = arch_for(spec.family, &spec.size)?;
    if let Some(dp) = opts.drop_path {
        arch = arch.with_drop_path(dp);
    }
    let encoder = match &arch {
        Arch::Swin(c) => {
            let expect = match spec.family {
                Family::Swinv2 => SwinVersion::V2,
                _ => SwinVersion::V1,
            };
            debug_assert_eq!(c.version, expect);
            Encoder::Swin(Swin::new(pb, c, rng)?)
        }
        Arch::Vit(c) => Encoder::Vit(Vit::new(pb, c, spec.level_ids(c.depth), rng)?),
        Arch::ResNet(c) => Encoder::ResNet(ResNet::new(pb, c)?),
        Arch::ConvNext(c) => Encoder::ConvNext(ConvNext::new(pb, c, rng)?),
    };
    let report = match (&entry.source, opts.load_pretrained) {
        (Some(source), true) => Some(load_pretrained(pb.store(), spec.family, source)?),
        _ => None,
    };
    Ok((encoder, report))
}

fn load_pretrained(store: &ParamStore, family: Family, source: &WeightSource) -> Result<LoadReport> {
    let path = weights::fetch(source)?;
    let tensors = weights::read_checkpoint(&path)?;
    let report = weights::load_into(
        store,
        ENCODER_PREFIX,
        &tensors,
        &source.key_prefix,
        &OPTIONAL_PARAMS,
        probe_name(family),
        &source.identifier,
    )?;
    log::info!(
        "loaded {} tensors for {} ({} left at random init, {} unused)",
        report.loaded,
        source.identifier,
        report.missing.len(),
        report.unexpected.len()
    );
    Ok(report)
}

/// Trainable scalar counts of a change model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSplit {
    pub encoder_params: usize,
    pub decoder_params: usize,
    pub total: usize,
}

/// Counts trainable scalars under the encoder and decoder prefixes. Fusion
/// is parameter-free, so the total is exactly their sum.
pub fn parameter_split(store: &ParamStore) -> ParamSplit {
    let encoder_params = store.count_params(ENCODER_PREFIX);
    let decoder_params = store.count_params(DECODER_PREFIX);
    ParamSplit {
        encoder_params,
        decoder_params,
        total: encoder_params + decoder_params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn count_encoder(spec: &str) -> (usize, [usize; 4]) {
        let store = ParamStore::zeroed(DType::F32, Device::Cpu);
        let spec = BackboneSpec::parse(spec).unwrap();
        let opts = BuildOptions {
            load_pretrained: false,
            drop_path: None,
        };
        let (enc, _) = build_backbone(&spec, &store.root().pp("encoder"), noise_rng(0), opts).unwrap();
        (store.count_params(ENCODER_PREFIX), enc.widths())
    }

    #[test]
    fn swin_tiny_widths_and_size() {
        let (n, w) = count_encoder("swin-tiny:in1k-cls");
        assert_eq!(w, [96, 192, 384, 768]);
        // 27.52M backbone plus the four output norms
        assert!((n as f64 / 1e6 - 27.5).abs() < 0.1, "{n}");
    }

    #[test]
    fn known_encoder_sizes() {
        let cases = [
            ("swin-base", 86.9),
            ("resnet-18", 11.2),
            ("resnet-50", 23.5),
            ("vit-tiny", 5.5),
            ("vit-base", 85.8),
            ("convnext-base", 87.6),
        ];
        for (s, m) in cases {
            let (n, _) = count_encoder(s);
            let got = n as f64 / 1e6;
            assert!((got - m).abs() / m < 0.02, "{s}: {got}M vs {m}M");
        }
    }

    #[test]
    fn every_manifest_row_has_an_architecture() {
        for s in list_backbones() {
            arch_for(s.family, &s.size).unwrap();
        }
    }

    #[test]
    fn unknown_spec_rejected() {
        let spec = BackboneSpec::parse("vit-tiny:eurosat-cls").unwrap();
        let store = ParamStore::zeroed(DType::F32, Device::Cpu);
        let r = build_backbone(&spec, &store.root(), noise_rng(0), BuildOptions::default());
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn vit_default_taps_evenly_spaced() {
        let spec = BackboneSpec::parse("vit-tiny:in1k-cls").unwrap();
        assert_eq!(spec.level_ids(12), vec![2, 5, 8, 11]);
    }
}
