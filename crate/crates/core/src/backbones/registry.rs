//! Registered encoder variants and their weight sources.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MANIFEST: &str = include_str!("../../registry/backbones.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Swin,
    Swinv2,
    Vit,
    Resnet,
    Convnext,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Swin => "swin",
            Family::Swinv2 => "swinv2",
            Family::Vit => "vit",
            Family::Resnet => "resnet",
            Family::Convnext => "convnext",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        self != Family::Vit
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "swin" => Family::Swin,
            "swinv2" => Family::Swinv2,
            "vit" => Family::Vit,
            "resnet" => Family::Resnet,
            "convnext" => Family::Convnext,
            other => return Err(Error::InvalidSpec(format!("unknown backbone family `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PretrainDataset {
    In1k,
    EuroSat,
    Ade20k,
    Cityscapes,
    Coco,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PretrainTask {
    Classification,
    SemanticSeg,
    PanopticSeg,
    InstanceSeg,
}

/// Pretraining source as a (dataset, task) pair, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pretrain {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "in1k-cls")]
    In1k,
    #[serde(rename = "eurosat-cls")]
    EuroSat,
    #[serde(rename = "ade20k-sem")]
    Ade20kSemantic,
    #[serde(rename = "cityscapes-sem")]
    CityscapesSemantic,
    #[serde(rename = "cityscapes-pan")]
    CityscapesPanoptic,
    #[serde(rename = "cityscapes-ins")]
    CityscapesInstance,
    #[serde(rename = "coco-pan")]
    CocoPanoptic,
    #[serde(rename = "coco-ins")]
    CocoInstance,
}

impl Pretrain {
    pub const ALL: [Pretrain; 9] = [
        Pretrain::None,
        Pretrain::In1k,
        Pretrain::EuroSat,
        Pretrain::Ade20kSemantic,
        Pretrain::CityscapesSemantic,
        Pretrain::CityscapesPanoptic,
        Pretrain::CityscapesInstance,
        Pretrain::CocoPanoptic,
        Pretrain::CocoInstance,
    ];

    /// `(dataset, task)`, or `None` for random initialization.
    pub fn source(self) -> Option<(PretrainDataset, PretrainTask)> {
        use PretrainDataset as D;
        use PretrainTask as T;
        Some(match self {
            Pretrain::None => return None,
            Pretrain::In1k => (D::In1k, T::Classification),
            Pretrain::EuroSat => (D::EuroSat, T::Classification),
            Pretrain::Ade20kSemantic => (D::Ade20k, T::SemanticSeg),
            Pretrain::CityscapesSemantic => (D::Cityscapes, T::SemanticSeg),
            Pretrain::CityscapesPanoptic => (D::Cityscapes, T::PanopticSeg),
            Pretrain::CityscapesInstance => (D::Cityscapes, T::InstanceSeg),
            Pretrain::CocoPanoptic => (D::Coco, T::PanopticSeg),
            Pretrain::CocoInstance => (D::Coco, T::InstanceSeg),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pretrain::None => "none",
            Pretrain::In1k => "in1k-cls",
            Pretrain::EuroSat => "eurosat-cls",
            Pretrain::Ade20kSemantic => "ade20k-sem",
            Pretrain::CityscapesSemantic => "cityscapes-sem",
            Pretrain::CityscapesPanoptic => "cityscapes-pan",
            Pretrain::CityscapesInstance => "cityscapes-ins",
            Pretrain::CocoPanoptic => "coco-pan",
            Pretrain::CocoInstance => "coco-ins",
        }
    }
}

impl fmt::Display for Pretrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pretrain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pretrain::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown pretrain source `{s}`")))
    }
}

/// Identifies one encoder variant and its tap points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: Family,
    pub size: String,
    pub pretrain: Pretrain,
    /// Stage indices (hierarchical) or block indices (plain ViT). Empty
    /// means the family default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_level_ids: Vec<usize>,
}

impl BackboneSpec {
    pub fn new(family: Family, size: impl Into<String>, pretrain: Pretrain) -> Self {
        Self {
            family,
            size: size.into(),
            pretrain,
            feature_level_ids: Vec::new(),
        }
    }

    /// Parses `family-size[:pretrain]`, e.g. `swin-tiny:cityscapes-sem`.
    pub fn parse(s: &str) -> Result<Self> {
        let (arch, pretrain) = match s.split_once(':') {
            Some((a, p)) => (a, p.parse()?),
            None => (s, Pretrain::None),
        };
        let (family, size) = arch
            .split_once('-')
            .ok_or_else(|| Error::InvalidSpec(format!("expected `family-size[:pretrain]`, got `{s}`")))?;
        Ok(Self::new(family.parse()?, size, pretrain))
    }

    /// Tap points actually used, resolving the family default.
    pub fn level_ids(&self, depth: usize) -> Vec<usize> {
        if !self.feature_level_ids.is_empty() {
            return self.feature_level_ids.clone();
        }
        if self.family.is_hierarchical() {
            vec![0, 1, 2, 3]
        } else {
            // four evenly spaced blocks ending at the last one
            (1..=4).map(|i| i * depth / 4 - 1).collect()
        }
    }

    /// Checks the spec against the manifest and its own invariants.
    pub fn validate(&self) -> Result<&'static ManifestEntry> {
        let entry = lookup(self)?;
        if !self.feature_level_ids.is_empty() {
            if self.feature_level_ids.len() != 4 {
                return Err(Error::InvalidSpec(format!(
                    "{self}: exactly 4 feature levels required, got {}",
                    self.feature_level_ids.len()
                )));
            }
            if self.feature_level_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidSpec(format!("{self}: feature levels must increase")));
            }
            if self.family.is_hierarchical() && self.feature_level_ids != [0, 1, 2, 3] {
                return Err(Error::InvalidSpec(format!(
                    "{self}: hierarchical encoders tap stages 0..=3"
                )));
            }
        }
        Ok(entry)
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}:{}", self.family, self.size, self.pretrain)
    }
}

/// Where pretrained encoder weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSource {
    pub identifier: String,
    /// Candidate download locations, tried in order.
    pub uris: Vec<String>,
    /// Expected sha256 of the downloaded file, if pinned.
    pub checksum: Option<String>,
    pub license_note: String,
    pub key_prefix: String,
}

impl WeightSource {
    pub fn uri(&self) -> &str {
        &self.uris[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub spec: BackboneSpec,
    pub source: Option<WeightSource>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    family: Family,
    size: String,
    pretrain: Pretrain,
    identifier: Option<String>,
    #[serde(default)]
    uris: Vec<String>,
    #[serde(default)]
    sha256: String,
    key_prefix: Option<String>,
    #[serde(default)]
    license_note: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    backbone: Vec<RawEntry>,
}

/// Parses a manifest document.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let raw: RawManifest =
        toml::from_str(text).map_err(|e| Error::config("backbones.toml", e.to_string()))?;
    let mut out: Vec<ManifestEntry> = Vec::new();
    for r in raw.backbone {
        let spec = BackboneSpec::new(r.family, r.size, r.pretrain);
        if out.iter().any(|e| e.spec == spec) {
            return Err(Error::config("backbones.toml", format!("duplicate row {spec}")));
        }
        let source = match (r.pretrain, r.identifier) {
            (Pretrain::None, None) => None,
            (Pretrain::None, Some(_)) => {
                return Err(Error::config("backbones.toml", format!("{spec}: random init has no source")))
            }
            (_, None) => {
                return Err(Error::config("backbones.toml", format!("{spec}: missing identifier")))
            }
            (_, Some(identifier)) => {
                if r.uris.is_empty() {
                    return Err(Error::config("backbones.toml", format!("{spec}: no uris")));
                }
                Some(WeightSource {
                    identifier,
                    uris: r.uris,
                    checksum: (!r.sha256.is_empty()).then(|| r.sha256.to_ascii_lowercase()),
                    license_note: r.license_note,
                    key_prefix: r.key_prefix.unwrap_or_default(),
                })
            }
        };
        out.push(ManifestEntry { spec, source });
    }
    Ok(out)
}

fn manifest() -> &'static [ManifestEntry] {
    static M: OnceLock<Vec<ManifestEntry>> = OnceLock::new();
    M.get_or_init(|| parse_manifest(MANIFEST).expect("bundled manifest is valid"))
}

/// Every registered encoder variant.
pub fn list_backbones() -> Vec<BackboneSpec> {
    manifest().iter().map(|e| e.spec.clone()).collect()
}

pub fn manifest_entries() -> &'static [ManifestEntry] {
    manifest()
}

/// Finds the manifest row for `(family, size, pretrain)`.
pub fn lookup(spec: &BackboneSpec) -> Result<&'static ManifestEntry> {
    manifest()
        .iter()
        .find(|e| {
            e.spec.family == spec.family && e.spec.size == spec.size && e.spec.pretrain == spec.pretrain
        })
        .ok_or_else(|| Error::InvalidSpec(format!("{spec} is not a registered backbone")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn has(family: Family, size: &str, pretrain: Pretrain) -> bool {
        list_backbones()
            .iter()
            .any(|s| s.family == family && s.size == size && s.pretrain == pretrain)
    }

    #[test]
    fn covers_all_compared_variants() {
        for p in Pretrain::ALL {
            assert!(has(Family::Swin, "tiny", p), "swin-tiny {p}");
        }
        assert!(has(Family::Swin, "small", Pretrain::In1k));
        assert!(has(Family::Swin, "base", Pretrain::In1k));
        assert!(has(Family::Swin, "base", Pretrain::CityscapesSemantic));
        for (f, s) in [
            (Family::Swinv2, "tiny"),
            (Family::Vit, "tiny"),
            (Family::Vit, "base"),
            (Family::Resnet, "18"),
            (Family::Resnet, "50"),
            (Family::Convnext, "base"),
        ] {
            assert!(has(f, s, Pretrain::In1k), "{f}-{s}");
        }
        assert!(!has(Family::Vit, "tiny", Pretrain::EuroSat));
    }

    #[test]
    fn rows_are_unique_and_sourced() {
        for e in manifest_entries() {
            assert_eq!(e.source.is_some(), e.spec.pretrain != Pretrain::None, "{}", e.spec);
        }
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s = BackboneSpec::parse("swin-tiny:cityscapes-sem").unwrap();
        assert_eq!(s.pretrain, Pretrain::CityscapesSemantic);
        assert!(s.validate().is_ok());
        assert!(BackboneSpec::parse("vit-tiny:eurosat-cls").unwrap().validate().is_err());
        assert!(BackboneSpec::parse("swin").is_err());
        let mut v = BackboneSpec::new(Family::Vit, "tiny", Pretrain::In1k);
        assert_eq!(v.level_ids(12), vec![2, 5, 8, 11]);
        v.feature_level_ids = vec![1, 2, 3];
        assert!(v.validate().is_err());
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let dup = r#"
[[backbone]]
family = "swin"
size = "tiny"
pretrain = "none"
[[backbone]]
family = "swin"
size = "tiny"
pretrain = "none"
"#;
        assert!(parse_manifest(dup).is_err());
        let unsourced = r#"
[[backbone]]
family = "swin"
size = "tiny"
pretrain = "in1k-cls"
"#;
        assert!(parse_manifest(unsourced).is_err());
    }
}
