//! Pretrained weight cache: download, checksum verification and loading.
//!
//! Files live under `$BITEMPORAL_CACHE/<identifier>/`. Each file has a
//! `<file>.sha256` record next to it. A digest pinned in the manifest is
//! enforced on download; without a pin, the digest seen on first download
//! is recorded and every later load must match it. Cached files are never
//! re-downloaded silently: a mismatch is an integrity error.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::registry::WeightSource;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CACHE_ENV: &str = "BITEMPORAL_CACHE";
pub const OFFLINE_ENV: &str = "BITEMPORAL_OFFLINE";

/// Checkpoint entries that are derived buffers rather than weights.
const IGNORED_SUFFIXES: [&str; 4] = [
    "relative_position_index",
    "relative_coords_table",
    "num_batches_tracked",
    "attn_mask",
];

/// Cache root from the environment, else `~/.cache/bitemporal`.
pub fn cache_root() -> PathBuf {
    if let Some(p) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("bitemporal")
}

fn offline() -> bool {
    std::env::var_os(OFFLINE_ENV).is_some_and(|v| !v.is_empty() && v != "0")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn file_name(uri: &str) -> &str {
    uri.rsplit('/').next().unwrap_or(uri)
}

fn record_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Verifies a cached file against the pin or the first-use record.
fn verify_cached(source: &WeightSource, path: &Path) -> Result<()> {
    let found = sha256_file(path)?;
    let record = record_path(path);
    let expected = match &source.checksum {
        Some(pin) => Some(pin.clone()),
        None => fs::read_to_string(&record).ok().map(|s| s.trim().to_string()),
    };
    match expected {
        Some(exp) if exp != found => Err(Error::Integrity {
            identifier: source.identifier.clone(),
            expected: exp,
            found,
        }),
        Some(_) => Ok(()),
        None => {
            fs::write(&record, &found).map_err(|e| Error::io(&record, e))?;
            Ok(())
        }
    }
}

fn download(source: &WeightSource, uri: &str, dest: &Path) -> Result<()> {
    let resp = ureq::get(uri).call().map_err(|e| Error::WeightsUnavailable {
        identifier: source.identifier.clone(),
        reason: format!("{uri}: {e}"),
    })?;
    let mut reader = resp.into_body().into_with_config().limit(u64::MAX).reader();
    let part = dest.with_extension("part");
    let mut out = File::create(&part).map_err(|e| Error::io(&part, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::WeightsUnavailable {
            identifier: source.identifier.clone(),
            reason: format!("{uri}: {e}"),
        })?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        out.write_all(&buf[..n]).map_err(|e| Error::io(&part, e))?;
    }
    out.sync_all().map_err(|e| Error::io(&part, e))?;
    let found = hex::encode(h.finalize());
    if let Some(pin) = &source.checksum {
        if *pin != found {
            let _ = fs::remove_file(&part);
            return Err(Error::Integrity {
                identifier: source.identifier.clone(),
                expected: pin.clone(),
                found,
            });
        }
    }
    fs::rename(&part, dest).map_err(|e| Error::io(dest, e))?;
    let record = record_path(dest);
    fs::write(&record, &found).map_err(|e| Error::io(&record, e))?;
    Ok(())
}

/// Returns a verified local path for `source`, downloading if needed.
/// Downloads of one identifier are serialized with a file lock.
pub fn fetch(source: &WeightSource) -> Result<PathBuf> {
    fetch_in(source, &cache_root())
}

pub fn fetch_in(source: &WeightSource, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&source.identifier);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let lock_path = dir.join(".lock");
    let lock = File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
    lock.lock().map_err(|e| Error::io(&lock_path, e))?;

    for uri in &source.uris {
        let path = dir.join(file_name(uri));
        if path.exists() {
            verify_cached(source, &path)?;
            return Ok(path);
        }
    }
    if offline() {
        return Err(Error::WeightsUnavailable {
            identifier: source.identifier.clone(),
            reason: format!("not cached under {} and {OFFLINE_ENV} is set", dir.display()),
        });
    }
    let mut reasons = Vec::new();
    for uri in &source.uris {
        let path = dir.join(file_name(uri));
        match download(source, uri, &path) {
            Ok(()) => return Ok(path),
            Err(e @ Error::Integrity { .. }) => return Err(e),
            Err(e) => reasons.push(e.to_string()),
        }
    }
    Err(Error::WeightsUnavailable {
        identifier: source.identifier.clone(),
        reason: reasons.join("; "),
    })
}

/// Reads every tensor of a safetensors or PyTorch zip checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<HashMap<String, Tensor>> {
    let is_safetensors = path.extension().is_some_and(|e| e == "safetensors");
    if is_safetensors {
        Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
    } else {
        let all = candle_core::pickle::read_all(path)
            .or_else(|_| candle_core::pickle::read_all_with_key(path, Some("state_dict")))?;
        Ok(all.into_iter().collect())
    }
}

/// Outcome of copying checkpoint tensors into an encoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Encoder parameters absent from the checkpoint (left at random init).
    pub missing: Vec<String>,
    /// Checkpoint tensors under the prefix with no encoder counterpart.
    pub unexpected: Vec<String>,
    pub probe: String,
    pub probe_exact: bool,
}

/// Copies `tensors` into the store parameters under `store_prefix`.
///
/// A checkpoint name is `key_prefix` + the parameter name relative to
/// `store_prefix`. Only names in `optional` (matched by substring) may be
/// missing; any other gap means the checkpoint does not fit the encoder.
pub fn load_into(
    store: &ParamStore,
    store_prefix: &str,
    tensors: &HashMap<String, Tensor>,
    key_prefix: &str,
    optional: &[&str],
    probe: &str,
    identifier: &str,
) -> Result<LoadReport> {
    let names: Vec<String> = store
        .named_tensors()
        .into_keys()
        .filter(|k| k.starts_with(store_prefix))
        .collect();
    let mut report = LoadReport {
        probe: probe.to_string(),
        ..Default::default()
    };
    let mut hard_missing = Vec::new();
    let mut used = std::collections::HashSet::new();
    for name in &names {
        let rel = &name[store_prefix.len()..];
        let key = format!("{key_prefix}{rel}");
        match tensors.get(&key) {
            Some(t) => {
                store.assign(name, t).map_err(|e| Error::WeightsUnavailable {
                    identifier: identifier.to_string(),
                    reason: format!("checkpoint tensor `{key}` does not fit: {e}"),
                })?;
                used.insert(key);
                report.loaded += 1;
            }
            None => {
                if !optional.iter().any(|o| rel.contains(o)) {
                    hard_missing.push(key.clone());
                }
                report.missing.push(rel.to_string());
            }
        }
    }
    if !hard_missing.is_empty() {
        hard_missing.sort();
        let shown: Vec<_> = hard_missing.iter().take(8).cloned().collect();
        return Err(Error::WeightsUnavailable {
            identifier: identifier.to_string(),
            reason: format!(
                "checkpoint lacks {} encoder tensors, e.g. {}",
                hard_missing.len(),
                shown.join(", ")
            ),
        });
    }
    let mut unexpected: Vec<String> = tensors
        .keys()
        .filter(|k| k.starts_with(key_prefix) && !used.contains(*k))
        .filter(|k| !IGNORED_SUFFIXES.iter().any(|s| k.ends_with(s)))
        .cloned()
        .collect();
    unexpected.sort();
    report.unexpected = unexpected;

    let probe_key = format!("{key_prefix}{}", &probe[store_prefix.len().min(probe.len())..]);
    report.probe_exact = match (store.get_tensor(probe), tensors.get(&probe_key)) {
        (Some(a), Some(b)) => tensors_bit_equal(&a, &b.to_dtype(a.dtype())?)?,
        _ => false,
    };
    Ok(report)
}

pub fn tensors_bit_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() != b.shape() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let a = a.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let b = b.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}

/// Writes tensors as a safetensors file (used for tests and exports).
pub fn write_safetensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

#[allow(dead_code)]
fn io_other(msg: &str) -> io::Error {
    io::Error::other(msg.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    fn source(id: &str, pin: Option<String>) -> WeightSource {
        WeightSource {
            identifier: id.into(),
            uris: vec!["http://127.0.0.1:9/w.safetensors".into()],
            checksum: pin,
            license_note: String::new(),
            key_prefix: "m.".into(),
        }
    }

    #[test]
    fn cached_file_verified_on_first_use_then_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let src = source("x", None);
        let d = dir.path().join("x");
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("w.safetensors"), b"abc").unwrap();
        let p = fetch_in(&src, dir.path()).unwrap();
        assert!(record_path(&p).exists());
        fs::write(&p, b"abd").unwrap();
        assert!(matches!(fetch_in(&src, dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn pinned_checksum_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = source("y", Some("00".repeat(32)));
        let d = dir.path().join("y");
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("w.safetensors"), b"abc").unwrap();
        assert!(matches!(fetch_in(&src, dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn unreachable_source_with_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let src = source("z", None);
        assert!(matches!(
            fetch_in(&src, dir.path()),
            Err(Error::WeightsUnavailable { .. })
        ));
    }

    #[test]
    fn load_strips_prefix_and_reports() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let pb = store.root().pp("encoder");
        pb.get((2, 2), "a.weight", Init::ZEROS).unwrap();
        pb.get(2, "norms.stage1.weight", Init::ZEROS).unwrap();
        let mut ck = HashMap::new();
        let w = Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap();
        ck.insert("m.a.weight".to_string(), w.clone());
        ck.insert("m.head.weight".to_string(), w.clone());
        ck.insert("m.blk.relative_position_index".to_string(), w.clone());
        let r = load_into(&store, "encoder.", &ck, "m.", &["norms"], "encoder.a.weight", "t").unwrap();
        assert_eq!(r.loaded, 1);
        assert_eq!(r.missing, vec!["norms.stage1.weight".to_string()]);
        assert_eq!(r.unexpected, vec!["m.head.weight".to_string()]);
        assert!(r.probe_exact);
        // a required tensor missing is an error
        let r = load_into(&store, "encoder.", &ck, "m.", &[], "encoder.a.weight", "t");
        assert!(r.is_err());
    }
}
