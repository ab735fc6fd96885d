//! Checkpoints: a JSON manifest (name, group, shape, byte offset per
//! parameter, precision, config hash, stage) next to a flat little-endian
//! payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Group, JsccNet, ModelConfig, ParameterStore, Variant};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::Stage;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// byte offset into the payload
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub variant: Variant,
    pub precision: Precision,
    pub config_hash: String,
    pub frozen: Vec<Group>,
    /// payload file name, relative to the manifest
    pub payload: String,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub params: Vec<ParamRecord>,
}

/// `<dir>/<stage>.json` and `<dir>/<stage>.bin`.
pub fn paths(dir: &Path, stage: Stage) -> (PathBuf, PathBuf) {
    let stem = stage.tag().to_ascii_lowercase();
    (
        dir.join(format!("{stem}.json")),
        dir.join(format!("{stem}.bin")),
    )
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Writes the checkpoint of `stage` into `dir`, returning the manifest path.
pub fn save<T: Scalar>(
    dir: &Path,
    stage: Stage,
    variant: Variant,
    store: &ParameterStore<T>,
    config_hash: &str,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest_path, payload_path) = paths(dir, stage);
    let mut payload = Vec::with_capacity(store.numel() * T::PRECISION.byte_width());
    let mut params = Vec::with_capacity(store.len());
    for e in store.entries() {
        params.push(ParamRecord {
            name: e.name.clone(),
            group: e.group,
            shape: e.tensor.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in e.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage,
        variant,
        precision: T::PRECISION,
        config_hash: config_hash.to_string(),
        frozen: store.frozen_groups(),
        payload: payload_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        params,
    };
    fs::write(&payload_path, &payload).map_err(|e| Error::io(&payload_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

fn decode<T: Scalar, S: Scalar>(bytes: &[u8], n: usize) -> Vec<T> {
    let w = S::PRECISION.byte_width();
    (0..n)
        .map(|i| T::lit(S::read_le(&bytes[i * w..(i + 1) * w]).as_f64()))
        .collect()
}

/// Loads a checkpoint and validates it against the architecture `model`
/// describes. A config-hash mismatch is an error unless `force` is set, in
/// which case it is logged. Payloads stored at another precision are cast.
pub fn load<T: Scalar>(
    manifest_path: &Path,
    model: &ModelConfig,
    expected_hash: Option<&str>,
    force: bool,
) -> Result<(ParameterStore<T>, Manifest)> {
    let m = read_manifest(manifest_path)?;
    if let Some(expected) = expected_hash {
        if expected != m.config_hash {
            if !force {
                return Err(Error::ConfigHashMismatch {
                    expected: expected.to_string(),
                    found: m.config_hash.clone(),
                });
            }
            log::warn!(
                "{}: config hash {} differs from {expected}; loading anyway (--force)",
                manifest_path.display(),
                m.config_hash
            );
        }
    }
    let payload_path = manifest_path.with_file_name(&m.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let corrupt = |reason: String| Error::Ingest {
        path: payload_path.clone(),
        reason,
    };
    if bytes.len() != m.payload_bytes {
        return Err(corrupt(format!(
            "{} bytes, manifest says {}",
            bytes.len(),
            m.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != m.payload_sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let w = m.precision.byte_width();
    let mut store = ParameterStore::new();
    for p in &m.params {
        let n: usize = p.shape.iter().product();
        let end = p.offset + n * w;
        if end > bytes.len() {
            return Err(corrupt(format!(
                "parameter {} runs past the payload",
                p.name
            )));
        }
        let raw = &bytes[p.offset..end];
        let data = match m.precision {
            Precision::F32 => decode::<T, f32>(raw, n),
            Precision::F64 => decode::<T, f64>(raw, n),
        };
        store.insert(&p.name, Tensor::new(p.shape.clone(), data)?)?;
    }
    for &g in &m.frozen {
        store.freeze(g);
    }
    JsccNet::new(&model.clone().with_variant(m.variant))?.check_store(&store)?;
    Ok((store, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelRng;
    use rand::SeedableRng;

    fn roundtrip<T: Scalar>() {
        let cfg = ModelConfig::miniature();
        let (_, mut store) = JsccNet::init::<T>(&cfg, &mut ChannelRng::seed_from_u64(3)).unwrap();
        store.perturb(&mut ChannelRng::seed_from_u64(4), 0.5);
        store.freeze(Group::SemanticEnc);
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), Stage::Stage1, Variant::Hana, &store, "abc").unwrap();
        let (back, m) = load::<T>(&path, &cfg, Some("abc"), false).unwrap();
        assert!(back.values_equal(&store));
        assert_eq!(back.frozen_groups(), vec![Group::SemanticEnc]);
        assert_eq!(m.precision, T::PRECISION);
        assert!(matches!(
            load::<T>(&path, &cfg, Some("other"), false),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(load::<T>(&path, &cfg, Some("other"), true).is_ok());
    }

    #[test]
    fn roundtrip_is_bitwise_for_both_precisions() {
        roundtrip::<f32>();
        roundtrip::<f64>();
    }

    #[test]
    fn corrupt_payload_and_wrong_architecture_are_rejected() {
        let cfg = ModelConfig::miniature();
        let (_, store) = JsccNet::init::<f32>(&cfg, &mut ChannelRng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), Stage::Teacher, Variant::Hana, &store, "h").unwrap();
        let other = ModelConfig {
            d_prime: 16,
            ..cfg.clone()
        };
        assert!(load::<f32>(&path, &other, None, false).is_err());
        let bin = paths(dir.path(), Stage::Teacher).1;
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path, &cfg, None, false),
            Err(Error::Ingest { .. })
        ));
        assert!(matches!(
            load::<f32>(&dir.path().join("nope.json"), &cfg, None, false),
            Err(Error::Missing(_))
        ));
    }
}
