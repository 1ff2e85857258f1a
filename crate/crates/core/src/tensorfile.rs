//! Single-file archives of named tensors with a string metadata block.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: HashMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous, Some(metadata), path)
        .map_err(|e| Error::Write { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load(path: &Path, device: &Device) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
    Ok((tensors, metadata))
}

/// Entries of `tensors` under `prefix.`, with the prefix stripped.
pub fn strip_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn with_prefix(tensors: BTreeMap<String, Tensor>, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(k, v)| (format!("{prefix}.{k}"), v))
}

pub fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))
}

pub fn meta_parse<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata key `{key}` is malformed")))
}
