//! Checkpoint files: a text manifest of `key = value` lines plus one blob
//! of little-endian `f32` values.
//!
//! ```text
//! format = scseg-checkpoint
//! version = 1
//! blob = final.ckpt.bin
//! meta.variant = m2
//! tensor.enc0.b0.conv.weight = shape=8x4x3x3x3 offset=0 bytes=3456
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{build_network, Network, UNetConfig};

const FORMAT: &str = "scseg-checkpoint";
const VERSION: &str = "1";
pub const CONFIG_KEY: &str = "network_config";
pub const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    /// Write the manifest at `path` and the blob next to it (`.bin`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let blob_name = blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("{}: no file name", path.display())))?;
        let mut text = format!("format = {FORMAT}\nversion = {VERSION}\nblob = {blob_name}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "meta entry {k:?} cannot be encoded"
                )));
            }
            text.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut bytes = Vec::new();
        for (name, t) in &self.tensors {
            if name.contains(['=', ' ', '\n']) {
                return Err(Error::Checkpoint(format!(
                    "tensor name {name:?} cannot be encoded"
                )));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            text.push_str(&format!(
                "tensor.{name} = shape={} offset={} bytes={}\n",
                shape.join("x"),
                bytes.len(),
                4 * t.numel()
            ));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        fs::write(&blob, bytes).map_err(|e| Error::io(blob.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", no + 1)))?;
            entries.push((k.to_string(), v.to_string()));
        }
        let lookup = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing key {key}")))
        };
        if lookup("format")? != FORMAT {
            return Err(bad("not a checkpoint manifest".into()));
        }
        if lookup("version")? != VERSION {
            return Err(bad(format!("unsupported version {}", lookup("version")?)));
        }
        let blob = path.with_file_name(lookup("blob")?);
        let bytes = fs::read(&blob).map_err(|e| Error::io(blob.display().to_string(), e))?;

        let mut ckpt = Checkpoint::default();
        for (k, v) in &entries {
            if let Some(key) = k.strip_prefix("meta.") {
                ckpt.meta.insert(key.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("tensor.") {
                let field = |f: &str| {
                    v.split_whitespace()
                        .find_map(|kv| kv.strip_prefix(f).and_then(|r| r.strip_prefix('=')))
                        .ok_or_else(|| bad(format!("{name}: missing {f}")))
                };
                let shape = field("shape")?
                    .split('x')
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("{name}: shape: {e}")))?;
                let offset: usize = field("offset")?
                    .parse()
                    .map_err(|e| bad(format!("{name}: offset: {e}")))?;
                let len: usize = field("bytes")?
                    .parse()
                    .map_err(|e| bad(format!("{name}: bytes: {e}")))?;
                if len != 4 * shape.iter().product::<usize>() {
                    return Err(bad(format!("{name}: byte count disagrees with shape")));
                }
                let raw = bytes
                    .get(offset..offset + len)
                    .ok_or_else(|| bad(format!("{name}: blob is truncated")))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ckpt.tensors
                    .push((name.to_string(), Tensor::from_vec(shape, data)?));
            }
        }
        Ok(ckpt)
    }

    /// Copy tensors with matching names into `store`; the first missing or
    /// mis-shaped tensor is an error naming it.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is missing", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, network expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

impl<T: Scalar> Network<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::default();
        ckpt.meta
            .insert(CONFIG_KEY.into(), serde_json::to_string(self.config())?);
        for p in self.params().iter() {
            ckpt.push(p.name.clone(), p.value.cast());
        }
        Ok(ckpt)
    }

    /// Rebuild a network from the configuration stored in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .meta
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("no network configuration recorded".into()))?;
        let cfg: UNetConfig = serde_json::from_str(cfg)?;
        let mut net = build_network(&cfg, 0)?;
        ckpt.load_into(net.params_mut())?;
        Ok(net)
    }
}
