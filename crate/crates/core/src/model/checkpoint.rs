//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SINKLAB\0"            8-byte magic
//! u32                      format version (1)
//! u64                      manifest length in bytes
//! manifest                 JSON: name, shape, dtype, byte offset, byte length per tensor
//! raw buffers              little-endian f64 values, offsets relative to this point
//! ```
//!
//! The model configuration is written next to the container as TOML
//! (`<name>.toml`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SINKLAB\0";
const VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

/// Path of the TOML config record that accompanies a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

pub fn encode(params: &Parameters) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    params.map(|name, t| {
        let len = (t.numel() * 8) as u64;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.to_string(),
            offset,
            len,
        });
        offset += len;
    });
    let manifest = serde_json::to_vec(&Manifest { tensors })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    params.map(|_, t| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Container("truncated checkpoint".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decode a container into weights shaped for `cfg`.
pub fn decode(bytes: &[u8], cfg: &ModelConfig) -> Result<Parameters> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, mlen)?)
        .map_err(|e| Error::Container(format!("manifest: {e}")))?;
    let data = &bytes[at..];

    let shapes = Parameters::<Vec<usize>>::shapes(cfg);
    let mut entries = manifest.tensors.iter();
    let mut failure = None;
    let params = shapes.map(|name, shape| {
        let fail = |msg: String| Error::Container(msg);
        let result = (|| {
            let e = entries
                .next()
                .ok_or_else(|| fail(format!("missing tensor {name}")))?;
            if e.name != name || &e.shape != shape || e.dtype != DTYPE {
                return Err(fail(format!(
                    "expected {name} {shape:?}, found {} {:?} ({})",
                    e.name, e.shape, e.dtype
                )));
            }
            let numel: usize = shape.iter().product();
            if e.len != (numel * 8) as u64 {
                return Err(fail(format!("{name}: byte length {} for {numel} values", e.len)));
            }
            let start = e.offset as usize;
            let raw = data
                .get(start..start + e.len as usize)
                .ok_or_else(|| fail(format!("{name}: buffer out of bounds")))?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.clone(), vals)
        })();
        result.unwrap_or_else(|err| {
            failure.get_or_insert(err);
            Tensor::zeros(&[0])
        })
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if entries.next().is_some() {
        return Err(Error::Container("checkpoint holds extra tensors".into()));
    }
    Ok(params)
}

/// Write the container and its TOML config record.
pub fn save(path: &Path, params: &Parameters, cfg: &ModelConfig) -> Result<()> {
    params.check_shapes(cfg)?;
    let bytes = encode(params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
    cfg.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes, &cfg)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ffn: 12,
            max_seq: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let mut params = Parameters::init(&cfg, 11).unwrap();
        // values that are easy to corrupt in text formats
        params.embedding.data_mut()[0] = -0.0;
        params.embedding.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        params.embedding.data_mut()[2] = 0.1 + 0.2;
        let bytes = encode(&params).unwrap();
        let back = decode(&bytes, &cfg).unwrap();
        let bits = |p: &Parameters| {
            let mut v = Vec::new();
            p.map(|_, t| v.extend(t.data().iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&params), bits(&back));
    }

    #[test]
    fn config_mismatch_is_a_container_error() {
        let cfg = small();
        let bytes = encode(&Parameters::init(&cfg, 1).unwrap()).unwrap();
        let other = ModelConfig {
            norm_kind: NormKind::Sandwich,
            ..cfg.clone()
        };
        assert!(matches!(decode(&bytes, &other), Err(Error::Container(_))));
        let wider = ModelConfig { d_model: 10, ..cfg };
        assert!(matches!(decode(&bytes, &wider), Err(Error::Container(_))));
    }

    #[test]
    fn truncated_or_foreign_bytes_are_rejected() {
        let cfg = small();
        let bytes = encode(&Parameters::init(&cfg, 1).unwrap()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], &cfg).is_err());
        assert!(decode(b"not a checkpoint at all", &cfg).is_err());
    }
}
