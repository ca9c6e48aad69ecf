//! On-disk formats.
//!
//! Weights are a JSON manifest plus a companion blob (same path, `.bin`
//! extension) of little-endian row-major f32 tensors, each starting at a
//! 64-byte aligned offset:
//!
//! ```text
//! {"version":1,"config":{...},"tensors":[{"name","shape","dtype":"f32","offset","nbytes"},...]}
//! ```
//!
//! Token streams are text files with one decimal token id per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{LayerWeights, ModelConfig, TokenId, Weights};

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f32]) {
    (name, vec![m.rows(), m.cols()], m.data())
}

fn vector(name: String, v: &[f32]) -> (String, Vec<usize>, &[f32]) {
    (name, vec![v.len()], v)
}

fn named_tensors(weights: &Weights) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = vec![mat("embed".into(), &weights.embed)];
    for (i, l) in weights.layers.iter().enumerate() {
        out.push(mat(format!("layers.{i}.wq"), &l.wq));
        out.push(mat(format!("layers.{i}.wk"), &l.wk));
        out.push(mat(format!("layers.{i}.wv"), &l.wv));
        out.push(mat(format!("layers.{i}.wo"), &l.wo));
        out.push(mat(format!("layers.{i}.w1"), &l.w1));
        out.push(mat(format!("layers.{i}.w2"), &l.w2));
        out.push(mat(format!("layers.{i}.w3"), &l.w3));
        out.push(vector(format!("layers.{i}.norm1"), &l.norm1));
        out.push(vector(format!("layers.{i}.norm2"), &l.norm2));
    }
    out.push(vector("final_norm".into(), &weights.final_norm));
    out.push(mat("lm_head".into(), &weights.lm_head));
    out
}

/// Serializes to an in-memory manifest and blob.
pub fn encode(config: &ModelConfig, weights: &Weights) -> Result<(Manifest, Vec<u8>)> {
    config.validate()?;
    weights.validate(config)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in named_tensors(weights) {
        let pad = (ALIGNMENT - blob.len() % ALIGNMENT) % ALIGNMENT;
        blob.resize(blob.len() + pad, 0);
        let offset = blob.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset,
            nbytes: data.len() * 4,
        });
    }
    Ok((
        Manifest {
            version: FORMAT_VERSION,
            config: config.clone(),
            tensors,
        },
        blob,
    ))
}

/// Rebuilds weights from a manifest and blob, checking every declared tensor.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<(ModelConfig, Weights)> {
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", manifest.version)));
    }
    let config = manifest.config.clone();
    config.validate()?;
    let lookup = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        if entry.shape != shape {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", entry.shape)));
        }
        let count: usize = shape.iter().product();
        if entry.nbytes != count * 4 {
            return Err(Error::Format(format!("{name}: nbytes {} for {count} values", entry.nbytes)));
        }
        if entry.offset % ALIGNMENT != 0 {
            return Err(Error::Format(format!("{name}: offset {} is not 64-byte aligned", entry.offset)));
        }
        let bytes = blob
            .get(entry.offset..entry.offset + entry.nbytes)
            .ok_or_else(|| Error::Format(format!("{name}: extends past end of blob")))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        Matrix::new(rows, cols, lookup(name, &[rows, cols])?)
            .map_err(|e| Error::Format(format!("{name}: {e}")))
    };
    let c = &config;
    let vector = |name: &str| lookup(name, &[c.d_model]);
    let layers = (0..c.n_layers)
        .map(|i| {
            Ok(LayerWeights {
                wq: mat(&format!("layers.{i}.wq"), c.d_model, c.q_dim())?,
                wk: mat(&format!("layers.{i}.wk"), c.d_model, c.kv_dim())?,
                wv: mat(&format!("layers.{i}.wv"), c.d_model, c.kv_dim())?,
                wo: mat(&format!("layers.{i}.wo"), c.q_dim(), c.d_model)?,
                w1: mat(&format!("layers.{i}.w1"), c.d_model, c.d_ff)?,
                w2: mat(&format!("layers.{i}.w2"), c.d_ff, c.d_model)?,
                w3: mat(&format!("layers.{i}.w3"), c.d_model, c.d_ff)?,
                norm1: vector(&format!("layers.{i}.norm1"))?,
                norm2: vector(&format!("layers.{i}.norm2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = Weights {
        embed: mat("embed", c.vocab_size, c.d_model)?,
        layers,
        final_norm: vector("final_norm")?,
        lm_head: mat("lm_head", c.d_model, c.vocab_size)?,
    };
    Ok((config, weights))
}

/// Writes `<manifest>` and its `.bin` companion.
pub fn save_model(manifest_path: &Path, config: &ModelConfig, weights: &Weights) -> Result<()> {
    let (manifest, blob) = encode(config, weights)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    let blob_path = blob_path(manifest_path);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

pub fn load_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))
}

pub fn load_model(manifest_path: &Path) -> Result<(ModelConfig, Weights)> {
    let manifest = load_manifest(manifest_path)?;
    let blob_path = blob_path(manifest_path);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode(&manifest, &blob)
}

pub fn parse_tokens(text: &str) -> Result<Vec<TokenId>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<TokenId>()
                .map_err(|_| Error::Input(format!("line {}: `{}` is not a token id", i + 1, l.trim())))
        })
        .collect()
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn format_tokens(ids: &[TokenId]) -> String {
    ids.iter().map(|id| format!("{id}\n")).collect()
}

pub fn write_tokens(path: &Path, ids: &[TokenId]) -> Result<()> {
    fs::write(path, format_tokens(ids)).map_err(|e| Error::io(path, e))
}

/// Token files of a corpus directory, sorted by file name. Sample ids are
/// positions in that order.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, Vec<TokenId>)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("corpus directory {} is empty", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_tokens(&p)?))
        })
        .collect()
}
