//! CSV and JSON emitters. Every file starts with a `meta` block naming the
//! tool version, a hash of the model config and the flags of the run; no
//! timestamps, so identical runs write identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::accounting::SavingsRow;
use crate::analysis::{GroupSegmentation, SimilaritySurface, VarianceSurface};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const TOOL_NAME: &str = "sattn";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub flags: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl Meta {
    pub fn new(command: &str, config: &ModelConfig, flags: BTreeMap<String, Value>) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: config_hash(config),
            flags,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }
}

/// First 16 hex digits of SHA-256 over the config's JSON form.
pub fn config_hash(config: &ModelConfig) -> String {
    let canonical = serde_json::to_string(config).unwrap_or_default();
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render_json(meta: &Meta, payload: impl Serialize) -> Result<String> {
    let doc = json!({ "meta": meta, "data": payload });
    serde_json::to_string_pretty(&doc)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(format!("json serialization: {e}")))
}

/// `# meta: {...}` line, a header, then one line per row.
pub fn render_csv(meta: &Meta, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let meta = serde_json::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = format!("# meta: {meta}\n{}\n", header.join(","));
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub const SIMILARITY_COLUMNS: [&str; 3] = ["layer_i", "layer_j", "similarity"];
pub const VARIANCE_COLUMNS: [&str; 4] = ["layer", "head", "variance", "wcv"];

fn float(v: f32) -> String {
    format!("{v:.9}")
}

pub fn similarity_rows(surface: &SimilaritySurface) -> Vec<Vec<String>> {
    let n = surface.n_layers();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| vec![i.to_string(), j.to_string(), float(surface.get(i, j))])
        .collect()
}

pub fn similarity_json(surface: &SimilaritySurface, groups: &GroupSegmentation) -> Value {
    let n = surface.n_layers();
    let rows: Vec<Vec<f32>> = (0..n).map(|i| surface.as_matrix().row(i).to_vec()).collect();
    json!({ "n_layers": n, "similarity": rows, "groups": groups.groups })
}

/// Rows for `(layer, head, variance, wcv)`; `wcv` is empty when it could not
/// be normalized.
pub fn variance_rows(vs: &VarianceSurface, wcv: Option<&VarianceSurface>) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(vs.n_layers() * vs.n_heads());
    for l in 0..vs.n_layers() {
        for h in 0..vs.n_heads() {
            rows.push(vec![
                l.to_string(),
                h.to_string(),
                float(vs.get(l, h)),
                wcv.map(|w| float(w.get(l, h))).unwrap_or_default(),
            ]);
        }
    }
    rows
}

pub fn variance_json(vs: &VarianceSurface, wcv: Option<&VarianceSurface>) -> Value {
    let grid = |s: &VarianceSurface| -> Vec<Vec<f32>> {
        (0..s.n_layers()).map(|l| s.as_matrix().row(l).to_vec()).collect()
    };
    json!({
        "n_layers": vs.n_layers(),
        "n_heads": vs.n_heads(),
        "variance": grid(vs),
        "wcv": wcv.map(grid),
    })
}

pub fn savings_rows(rows: &[SavingsRow]) -> Vec<Vec<String>> {
    rows.iter().map(SavingsRow::csv_fields).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::toy();
        let mut b = ModelConfig::toy();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.n_layers = 9;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn csv_layout() {
        let meta = Meta::new("budget", &ModelConfig::toy(), BTreeMap::new());
        let text = render_csv(&meta, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# meta: {\"tool\":\"sattn\""));
        assert_eq!(&lines[1..], &["a,b", "1,2"]);
    }
}
