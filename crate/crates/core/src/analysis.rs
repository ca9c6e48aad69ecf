//! Attention-pattern measurements over a corpus: layer×layer cosine
//! similarity of (padded, aggregated) attention matrices, per-head variance
//! of attention weights and its weighted cumulative form, and contiguous
//! grouping of similar layers.
//!
//! Reductions over samples always run in ascending `sample_id` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_similarity, variance, Matrix, RowStochasticMatrix};
use crate::model::{forward_full, ModelConfig, TokenId, Weights};

/// Default similarity threshold for layer grouping.
pub const DEFAULT_TAU: f32 = 0.8;

/// Captured per-layer, per-head attention weights of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub sample_id: usize,
    /// `layers[l][h]` is a `T × T` causal row-stochastic matrix.
    pub layers: Vec<Vec<RowStochasticMatrix>>,
}

impl AttentionRecord {
    /// Validates that every matrix is square and shares one sequence length.
    pub fn new(sample_id: usize, layers: Vec<Vec<RowStochasticMatrix>>) -> Result<Self> {
        let record = Self { sample_id, layers };
        record.seq_len()?;
        Ok(record)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    fn seq_len(&self) -> Result<usize> {
        let t = self
            .layers
            .first()
            .and_then(|l| l.first())
            .map(RowStochasticMatrix::rows)
            .ok_or_else(|| Error::Input(format!("sample {} has no attention matrices", self.sample_id)))?;
        let n_heads = self.n_heads();
        for (l, heads) in self.layers.iter().enumerate() {
            if heads.len() != n_heads {
                return Err(Error::Shape(format!(
                    "sample {} layer {l} has {} heads, expected {n_heads}",
                    self.sample_id,
                    heads.len()
                )));
            }
            if heads.iter().any(|m| m.rows() != t || m.cols() != t) {
                return Err(Error::Shape(format!(
                    "sample {} layer {l} is not uniformly {t}x{t}",
                    self.sample_id
                )));
            }
        }
        Ok(t)
    }
}

/// Runs the model on one sample with capture on.
pub fn capture_record(
    config: &ModelConfig,
    weights: &Weights,
    sample_id: usize,
    token_ids: &[TokenId],
) -> Result<AttentionRecord> {
    let out = forward_full(config, weights, token_ids, true)?;
    let mut record = out
        .record
        .ok_or_else(|| Error::Sequencing("forward pass did not capture attention".into()))?;
    record.sample_id = sample_id;
    Ok(record)
}

/// Places `m` in the top-left corner of a `maxlen × maxlen` zero matrix.
pub fn pad_to(m: &Matrix, maxlen: usize) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!("cannot pad non-square {}x{}", m.rows(), m.cols())));
    }
    if m.rows() > maxlen {
        return Err(Error::Shape(format!("{}x{} does not fit in {maxlen}", m.rows(), m.cols())));
    }
    let mut out = vec![0.0f32; maxlen * maxlen];
    for i in 0..m.rows() {
        out[i * maxlen..i * maxlen + m.cols()].copy_from_slice(m.row(i));
    }
    Matrix::new(maxlen, maxlen, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    Mean,
    PerHead(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAggregation {
    /// Average padded matrices over samples, then compare layers.
    MeanMatrices,
    /// Compare layers per sample, then average the similarities.
    MeanSimilarities,
}

/// Symmetric layer×layer cosine similarities with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySurface {
    values: Matrix,
}

impl SimilaritySurface {
    /// Validates symmetry (1e-6), unit diagonal (1e-6) and range.
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        let n = values.rows();
        if values.cols() != n {
            return Err(Error::Shape("similarity surface must be square".into()));
        }
        for i in 0..n {
            if (values.get(i, i) - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("diagonal entry {i} is {}", values.get(i, i))));
            }
            for j in 0..n {
                let v = values.get(i, j);
                if !(-1.0..=1.0).contains(&v) || (v - values.get(j, i)).abs() > 1e-6 {
                    return Err(Error::Domain(format!("entry ({i},{j}) = {v} breaks symmetry or range")));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn n_layers(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }
}

fn sorted(records: &[AttentionRecord]) -> Result<Vec<&AttentionRecord>> {
    if records.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut refs: Vec<&AttentionRecord> = records.iter().collect();
    refs.sort_by_key(|r| r.sample_id);
    let (n_layers, n_heads) = (refs[0].n_layers(), refs[0].n_heads());
    for r in &refs {
        r.seq_len()?;
        if r.n_layers() != n_layers || r.n_heads() != n_heads {
            return Err(Error::Shape(format!(
                "sample {} has {}x{} layers/heads, corpus has {n_layers}x{n_heads}",
                r.sample_id,
                r.n_layers(),
                r.n_heads()
            )));
        }
    }
    Ok(refs)
}

fn aggregate_heads(heads: &[RowStochasticMatrix], agg: HeadAggregation) -> Result<Matrix> {
    match agg {
        HeadAggregation::PerHead(h) => heads
            .get(h)
            .map(|m| m.as_matrix().clone())
            .ok_or_else(|| Error::Input(format!("head {h} out of range for {} heads", heads.len()))),
        HeadAggregation::Mean => {
            let first = heads[0].as_matrix();
            let mut acc = vec![0.0f32; first.data().len()];
            for m in heads {
                for (a, &v) in acc.iter_mut().zip(m.as_matrix().data()) {
                    *a += v;
                }
            }
            let n = heads.len() as f32;
            Matrix::new(first.rows(), first.cols(), acc.into_iter().map(|v| v / n).collect())
        }
    }
}

fn pairwise_cosines(layers: &[Matrix]) -> Result<Matrix> {
    let n = layers.len();
    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let c = cosine_similarity(layers[i].data(), layers[j].data())?;
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    Matrix::new(n, n, out)
}

/// Layer×layer similarity of attention matrices across a corpus.
pub fn similarity_surface(
    records: &[AttentionRecord],
    head_agg: HeadAggregation,
    sample_agg: SampleAggregation,
) -> Result<SimilaritySurface> {
    let records = sorted(records)?;
    let n_layers = records[0].n_layers();
    let n_samples = records.len() as f32;
    let values = match sample_agg {
        SampleAggregation::MeanMatrices => {
            let maxlen = records
                .iter()
                .map(|r| r.layers[0][0].rows())
                .max()
                .unwrap_or(0);
            let mut means = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let mut acc = vec![0.0f32; maxlen * maxlen];
                for r in &records {
                    let padded = pad_to(&aggregate_heads(&r.layers[l], head_agg)?, maxlen)?;
                    for (a, &v) in acc.iter_mut().zip(padded.data()) {
                        *a += v;
                    }
                }
                means.push(Matrix::new(
                    maxlen,
                    maxlen,
                    acc.into_iter().map(|v| v / n_samples).collect(),
                )?);
            }
            pairwise_cosines(&means)?
        }
        SampleAggregation::MeanSimilarities => {
            let mut acc = vec![0.0f32; n_layers * n_layers];
            for r in &records {
                let per_layer = r
                    .layers
                    .iter()
                    .map(|heads| aggregate_heads(heads, head_agg))
                    .collect::<Result<Vec<_>>>()?;
                for (a, &v) in acc.iter_mut().zip(pairwise_cosines(&per_layer)?.data()) {
                    *a += v;
                }
            }
            Matrix::new(
                n_layers,
                n_layers,
                acc.into_iter().map(|v| (v / n_samples).clamp(-1.0, 1.0)).collect(),
            )?
        }
    };
    SimilaritySurface::from_matrix(values)
}

/// Non-negative `n_layers × n_heads` surface.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSurface {
    values: Matrix,
}

impl VarianceSurface {
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("negative variance {v}")));
        }
        Ok(Self { values })
    }

    pub fn n_layers(&self) -> usize {
        self.values.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, layer: usize, head: usize) -> f32 {
        self.values.get(layer, head)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }
}

/// Variance of every unmasked attention weight of each (layer, head),
/// pooled over the corpus.
pub fn variance_surface(records: &[AttentionRecord]) -> Result<VarianceSurface> {
    let records = sorted(records)?;
    let (n_layers, n_heads) = (records[0].n_layers(), records[0].n_heads());
    let mut out = Vec::with_capacity(n_layers * n_heads);
    for l in 0..n_layers {
        for h in 0..n_heads {
            let pooled: Vec<f32> = records.iter().flat_map(|r| r.layers[l][h].unmasked()).collect();
            out.push(variance(&pooled)?);
        }
    }
    VarianceSurface::from_matrix(Matrix::new(n_layers, n_heads, out)?)
}

/// Suffix sums over layers, each head normalized by its mean over layers.
pub fn weighted_cumulative_variance(vs: &VarianceSurface) -> Result<VarianceSurface> {
    let (n_layers, n_heads) = (vs.n_layers(), vs.n_heads());
    let mut out = vec![0.0f32; n_layers * n_heads];
    let mut zero_heads = Vec::new();
    for h in 0..n_heads {
        let mut suffix = vec![0.0f32; n_layers];
        let mut running = 0.0f32;
        for l in (0..n_layers).rev() {
            running += vs.get(l, h);
            suffix[l] = running;
        }
        let mut total = 0.0f32;
        for &s in &suffix {
            total += s;
        }
        let mean = total / n_layers as f32;
        if mean == 0.0 {
            zero_heads.push(h);
            continue;
        }
        for (l, &s) in suffix.iter().enumerate() {
            out[l * n_heads + h] = s / mean;
        }
    }
    if !zero_heads.is_empty() {
        return Err(Error::Normalization { heads: zero_heads });
    }
    VarianceSurface::from_matrix(Matrix::new(n_layers, n_heads, out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerGroup {
    pub start: usize,
    pub end: usize,
    /// Mean pairwise similarity inside the group; 1 for a single layer.
    pub mean_similarity: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSegmentation {
    pub groups: Vec<LayerGroup>,
}

/// Greedy contiguous grouping: a layer joins the current group while its
/// mean similarity to the group's layers is at least `tau`.
pub fn segment_groups(surface: &SimilaritySurface, tau: f32) -> Result<GroupSegmentation> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n = surface.n_layers();
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for l in 1..n {
        let mut sum = 0.0f32;
        for m in start..l {
            sum += surface.get(l, m);
        }
        if sum / (l - start) as f32 >= tau {
            continue;
        }
        bounds.push((start, l - 1));
        start = l;
    }
    if n > 0 {
        bounds.push((start, n - 1));
    }
    let groups = bounds
        .into_iter()
        .map(|(start, end)| {
            let mut sum = 0.0f32;
            let mut pairs = 0usize;
            for i in start..=end {
                for j in i + 1..=end {
                    sum += surface.get(i, j);
                    pairs += 1;
                }
            }
            LayerGroup {
                start,
                end,
                mean_similarity: if pairs == 0 { 1.0 } else { sum / pairs as f32 },
            }
        })
        .collect();
    Ok(GroupSegmentation { groups })
}
