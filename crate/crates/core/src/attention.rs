//! Per-layer attention strategies and the strategy-aware KV cache.
//!
//! Four strategies compose here:
//! - standard multi-head attention, with query heads optionally grouped onto
//!   fewer KV heads (GQA, or MQA when there is a single KV head);
//! - cross-layer KV reuse, where a child layer attends with its own queries
//!   against a lower parent layer's cached keys and values;
//! - shared attention, where the first layer of a span (the anchor) computes
//!   softmax weights once and every later layer of the span (a member)
//!   applies those same weights to its own values.
//!
//! Members never compute queries, keys, scores or softmax, and never store
//! keys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{causal_softmax_counted, dot, Matrix, RowStochasticMatrix};

/// Inclusive layer range sharing one set of attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Plan(format!("span {start}:{end} ends before it starts")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

/// Parses the inclusive `a:b` form.
impl FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Plan(format!("span `{s}` is not of the form a:b")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Plan(format!("span `{s}` has a non-integer bound")))
        };
        Span::new(parse(a)?, parse(b)?)
    }
}

/// Ordered, pairwise-disjoint sharing spans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<[usize; 2]>", into = "Vec<[usize; 2]>")]
pub struct SharingPlan {
    spans: Vec<Span>,
}

impl SharingPlan {
    /// Sorts the spans and rejects overlaps.
    pub fn new(mut spans: Vec<Span>) -> Result<Self> {
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(Error::Plan(format!("spans {} and {} overlap", pair[0], pair[1])));
            }
        }
        Ok(Self { spans })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// One singleton span per layer.
    pub fn singletons(n_layers: usize) -> Self {
        Self {
            spans: (0..n_layers).map(|l| Span { start: l, end: l }).collect(),
        }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self.spans.last() {
            Some(last) if last.end >= n_layers => Err(Error::Plan(format!(
                "span {last} out of range for {n_layers} layers"
            ))),
            _ => Ok(()),
        }
    }

    pub fn span_of(&self, layer: usize) -> Option<(usize, Span)> {
        self.spans
            .iter()
            .copied()
            .enumerate()
            .find(|(_, s)| s.contains(layer))
    }

    /// Layers that skip key storage: `Σ (len - 1)` over spans.
    pub fn shared_layers(&self) -> usize {
        self.spans.iter().map(|s| s.len() - 1).sum()
    }
}

impl TryFrom<Vec<[usize; 2]>> for SharingPlan {
    type Error = Error;

    fn try_from(v: Vec<[usize; 2]>) -> Result<Self> {
        SharingPlan::new(
            v.into_iter()
                .map(|[a, b]| Span::new(a, b))
                .collect::<Result<_>>()?,
        )
    }
}

impl From<SharingPlan> for Vec<[usize; 2]> {
    fn from(p: SharingPlan) -> Self {
        p.spans.iter().map(|s| [s.start, s.end]).collect()
    }
}

impl fmt::Display for SharingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.spans.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.spans.iter().map(Span::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Standard,
    Anchor { span: usize },
    Member { span: usize, anchor: usize },
}

impl LayerRole {
    pub fn is_member(&self) -> bool {
        matches!(self, LayerRole::Member { .. })
    }
}

/// Assigns every layer its role under `plan`: span starts anchor, the rest of
/// each span are members, and everything else is standard.
pub fn plan_roles(plan: &SharingPlan, n_layers: usize) -> Result<Vec<LayerRole>> {
    plan.validate(n_layers)?;
    let mut roles = vec![LayerRole::Standard; n_layers];
    for (id, span) in plan.spans().iter().enumerate() {
        roles[span.start] = LayerRole::Anchor { span: id };
        for role in &mut roles[span.start + 1..=span.end] {
            *role = LayerRole::Member {
                span: id,
                anchor: span.start,
            };
        }
    }
    Ok(roles)
}

/// Cross-layer KV sharing: child layer → parent layer whose K/V it reads.
///
/// Entries with `parent == child` are accepted and behave as standard layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<[usize; 2]>", into = "Vec<[usize; 2]>")]
pub struct ClaMap {
    parents: BTreeMap<usize, usize>,
}

impl ClaMap {
    pub fn new(entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut parents = BTreeMap::new();
        for (child, parent) in entries {
            if parent > child {
                return Err(Error::Config(format!(
                    "cross-layer parent {parent} is above child {child}"
                )));
            }
            if parents.insert(child, parent).is_some() {
                return Err(Error::Config(format!("layer {child} has two cross-layer parents")));
            }
        }
        let map = Self { parents };
        for (&child, &parent) in &map.parents {
            if child != parent && map.parent_of(parent).is_some() {
                return Err(Error::Config(format!(
                    "cross-layer parent {parent} of layer {child} is itself a child"
                )));
            }
        }
        Ok(map)
    }

    /// Adjacent pairs: every odd layer reads the even layer below it.
    pub fn pairs(n_layers: usize) -> Self {
        Self {
            parents: (1..n_layers).step_by(2).map(|l| (l, l - 1)).collect(),
        }
    }

    /// Parent of `layer` when it is a true child (`parent != layer`).
    pub fn parent_of(&self, layer: usize) -> Option<usize> {
        self.parents.get(&layer).copied().filter(|&p| p != layer)
    }

    /// Layers participating in a real cross-layer share, as child or parent.
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .filter(|(c, p)| c != p)
            .flat_map(|(&c, &p)| [c, p])
    }

    pub fn is_empty(&self) -> bool {
        self.parents.iter().all(|(c, p)| c == p)
    }

    pub fn validate(&self, n_layers: usize, plan: &SharingPlan) -> Result<()> {
        for (&child, &parent) in &self.parents {
            if child >= n_layers {
                return Err(Error::Config(format!(
                    "cross-layer child {child} out of range for {n_layers} layers"
                )));
            }
            if child != parent {
                for l in [child, parent] {
                    if let Some((_, span)) = plan.span_of(l) {
                        return Err(Error::Config(format!(
                            "layer {l} is in cross-layer sharing and in span {span}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<[usize; 2]>> for ClaMap {
    type Error = Error;

    fn try_from(v: Vec<[usize; 2]>) -> Result<Self> {
        ClaMap::new(v.into_iter().map(|[c, p]| (c, p)))
    }
}

impl From<ClaMap> for Vec<[usize; 2]> {
    fn from(m: ClaMap) -> Self {
        m.parents.into_iter().map(|(c, p)| [c, p]).collect()
    }
}

/// What a layer keeps in the KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheSlot {
    KeysAndValues,
    /// Shared-attention member: values only.
    ValuesOnly,
    /// Cross-layer child: reads the parent's entries, stores nothing.
    Alias { parent: usize },
}

pub fn cache_slots(roles: &[LayerRole], cla: &ClaMap) -> Vec<CacheSlot> {
    roles
        .iter()
        .enumerate()
        .map(|(l, role)| match (role, cla.parent_of(l)) {
            (LayerRole::Member { .. }, _) => CacheSlot::ValuesOnly,
            (_, Some(parent)) => CacheSlot::Alias { parent },
            _ => CacheSlot::KeysAndValues,
        })
        .collect()
}

#[derive(Debug, Clone)]
struct LayerEntries {
    slot: CacheSlot,
    keys: Option<Vec<f32>>,
    values: Option<Vec<f32>>,
    len: usize,
}

/// Token-major per-layer key/value store (`[T × n_kv_heads × d_head]`), plus
/// the anchor attention weights published for the step in flight.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_kv_heads: usize,
    d_head: usize,
    layers: Vec<LayerEntries>,
    step_weights: BTreeMap<usize, Vec<RowStochasticMatrix>>,
}

impl KvCache {
    pub fn new(slots: &[CacheSlot], n_kv_heads: usize, d_head: usize) -> Self {
        let layers = slots
            .iter()
            .map(|&slot| LayerEntries {
                slot,
                keys: matches!(slot, CacheSlot::KeysAndValues).then(Vec::new),
                values: (!matches!(slot, CacheSlot::Alias { .. })).then(Vec::new),
                len: 0,
            })
            .collect();
        Self {
            n_kv_heads,
            d_head,
            layers,
            step_weights: BTreeMap::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn slot(&self, layer: usize) -> CacheSlot {
        self.layers[layer].slot
    }

    fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Appends `n_tokens` positions to `layer`. `keys` must be present exactly
    /// when the layer stores keys, and likewise `values`.
    pub fn append(
        &mut self,
        layer: usize,
        n_tokens: usize,
        keys: Option<&[f32]>,
        values: Option<&[f32]>,
    ) -> Result<()> {
        let kv_dim = self.kv_dim();
        let entry = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Contract(format!("no cache layer {layer}")))?;
        let check = |name: &str, stored: bool, given: Option<&[f32]>| -> Result<()> {
            match (stored, given) {
                (true, None) => Err(Error::Contract(format!("layer {layer} needs {name}"))),
                (false, Some(_)) => Err(Error::Contract(format!(
                    "{name} supplied to layer {layer}, which does not store them ({:?})",
                    entry.slot
                ))),
                (true, Some(v)) if v.len() != n_tokens * kv_dim => Err(Error::Shape(format!(
                    "{name} for {n_tokens} tokens need {} values, got {}",
                    n_tokens * kv_dim,
                    v.len()
                ))),
                _ => Ok(()),
            }
        };
        check("keys", entry.keys.is_some(), keys)?;
        check("values", entry.values.is_some(), values)?;
        if let (Some(store), Some(k)) = (entry.keys.as_mut(), keys) {
            store.extend_from_slice(k);
        }
        if let (Some(store), Some(v)) = (entry.values.as_mut(), values) {
            store.extend_from_slice(v);
        }
        entry.len += n_tokens;
        Ok(())
    }

    /// Tokens appended to `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    /// Common token count, or `None` if layers disagree.
    pub fn token_count(&self) -> Option<usize> {
        let first = self.layers.first().map_or(0, |l| l.len);
        self.layers.iter().all(|l| l.len == first).then_some(first)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn keys(&self, layer: usize) -> Option<&[f32]> {
        self.layers[layer].keys.as_deref()
    }

    pub fn values(&self, layer: usize) -> Option<&[f32]> {
        self.layers[layer].values.as_deref()
    }

    /// Stored key scalars across all layers.
    pub fn key_entries(&self) -> usize {
        self.layers.iter().filter_map(|l| l.keys.as_ref()).map(Vec::len).sum()
    }

    /// Stored value scalars across all layers.
    pub fn value_entries(&self) -> usize {
        self.layers.iter().filter_map(|l| l.values.as_ref()).map(Vec::len).sum()
    }

    pub fn key_bytes(&self, layer: usize) -> u64 {
        self.keys(layer).map_or(0, |k| (k.len() * 4) as u64)
    }

    pub fn value_bytes(&self, layer: usize) -> u64 {
        self.values(layer).map_or(0, |v| (v.len() * 4) as u64)
    }

    /// Per-KV-head `[T × d_head]` key and value matrices stored by `layer`.
    pub fn head_matrices(&self, layer: usize) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let entry = &self.layers[layer];
        let (Some(keys), Some(values)) = (&entry.keys, &entry.values) else {
            return Err(Error::Sequencing(format!(
                "layer {layer} holds no keys/values in the cache"
            )));
        };
        Ok((
            split_heads(keys, entry.len, self.n_kv_heads, self.d_head),
            split_heads(values, entry.len, self.n_kv_heads, self.d_head),
        ))
    }

    /// Per-KV-head value matrices of `layer`.
    pub fn value_heads(&self, layer: usize) -> Result<Vec<Matrix>> {
        let entry = &self.layers[layer];
        let values = entry.values.as_ref().ok_or_else(|| {
            Error::Sequencing(format!("layer {layer} holds no values in the cache"))
        })?;
        Ok(split_heads(values, entry.len, self.n_kv_heads, self.d_head))
    }

    /// Makes an anchor's weights for the current step available to its members.
    pub fn publish_weights(&mut self, anchor: usize, weights: Vec<RowStochasticMatrix>) {
        self.step_weights.insert(anchor, weights);
    }

    pub fn shared_weights(&self, anchor: usize) -> Result<&[RowStochasticMatrix]> {
        self.step_weights.get(&anchor).map(Vec::as_slice).ok_or_else(|| {
            Error::Sequencing(format!("anchor layer {anchor} has not published weights this step"))
        })
    }

    /// Drops published weights; called when a step completes.
    pub fn end_step(&mut self) {
        self.step_weights.clear();
    }
}

/// Splits a token-major `[T × heads × d]` buffer into per-head `[T × d]` matrices.
pub fn split_heads(flat: &[f32], tokens: usize, heads: usize, d: usize) -> Vec<Matrix> {
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(tokens * d);
            for t in 0..tokens {
                let base = (t * heads + h) * d;
                out.extend_from_slice(&flat[base..base + d]);
            }
            Matrix::from_raw(tokens, d, out)
        })
        .collect()
}

/// Work done inside one attention call, in flops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub scores: u64,
    pub softmax: u64,
    pub mix: u64,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[T × n_heads·d_head]`, heads concatenated; output projection is the caller's job.
    pub hidden: Matrix,
    /// Per-head weights that produced `hidden`.
    pub weights: Vec<RowStochasticMatrix>,
    pub flops: AttentionFlops,
}

/// Softmax cost per unmasked element: exponent, running sum, division.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 3;

fn check_heads(q_heads: usize, kv_heads: usize) -> Result<usize> {
    if kv_heads == 0 || !q_heads.is_multiple_of(kv_heads) {
        return Err(Error::Shape(format!(
            "{q_heads} query heads cannot be grouped onto {kv_heads} kv heads"
        )));
    }
    Ok(q_heads / kv_heads)
}

/// Scaled dot-product attention with causal masking.
///
/// `q` holds one `[T × d]` matrix per query head; `k` and `v` hold one
/// `[S × d]` matrix per KV head with `S >= T`, the queries being the last `T`
/// positions. Query head `h` reads KV head `h / (n_heads / n_kv_heads)`.
pub fn attend_standard(
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    scale: f32,
) -> Result<AttentionOutput> {
    let group = check_heads(q.len(), k.len())?;
    if v.len() != k.len() {
        return Err(Error::Shape(format!("{} key heads but {} value heads", k.len(), v.len())));
    }
    let mut flops = AttentionFlops::default();
    let mut weights = Vec::with_capacity(q.len());
    for (h, qh) in q.iter().enumerate() {
        let kh = &k[h / group];
        if qh.cols() != kh.cols() || kh.rows() != v[h / group].rows() || kh.rows() < qh.rows() {
            return Err(Error::Shape(format!(
                "head {h}: q {}x{}, k {}x{}, v {}x{}",
                qh.rows(),
                qh.cols(),
                kh.rows(),
                kh.cols(),
                v[h / group].rows(),
                v[h / group].cols()
            )));
        }
        let (scores, score_flops) = causal_scores(qh, kh);
        let (a, unmasked) = causal_softmax_counted(&scores, scale);
        flops.scores += score_flops;
        flops.softmax += SOFTMAX_FLOPS_PER_ELEMENT * unmasked;
        weights.push(a);
    }
    let (hidden, mix) = mix_heads(&weights, v)?;
    flops.mix = mix;
    Ok(AttentionOutput {
        hidden,
        weights,
        flops,
    })
}

/// Applies weights published by an anchor to this layer's own values.
/// No scores or softmax are computed.
pub fn attend_shared(a: &[RowStochasticMatrix], v: &[Matrix]) -> Result<AttentionOutput> {
    check_heads(a.len(), v.len())?;
    let (hidden, mix) = mix_heads(a, v)?;
    Ok(AttentionOutput {
        hidden,
        weights: a.to_vec(),
        flops: AttentionFlops {
            mix,
            ..AttentionFlops::default()
        },
    })
}

/// Attention with this layer's queries against `parent`'s cached keys and
/// values. `parent == layer` reads the layer's own entries.
pub fn attend_cla(
    layer: usize,
    parent: usize,
    q: &[Matrix],
    cache: &KvCache,
    scale: f32,
) -> Result<AttentionOutput> {
    if parent > layer {
        return Err(Error::Sequencing(format!(
            "layer {layer} cannot read keys of later layer {parent}"
        )));
    }
    let (k, v) = cache.head_matrices(parent)?;
    if k.first().map_or(0, Matrix::rows) == 0 {
        return Err(Error::Sequencing(format!("parent layer {parent} has no cached tokens")));
    }
    attend_standard(q, &k, &v, scale)
}

/// Query/key dot products on and below the causal diagonal only.
fn causal_scores(q: &Matrix, k: &Matrix) -> (Matrix, u64) {
    let (t, s, d) = (q.rows(), k.rows(), q.cols());
    let offset = s - t;
    let mut out = vec![0.0f32; t * s];
    let mut flops = 0u64;
    for i in 0..t {
        let qi = q.row(i);
        for j in 0..=i + offset {
            out[i * s + j] = dot(qi, k.row(j));
        }
        flops += 2 * (d * (i + offset + 1)) as u64;
    }
    (Matrix::from_raw(t, s, out), flops)
}

/// `A_h · V_{g(h)}` per head over unmasked positions, heads concatenated.
fn mix_heads(weights: &[RowStochasticMatrix], v: &[Matrix]) -> Result<(Matrix, u64)> {
    let group = check_heads(weights.len(), v.len())?;
    let t = weights.first().map_or(0, RowStochasticMatrix::rows);
    let d = v.first().map_or(0, Matrix::cols);
    let width = weights.len() * d;
    let mut out = vec![0.0f32; t * width];
    let mut flops = 0u64;
    for (h, a) in weights.iter().enumerate() {
        let vh = &v[h / group];
        if a.rows() != t || a.cols() != vh.rows() || vh.cols() != d {
            return Err(Error::Shape(format!(
                "head {h}: weights {}x{} cannot mix values {}x{}",
                a.rows(),
                a.cols(),
                vh.rows(),
                vh.cols()
            )));
        }
        let offset = a.offset();
        for i in 0..t {
            let dst = &mut out[i * width + h * d..i * width + (h + 1) * d];
            for (j, &w) in a.row(i)[..=i + offset].iter().enumerate() {
                for (o, &x) in dst.iter_mut().zip(vh.row(j)) {
                    *o += w * x;
                }
            }
            flops += 2 * (d * (i + offset + 1)) as u64;
        }
    }
    Ok((Matrix::from_raw(t, width, out), flops))
}
