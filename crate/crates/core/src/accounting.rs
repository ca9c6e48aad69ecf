//! Closed-form flop and KV-byte model, and its reconciliation against the
//! counters the engine records while running.
//!
//! Counting conventions:
//! - an `(m×k)·(k×n)` product costs `2mkn`;
//! - rotary embedding costs 4 flops per rotated pair, booked under
//!   `q_proj` / `k_proj`;
//! - scores and `A·V` count only causal positions (`T(T+1)/2` for a full
//!   sequence, `t` for decode step `t`), at `2·d_head` per position and head;
//! - softmax costs 3 flops per unmasked element;
//! - `mlp` counts the three gated-MLP products; element-wise work, norms,
//!   embedding lookup and the LM head are not counted;
//! - the cache holds f32, 4 bytes per entry.

use serde::Serialize;

use crate::attention::{CacheSlot, SharingPlan};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const BYTES_PER_ENTRY: u64 = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub q_proj: u64,
    pub k_proj: u64,
    pub v_proj: u64,
    pub scores: u64,
    pub softmax: u64,
    pub mix: u64,
    pub o_proj: u64,
    pub mlp: u64,
}

impl FlopCounts {
    pub const CATEGORIES: [&'static str; 8] = [
        "q_proj", "k_proj", "v_proj", "scores", "softmax", "mix", "o_proj", "mlp",
    ];

    pub fn values(&self) -> [u64; 8] {
        [
            self.q_proj,
            self.k_proj,
            self.v_proj,
            self.scores,
            self.softmax,
            self.mix,
            self.o_proj,
            self.mlp,
        ]
    }

    pub fn total(&self) -> u64 {
        self.values().iter().sum()
    }

    pub fn add(&mut self, other: &FlopCounts) {
        self.q_proj += other.q_proj;
        self.k_proj += other.k_proj;
        self.v_proj += other.v_proj;
        self.scores += other.scores;
        self.softmax += other.softmax;
        self.mix += other.mix;
        self.o_proj += other.o_proj;
        self.mlp += other.mlp;
    }
}

/// Per-layer flops and resident cache bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerCounters {
    pub flops: FlopCounts,
    pub keys_bytes: u64,
    pub values_bytes: u64,
}

/// What the engine observed during one forward or decode step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RuntimeCounters {
    pub layers: Vec<LayerCounters>,
}

impl RuntimeCounters {
    pub fn zeroed(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerCounters::default(); n_layers],
        }
    }

    pub fn totals(&self) -> Totals {
        Totals::of(&self.layers)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub flops: FlopCounts,
    pub flops_total: u64,
    pub keys_bytes: u64,
    pub values_bytes: u64,
    pub kv_bytes_total: u64,
}

impl Totals {
    fn of(layers: &[LayerCounters]) -> Self {
        let mut t = Totals::default();
        for l in layers {
            t.flops.add(&l.flops);
            t.keys_bytes += l.keys_bytes;
            t.values_bytes += l.values_bytes;
        }
        t.flops_total = t.flops.total();
        t.kv_bytes_total = t.keys_bytes + t.values_bytes;
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CostMode {
    /// Whole sequence of `seq_len` tokens from an empty cache.
    FullForward,
    /// One token at position `seq_len` (1-based; the cache holds
    /// `seq_len` tokens afterwards).
    DecodeStep,
}

/// Savings relative to the same config with no sharing spans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineDelta {
    pub baseline_flops_total: u64,
    pub baseline_kv_bytes_total: u64,
    pub baseline_keys_bytes: u64,
    pub flops_saved: u64,
    pub kv_bytes_saved: u64,
    pub keys_bytes_saved: u64,
    pub flops_delta_pct: f64,
    pub kv_bytes_delta_pct: f64,
    pub keys_bytes_delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub seq_len: usize,
    pub mode: CostMode,
    pub layers: Vec<LayerCounters>,
    pub totals: Totals,
    pub baseline: BaselineDelta,
}

fn pct(value: u64, base: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        (value as f64 - base as f64) / base as f64 * 100.0
    }
}

fn predict_layers(config: &ModelConfig, seq_len: usize, mode: CostMode) -> Result<Vec<LayerCounters>> {
    config.validate()?;
    if seq_len == 0 || seq_len > config.max_seq {
        return Err(Error::Config(format!(
            "sequence length {seq_len} outside 1..={}",
            config.max_seq
        )));
    }
    let c = config;
    let (dm, dh, h, hk) = (c.d_model as u64, c.d_head as u64, c.n_heads as u64, c.n_kv_heads as u64);
    let (qd, kvd, ff) = (c.q_dim() as u64, c.kv_dim() as u64, c.d_ff as u64);
    let t = seq_len as u64;
    let (new_tokens, causal_positions) = match mode {
        CostMode::FullForward => (t, t * (t + 1) / 2),
        CostMode::DecodeStep => (1, t),
    };
    let n = new_tokens;
    let q_proj = 2 * n * dm * qd + 2 * n * h * dh;
    let k_proj = 2 * n * dm * kvd + 2 * n * hk * dh;
    let v_proj = 2 * n * dm * kvd;
    let scores = h * 2 * dh * causal_positions;
    let softmax = crate::attention::SOFTMAX_FLOPS_PER_ELEMENT * h * causal_positions;
    let mix = h * 2 * dh * causal_positions;
    let o_proj = 2 * n * qd * dm;
    let mlp = 3 * 2 * n * dm * ff;
    let cache_bytes = BYTES_PER_ENTRY * t * kvd;

    Ok(c.cache_slots()?
        .into_iter()
        .map(|slot| {
            let common = FlopCounts {
                o_proj,
                mlp,
                mix,
                ..FlopCounts::default()
            };
            match slot {
                CacheSlot::KeysAndValues => LayerCounters {
                    flops: FlopCounts {
                        q_proj,
                        k_proj,
                        v_proj,
                        scores,
                        softmax,
                        ..common
                    },
                    keys_bytes: cache_bytes,
                    values_bytes: cache_bytes,
                },
                CacheSlot::ValuesOnly => LayerCounters {
                    flops: FlopCounts { v_proj, ..common },
                    keys_bytes: 0,
                    values_bytes: cache_bytes,
                },
                CacheSlot::Alias { .. } => LayerCounters {
                    flops: FlopCounts {
                        q_proj,
                        scores,
                        softmax,
                        ..common
                    },
                    keys_bytes: 0,
                    values_bytes: 0,
                },
            }
        })
        .collect())
}

/// Closed-form cost of running `config` for `seq_len` tokens in `mode`.
pub fn predict_costs(config: &ModelConfig, seq_len: usize, mode: CostMode) -> Result<CostReport> {
    let layers = predict_layers(config, seq_len, mode)?;
    let totals = Totals::of(&layers);
    let mut base_config = config.clone();
    base_config.sharing_plan = SharingPlan::empty();
    let base = Totals::of(&predict_layers(&base_config, seq_len, mode)?);
    let baseline = BaselineDelta {
        baseline_flops_total: base.flops_total,
        baseline_kv_bytes_total: base.kv_bytes_total,
        baseline_keys_bytes: base.keys_bytes,
        flops_saved: base.flops_total.saturating_sub(totals.flops_total),
        kv_bytes_saved: base.kv_bytes_total.saturating_sub(totals.kv_bytes_total),
        keys_bytes_saved: base.keys_bytes.saturating_sub(totals.keys_bytes),
        flops_delta_pct: pct(totals.flops_total, base.flops_total),
        kv_bytes_delta_pct: pct(totals.kv_bytes_total, base.kv_bytes_total),
        keys_bytes_delta_pct: pct(totals.keys_bytes, base.keys_bytes),
    };
    Ok(CostReport {
        seq_len,
        mode,
        layers,
        totals,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    /// `None` when the layer counts themselves disagree.
    pub layer: Option<usize>,
    pub category: String,
    pub predicted: u64,
    pub observed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reconciliation {
    pub mismatches: Vec<Mismatch>,
}

impl Reconciliation {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares every category of every layer by integer equality.
pub fn reconcile(report: &CostReport, counters: &RuntimeCounters) -> Reconciliation {
    let mut mismatches = Vec::new();
    if report.layers.len() != counters.layers.len() {
        mismatches.push(Mismatch {
            layer: None,
            category: "layers".into(),
            predicted: report.layers.len() as u64,
            observed: counters.layers.len() as u64,
        });
    }
    for (l, (p, o)) in report.layers.iter().zip(&counters.layers).enumerate() {
        let named = FlopCounts::CATEGORIES
            .iter()
            .zip(p.flops.values().into_iter().zip(o.flops.values()))
            .map(|(name, pair)| (*name, pair))
            .chain([
                ("keys_bytes", (p.keys_bytes, o.keys_bytes)),
                ("values_bytes", (p.values_bytes, o.values_bytes)),
            ]);
        for (category, (predicted, observed)) in named {
            if predicted != observed {
                mismatches.push(Mismatch {
                    layer: Some(l),
                    category: category.into(),
                    predicted,
                    observed,
                });
            }
        }
    }
    Reconciliation { mismatches }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsRow {
    pub seq_len: usize,
    pub plan: String,
    pub flops_total: u64,
    pub flops_delta_pct: f64,
    pub kv_bytes_total: u64,
    pub kv_bytes_delta_pct: f64,
    pub softmax_flops: u64,
    pub key_bytes_total: u64,
    pub key_bytes_delta_pct: f64,
}

impl SavingsRow {
    pub const COLUMNS: [&'static str; 9] = [
        "seq_len",
        "plan",
        "flops_total",
        "flops_delta_pct",
        "kv_bytes_total",
        "kv_bytes_delta_pct",
        "softmax_flops",
        "key_bytes_total",
        "key_bytes_delta_pct",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.seq_len.to_string(),
            self.plan.clone(),
            self.flops_total.to_string(),
            format!("{:.6}", self.flops_delta_pct),
            self.kv_bytes_total.to_string(),
            format!("{:.6}", self.kv_bytes_delta_pct),
            self.softmax_flops.to_string(),
            self.key_bytes_total.to_string(),
            format!("{:.6}", self.key_bytes_delta_pct),
        ]
    }
}

/// Full-forward totals and deltas for every `(seq_len, plan)` pair.
pub fn savings_table(
    config: &ModelConfig,
    seq_lens: &[usize],
    plans: &[SharingPlan],
) -> Result<Vec<SavingsRow>> {
    let mut rows = Vec::with_capacity(seq_lens.len() * plans.len());
    for &seq_len in seq_lens {
        for plan in plans {
            let cfg = config.clone().with_plan(plan.clone())?;
            let r = predict_costs(&cfg, seq_len, CostMode::FullForward)?;
            rows.push(SavingsRow {
                seq_len,
                plan: plan.to_string(),
                flops_total: r.totals.flops_total,
                flops_delta_pct: r.baseline.flops_delta_pct,
                kv_bytes_total: r.totals.kv_bytes_total,
                kv_bytes_delta_pct: r.baseline.kv_bytes_delta_pct,
                softmax_flops: r.totals.flops.softmax,
                key_bytes_total: r.totals.keys_bytes,
                key_bytes_delta_pct: r.baseline.keys_bytes_delta_pct,
            });
        }
    }
    Ok(rows)
}
