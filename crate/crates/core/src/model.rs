//! Llama-style decoder (RMSNorm, rotary embeddings, gated MLP) executing any
//! mix of attention strategies: full-sequence forward, cached incremental
//! decoding, sampling and perplexity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accounting::{FlopCounts, LayerCounters, RuntimeCounters};
use crate::analysis::AttentionRecord;
use crate::attention::{
    attend_cla, attend_shared, attend_standard, cache_slots, plan_roles, split_heads, AttentionOutput,
    CacheSlot, ClaMap, KvCache, LayerRole, SharingPlan,
};
use crate::error::{Error, Result};
use crate::math::{matmul, rms_norm, rope_in_place, silu, Matrix};

pub type TokenId = u32;

/// Seed used for the reference toy weights.
pub const TOY_SEED: u64 = 42;
/// Standard deviation of randomly initialized weight matrices.
pub const INIT_SCALE: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    #[serde(default)]
    pub sharing_plan: SharingPlan,
    #[serde(default)]
    pub cla_map: ClaMap,
}

impl ModelConfig {
    /// 8 layers, 4 heads, d_model 64, d_ff 128, vocab 256, max_seq 64.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            n_kv_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 128,
            vocab_size: 256,
            max_seq: 64,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            sharing_plan: SharingPlan::empty(),
            cla_map: ClaMap::default(),
        }
    }

    /// Dimensions of the public 7B Llama-2 family member.
    pub fn llama2_7b() -> Self {
        Self {
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 32,
            d_model: 4096,
            d_head: 128,
            d_ff: 11008,
            vocab_size: 32000,
            max_seq: 4096,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            sharing_plan: SharingPlan::empty(),
            cla_map: ClaMap::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary embedding needs even d_head, got {}", self.d_head)));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.sharing_plan.validate(self.n_layers)?;
        self.cla_map.validate(self.n_layers, &self.sharing_plan)
    }

    pub fn with_plan(mut self, plan: SharingPlan) -> Result<Self> {
        self.sharing_plan = plan;
        self.validate()?;
        Ok(self)
    }

    pub fn with_cla(mut self, cla: ClaMap) -> Result<Self> {
        self.cla_map = cla;
        self.validate()?;
        Ok(self)
    }

    pub fn roles(&self) -> Result<Vec<LayerRole>> {
        plan_roles(&self.sharing_plan, self.n_layers)
    }

    pub fn cache_slots(&self) -> Result<Vec<CacheSlot>> {
        Ok(cache_slots(&self.roles()?, &self.cla_map))
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.d_head as f32).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

impl Weights {
    /// Gaussian weights with standard deviation [`INIT_SCALE`], unit norm gains.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32 * INIT_SCALE
                })
                .collect();
            Matrix::from_raw(rows, cols, data)
        };
        let c = config;
        let embed = gaussian(c.vocab_size, c.d_model);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                wq: gaussian(c.d_model, c.q_dim()),
                wk: gaussian(c.d_model, c.kv_dim()),
                wv: gaussian(c.d_model, c.kv_dim()),
                wo: gaussian(c.q_dim(), c.d_model),
                w1: gaussian(c.d_model, c.d_ff),
                w2: gaussian(c.d_ff, c.d_model),
                w3: gaussian(c.d_model, c.d_ff),
                norm1: vec![1.0; c.d_model],
                norm2: vec![1.0; c.d_model],
            })
            .collect();
        let lm_head = gaussian(c.d_model, c.vocab_size);
        Ok(Self {
            embed,
            layers,
            final_norm: vec![1.0; c.d_model],
            lm_head,
        })
    }

    /// Checks every tensor against the configured shapes.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let c = config;
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        let check_vec = |name: &str, v: &[f32]| {
            if v.len() != c.d_model {
                return Err(Error::Shape(format!("{name} has {} entries, expected {}", v.len(), c.d_model)));
            }
            Ok(())
        };
        check("embed", &self.embed, c.vocab_size, c.d_model)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers of weights for {} configured layers",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&format!("layers.{i}.wq"), &l.wq, c.d_model, c.q_dim())?;
            check(&format!("layers.{i}.wk"), &l.wk, c.d_model, c.kv_dim())?;
            check(&format!("layers.{i}.wv"), &l.wv, c.d_model, c.kv_dim())?;
            check(&format!("layers.{i}.wo"), &l.wo, c.q_dim(), c.d_model)?;
            check(&format!("layers.{i}.w1"), &l.w1, c.d_model, c.d_ff)?;
            check(&format!("layers.{i}.w2"), &l.w2, c.d_ff, c.d_model)?;
            check(&format!("layers.{i}.w3"), &l.w3, c.d_model, c.d_ff)?;
            check_vec(&format!("layers.{i}.norm1"), &l.norm1)?;
            check_vec(&format!("layers.{i}.norm2"), &l.norm2)?;
        }
        check_vec("final_norm", &self.final_norm)?;
        check("lm_head", &self.lm_head, c.d_model, c.vocab_size)
    }
}

/// Logits for the processed positions plus, optionally, every layer's weights.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub record: Option<AttentionRecord>,
    pub counters: RuntimeCounters,
    pub cache: KvCache,
}

/// Processes `token_ids` from an empty cache.
pub fn forward_full(
    config: &ModelConfig,
    weights: &Weights,
    token_ids: &[TokenId],
    capture: bool,
) -> Result<ForwardOutput> {
    config.validate()?;
    let roles = config.roles()?;
    let mut cache = KvCache::new(&config.cache_slots()?, config.n_kv_heads, config.d_head);
    let (logits, record, counters) =
        run_tokens(config, weights, &roles, &mut cache, token_ids, capture)?;
    Ok(ForwardOutput {
        logits,
        record,
        counters,
        cache,
    })
}

fn check_tokens(config: &ModelConfig, ids: &[TokenId], already: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Input("no tokens to process".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    if already + ids.len() > config.max_seq {
        return Err(Error::Capacity {
            requested: already + ids.len(),
            max_seq: config.max_seq,
        });
    }
    Ok(())
}

fn linear(x: &Matrix, w: &Matrix, flops: &mut u64) -> Result<Matrix> {
    *flops += 2 * (x.rows() * x.cols() * w.cols()) as u64;
    matmul(x, w)
}

fn norm_rows(x: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.rows() {
        out.extend(rms_norm(x.row(i), gain, eps)?);
    }
    Matrix::new(x.rows(), x.cols(), out)
}

/// Rotates every head vector of a token-major projection in place.
fn rotate_heads(
    proj: Matrix,
    d_head: usize,
    first_position: usize,
    theta: f32,
    flops: &mut u64,
) -> Result<Matrix> {
    let (rows, cols) = (proj.rows(), proj.cols());
    let mut data = proj.into_data();
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        for head in row.chunks_exact_mut(d_head) {
            rope_in_place(head, first_position + i, theta)?;
            // 4 flops per rotated pair
            *flops += 2 * d_head as u64;
        }
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

fn add_in_place(x: &mut Matrix, delta: &Matrix) -> Result<()> {
    if x.rows() != delta.rows() || x.cols() != delta.cols() {
        return Err(Error::Shape("residual shape mismatch".into()));
    }
    let sum: Vec<f32> = x.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    *x = Matrix::from_raw(x.rows(), x.cols(), sum);
    Ok(())
}

/// Runs new tokens through every layer, appending them to `cache`.
fn run_tokens(
    config: &ModelConfig,
    weights: &Weights,
    roles: &[LayerRole],
    cache: &mut KvCache,
    ids: &[TokenId],
    capture: bool,
) -> Result<(Matrix, Option<AttentionRecord>, RuntimeCounters)> {
    let start = cache
        .token_count()
        .ok_or_else(|| Error::Sequencing("cache layers hold different token counts".into()))?;
    check_tokens(config, ids, start)?;
    let t = ids.len();
    let c = config;

    let mut x_data = Vec::with_capacity(t * c.d_model);
    for &id in ids {
        x_data.extend_from_slice(weights.embed.row(id as usize));
    }
    let mut x = Matrix::from_raw(t, c.d_model, x_data);
    let mut counters = RuntimeCounters::zeroed(c.n_layers);
    let mut captured = capture.then(|| Vec::with_capacity(c.n_layers));
    let scale = c.attention_scale();

    for (l, (lw, role)) in weights.layers.iter().zip(roles).enumerate() {
        let f = &mut counters.layers[l].flops;
        let xn = norm_rows(&x, &lw.norm1, c.norm_eps)?;
        let out: AttentionOutput = match (cache.slot(l), role) {
            (CacheSlot::ValuesOnly, LayerRole::Member { anchor, .. }) => {
                let v = linear(&xn, &lw.wv, &mut f.v_proj)?;
                cache.append(l, t, None, Some(v.data()))?;
                let v_heads = cache.value_heads(l)?;
                attend_shared(cache.shared_weights(*anchor)?, &v_heads)?
            }
            (CacheSlot::Alias { parent }, _) => {
                let q = linear(&xn, &lw.wq, &mut f.q_proj)?;
                let q = rotate_heads(q, c.d_head, start, c.rope_theta, &mut f.q_proj)?;
                cache.append(l, t, None, None)?;
                let q_heads = split_heads(q.data(), t, c.n_heads, c.d_head);
                attend_cla(l, parent, &q_heads, cache, scale)?
            }
            (CacheSlot::KeysAndValues, _) => {
                let q = linear(&xn, &lw.wq, &mut f.q_proj)?;
                let q = rotate_heads(q, c.d_head, start, c.rope_theta, &mut f.q_proj)?;
                let k = linear(&xn, &lw.wk, &mut f.k_proj)?;
                let k = rotate_heads(k, c.d_head, start, c.rope_theta, &mut f.k_proj)?;
                let v = linear(&xn, &lw.wv, &mut f.v_proj)?;
                cache.append(l, t, Some(k.data()), Some(v.data()))?;
                let q_heads = split_heads(q.data(), t, c.n_heads, c.d_head);
                let (k_heads, v_heads) = cache.head_matrices(l)?;
                let out = attend_standard(&q_heads, &k_heads, &v_heads, scale)?;
                if matches!(role, LayerRole::Anchor { .. }) {
                    cache.publish_weights(l, out.weights.clone());
                }
                out
            }
            (CacheSlot::ValuesOnly, _) => {
                return Err(Error::Sequencing(format!("layer {l} stores values only but is not a member")))
            }
        };
        f.scores += out.flops.scores;
        f.softmax += out.flops.softmax;
        f.mix += out.flops.mix;

        let attn = linear(&out.hidden, &lw.wo, &mut f.o_proj)?;
        add_in_place(&mut x, &attn)?;

        let xn = norm_rows(&x, &lw.norm2, c.norm_eps)?;
        let gate = linear(&xn, &lw.w1, &mut f.mlp)?;
        let up = linear(&xn, &lw.w3, &mut f.mlp)?;
        let hidden: Vec<f32> = gate
            .data()
            .iter()
            .zip(up.data())
            .map(|(&g, &u)| silu(g) * u)
            .collect();
        let hidden = Matrix::from_raw(t, c.d_ff, hidden);
        let down = linear(&hidden, &lw.w2, &mut f.mlp)?;
        add_in_place(&mut x, &down)?;

        if let Some(layers) = captured.as_mut() {
            layers.push(out.weights);
        }
    }
    cache.end_step();

    for (l, layer) in counters.layers.iter_mut().enumerate() {
        layer.keys_bytes = cache.key_bytes(l);
        layer.values_bytes = cache.value_bytes(l);
    }

    let xn = norm_rows(&x, &weights.final_norm, c.norm_eps)?;
    let logits = matmul(&xn, &weights.lm_head)?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logits".into()));
    }
    let record = captured.map(|layers| AttentionRecord {
        sample_id: 0,
        layers,
    });
    Ok((logits, record, counters))
}

/// Single-owner incremental decoding state over shared weights.
#[derive(Debug)]
pub struct DecodeSession<'a> {
    config: &'a ModelConfig,
    weights: &'a Weights,
    roles: Vec<LayerRole>,
    cache: KvCache,
    tokens_seen: usize,
    last_step: RuntimeCounters,
    total_flops: Vec<FlopCounts>,
}

impl<'a> DecodeSession<'a> {
    pub fn new(config: &'a ModelConfig, weights: &'a Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(config)?;
        Ok(Self {
            config,
            weights,
            roles: config.roles()?,
            cache: KvCache::new(&config.cache_slots()?, config.n_kv_heads, config.d_head),
            tokens_seen: 0,
            last_step: RuntimeCounters::zeroed(config.n_layers),
            total_flops: vec![FlopCounts::default(); config.n_layers],
        })
    }

    /// Feeds one token and returns next-token logits.
    pub fn decode_step(&mut self, token: TokenId) -> Result<Vec<f32>> {
        let (logits, _, counters) = run_tokens(
            self.config,
            self.weights,
            &self.roles,
            &mut self.cache,
            &[token],
            false,
        )?;
        self.tokens_seen += 1;
        for (acc, layer) in self.total_flops.iter_mut().zip(&counters.layers) {
            acc.add(&layer.flops);
        }
        self.last_step = counters;
        Ok(logits.into_data())
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Counters of the most recent step; KV bytes reflect the cache after it.
    pub fn last_step_counters(&self) -> &RuntimeCounters {
        &self.last_step
    }

    /// Flops accumulated over every step so far, with current KV bytes.
    pub fn cumulative_counters(&self) -> RuntimeCounters {
        RuntimeCounters {
            layers: self
                .total_flops
                .iter()
                .zip(&self.last_step.layers)
                .map(|(f, last)| LayerCounters {
                    flops: *f,
                    keys_bytes: last.keys_bytes,
                    values_bytes: last.values_bytes,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f32> = logits
        .iter()
        .map(|&l| libm::expf((l - max) / temperature))
        .collect();
    let total: f32 = weights.iter().sum();
    let mut target = rng.gen::<f32>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i as TokenId;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as TokenId
}

/// Feeds `prompt` and then samples `n_steps` continuation tokens.
pub fn generate(
    session: &mut DecodeSession<'_>,
    prompt: &[TokenId],
    n_steps: usize,
    mode: SampleMode,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let requested = session.tokens_seen + prompt.len() + n_steps;
    if requested > session.config.max_seq {
        return Err(Error::Capacity {
            requested,
            max_seq: session.config.max_seq,
        });
    }
    let mut rng = match mode {
        SampleMode::Temperature { temperature, seed } => {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        SampleMode::Greedy => None,
    };
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = session.decode_step(tok)?;
    }
    let mut out = Vec::with_capacity(n_steps);
    loop {
        let next = match (mode, rng.as_mut()) {
            (SampleMode::Temperature { temperature, .. }, Some(rng)) => sample(&logits, temperature, rng),
            _ => argmax(&logits),
        };
        out.push(next);
        if out.len() == n_steps {
            return Ok(out);
        }
        logits = session.decode_step(next)?;
    }
}

/// `exp` of the mean next-token negative log-likelihood over positions `1..T`.
pub fn perplexity(config: &ModelConfig, weights: &Weights, token_ids: &[TokenId]) -> Result<f32> {
    if token_ids.len() < 2 {
        return Err(Error::Input("perplexity needs at least two tokens".into()));
    }
    let out = forward_full(config, weights, token_ids, false)?;
    perplexity_from_logits(&out.logits, token_ids)
}

/// Perplexity of `token_ids` given per-position next-token logits
/// (row `t` predicts token `t + 1`).
pub fn perplexity_from_logits(logits: &Matrix, token_ids: &[TokenId]) -> Result<f32> {
    if token_ids.len() < 2 {
        return Err(Error::Input("perplexity needs at least two tokens".into()));
    }
    if logits.rows() + 1 < token_ids.len() {
        return Err(Error::Shape(format!(
            "{} logit rows cannot score {} tokens",
            logits.rows(),
            token_ids.len()
        )));
    }
    let mut nll = 0.0f32;
    for (t, &next) in token_ids[1..].iter().enumerate() {
        let row = logits.row(t);
        let target = *row
            .get(next as usize)
            .ok_or_else(|| Error::Input(format!("token id {next} out of range")))?;
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &v in row {
            sum += libm::expf(v - max);
        }
        let log_z = max + libm::logf(sum);
        nll += log_z - target;
    }
    Ok(libm::expf(nll / (token_ids.len() - 1) as f32))
}
