use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use sattn_core::accounting::{predict_costs, reconcile, savings_table, CostMode, Mismatch};
use sattn_core::analysis::{
    capture_record, segment_groups, similarity_surface, variance_surface, weighted_cumulative_variance,
    AttentionRecord, HeadAggregation, SampleAggregation,
};
use sattn_core::format::{load_manifest, load_model, read_corpus, read_tokens, save_model};
use sattn_core::model::{forward_full, generate, perplexity, DecodeSession, SampleMode};
use sattn_core::report::{self, Meta};
use sattn_core::{ClaMap, ModelConfig, SharingPlan, TokenId, Weights};

use crate::args::{
    BudgetArgs, ConfigFlags, InputFlags, MakeToyArgs, ParityArgs, PplArgs, Preset, RunArgs, SampleAgg,
    SharingFlags, SimArgs, VarArgs,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn flags(args: &impl Serialize) -> BTreeMap<String, Value> {
    match serde_json::to_value(args) {
        Ok(Value::Object(map)) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn apply_sharing(mut config: ModelConfig, sharing: &SharingFlags) -> Result<ModelConfig> {
    if !sharing.spans.is_empty() {
        config.sharing_plan = SharingPlan::new(sharing.spans.clone())?;
    }
    if sharing.cla_pairs {
        config.cla_map = ClaMap::pairs(config.n_layers);
    }
    config.validate()?;
    Ok(config)
}

fn load(model: &Path, sharing: &SharingFlags) -> Result<(ModelConfig, Weights)> {
    let (config, weights) = load_model(model)?;
    let config = apply_sharing(config, sharing)?;
    weights.validate(&config)?;
    Ok((config, weights))
}

fn samples(input: &InputFlags) -> Result<Vec<(String, Vec<TokenId>)>> {
    match (&input.ids, &input.corpus) {
        (Some(ids), None) => {
            let name = ids.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(vec![(name, read_tokens(ids)?)])
        }
        (None, Some(dir)) => Ok(read_corpus(dir)?),
        _ => Err(CliError::Usage("exactly one of --ids or --corpus is required".into())),
    }
}

fn config_from_flags(f: &ConfigFlags) -> Result<ModelConfig> {
    if f.n_heads == 0 || !f.d_model.is_multiple_of(f.n_heads) {
        return Err(CliError::Usage(format!(
            "--d-model {} is not divisible by --n-heads {}",
            f.d_model, f.n_heads
        )));
    }
    let config = ModelConfig {
        n_layers: f.n_layers,
        n_heads: f.n_heads,
        n_kv_heads: f.n_kv_heads,
        d_model: f.d_model,
        d_head: f.d_model / f.n_heads,
        d_ff: f.d_ff,
        vocab_size: f.vocab_size,
        max_seq: f.max_seq,
        rope_theta: f.rope_theta,
        norm_eps: f.norm_eps,
        sharing_plan: SharingPlan::empty(),
        cla_map: ClaMap::default(),
    };
    config.validate()?;
    Ok(config)
}

pub fn make_toy(args: &MakeToyArgs) -> Result<i32> {
    let config = apply_sharing(config_from_flags(&args.config)?, &args.sharing)?;
    let weights = Weights::random(&config, args.seed)?;
    save_model(&args.out, &config, &weights)?;
    println!("{}", args.out.display());
    Ok(0)
}

pub fn run(args: &RunArgs) -> Result<i32> {
    let (config, weights) = load(&args.model, &args.sharing)?;
    let prompt = read_tokens(&args.ids)?;
    let mode = match args.temperature {
        Some(temperature) => SampleMode::Temperature {
            temperature,
            seed: args.seed,
        },
        None => SampleMode::Greedy,
    };
    let mut session = DecodeSession::new(&config, &weights)?;
    let generated = generate(&mut session, &prompt, args.n_steps, mode)?;
    if let Some(out) = &args.out {
        let meta = Meta::new("run", &config, flags(args)).with("plan", config.sharing_plan.to_string());
        let data = json!({ "prompt": prompt, "generated": generated });
        report::write_file(out, &report::render_json(&meta, data)?)?;
    }
    println!("{}", generated.iter().map(u32::to_string).collect::<Vec<_>>().join(" "));
    Ok(0)
}

pub fn ppl(args: &PplArgs) -> Result<i32> {
    let (config, weights) = load(&args.model, &args.sharing)?;
    let samples = samples(&args.input)?;
    let scores = samples
        .par_iter()
        .map(|(name, ids)| Ok((name.clone(), ids.len(), perplexity(&config, &weights, ids)?)))
        .collect::<std::result::Result<Vec<_>, sattn_core::Error>>()?;
    let mut total = 0.0f64;
    let rows: Vec<Value> = scores
        .iter()
        .map(|(name, n, p)| {
            total += f64::from(*p);
            println!("{name}\t{p}");
            json!({ "sample": name, "n_tokens": n, "perplexity": p })
        })
        .collect();
    if let Some(out) = &args.out {
        let meta = Meta::new("ppl", &config, flags(args)).with("plan", config.sharing_plan.to_string());
        let data = json!({ "samples": rows, "mean_perplexity": total / scores.len() as f64 });
        report::write_file(out, &report::render_json(&meta, data)?)?;
    }
    Ok(0)
}

fn capture_corpus(config: &ModelConfig, weights: &Weights, input: &InputFlags) -> Result<Vec<AttentionRecord>> {
    let samples = samples(input)?;
    // collect() keeps input order, so the reduction order is fixed by sample id
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(id, (_, ids))| capture_record(config, weights, id, ids))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(records)
}

pub fn sim(args: &SimArgs) -> Result<i32> {
    let (config, weights) = load(&args.model, &args.sharing)?;
    let head_agg = match args.head.as_str() {
        "mean" => HeadAggregation::Mean,
        h => HeadAggregation::PerHead(
            h.parse()
                .map_err(|_| CliError::Usage(format!("--head must be `mean` or an index, got `{h}`")))?,
        ),
    };
    let sample_agg = match args.sample_agg {
        SampleAgg::MeanMatrices => SampleAggregation::MeanMatrices,
        SampleAgg::MeanSimilarities => SampleAggregation::MeanSimilarities,
    };
    if !(args.tau > 0.0 && args.tau < 1.0) {
        return Err(CliError::Usage(format!("--tau must lie in (0, 1), got {}", args.tau)));
    }
    let records = capture_corpus(&config, &weights, &args.input)?;
    let surface = similarity_surface(&records, head_agg, sample_agg)?;
    let groups = segment_groups(&surface, args.tau)?;
    let meta = Meta::new("sim", &config, flags(args))
        .with("plan", config.sharing_plan.to_string())
        .with("tau", args.tau)
        .with("head_aggregation", head_agg)
        .with("sample_aggregation", sample_agg)
        .with("n_samples", records.len());
    let csv = report::render_csv(&meta, &report::SIMILARITY_COLUMNS, &report::similarity_rows(&surface))?;
    report::write_file(&with_suffix(&args.out, "csv"), &csv)?;
    let json = report::render_json(&meta, report::similarity_json(&surface, &groups))?;
    report::write_file(&with_suffix(&args.out, "json"), &json)?;
    for g in &groups.groups {
        println!("group {}..{} mean similarity {:.4}", g.start, g.end, g.mean_similarity);
    }
    Ok(0)
}

pub fn var(args: &VarArgs) -> Result<i32> {
    let (config, weights) = load(&args.model, &args.sharing)?;
    let records = capture_corpus(&config, &weights, &args.input)?;
    let vs = variance_surface(&records)?;
    let (wcv, wcv_error) = match weighted_cumulative_variance(&vs) {
        Ok(w) => (Some(w), None),
        Err(e @ sattn_core::Error::Normalization { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut meta = Meta::new("var", &config, flags(args))
        .with("plan", config.sharing_plan.to_string())
        .with("n_samples", records.len());
    if let Some(err) = &wcv_error {
        meta = meta.with("wcv_error", err);
    }
    let csv = report::render_csv(&meta, &report::VARIANCE_COLUMNS, &report::variance_rows(&vs, wcv.as_ref()))?;
    report::write_file(&with_suffix(&args.out, "csv"), &csv)?;
    let json = report::render_json(&meta, report::variance_json(&vs, wcv.as_ref()))?;
    report::write_file(&with_suffix(&args.out, "json"), &json)?;
    Ok(0)
}

pub fn budget(args: &BudgetArgs) -> Result<i32> {
    let mut config = match (&args.model, args.preset) {
        (Some(model), _) => load_manifest(model)?.config,
        (None, Some(Preset::Llama2_7b)) => ModelConfig::llama2_7b(),
        (None, Some(Preset::Toy)) | (None, None) => ModelConfig::toy(),
    };
    if let Some(n) = args.n_layers {
        config.n_layers = n;
    }
    config.sharing_plan = SharingPlan::empty();
    if args.sharing.cla_pairs {
        config.cla_map = ClaMap::pairs(config.n_layers);
    }
    config.validate()?;

    let mut plans = vec![SharingPlan::empty()];
    if !args.sharing.spans.is_empty() {
        plans.push(SharingPlan::new(args.sharing.spans.clone())?);
    }
    plans.extend(args.plans.iter().cloned());
    let seq_lens = if args.seq_lens.is_empty() {
        vec![config.max_seq]
    } else {
        args.seq_lens.clone()
    };

    let rows = savings_table(&config, &seq_lens, &plans)?;
    let reports = plans
        .iter()
        .map(|p| {
            let cfg = config.clone().with_plan(p.clone())?;
            Ok(json!({ "plan": p.to_string(), "report": predict_costs(&cfg, seq_lens[0], CostMode::FullForward)? }))
        })
        .collect::<std::result::Result<Vec<_>, sattn_core::Error>>()?;

    let meta = Meta::new("budget", &config, flags(args));
    let csv = report::render_csv(
        &meta,
        &sattn_core::accounting::SavingsRow::COLUMNS,
        &report::savings_rows(&rows),
    )?;
    report::write_file(&with_suffix(&args.out, "csv"), &csv)?;
    let json = report::render_json(&meta, json!({ "rows": rows, "reports": reports }))?;
    report::write_file(&with_suffix(&args.out, "json"), &json)?;
    for r in &rows {
        println!(
            "seq_len {} plan {}: flops {} ({:+.3}%), key bytes {} ({:+.3}%)",
            r.seq_len, r.plan, r.flops_total, r.flops_delta_pct, r.key_bytes_total, r.key_bytes_delta_pct
        );
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    passed: bool,
    detail: Value,
}

fn default_ids(config: &ModelConfig) -> Vec<TokenId> {
    let n = (config.max_seq / 2).max(2).min(config.max_seq);
    (0..n as u64)
        .map(|i| ((i * 2_654_435_761 + 12_345) % config.vocab_size as u64) as TokenId)
        .collect()
}

pub fn parity(args: &ParityArgs) -> Result<i32> {
    let (config, weights) = load(&args.model, &args.sharing)?;
    let ids = match &args.ids {
        Some(p) => read_tokens(p)?,
        None => default_ids(&config),
    };
    let mut checks = Vec::new();

    // singleton spans on every layer outside cross-layer sharing must be bitwise neutral
    let cla_layers: Vec<usize> = config.cla_map.layers().collect();
    let singletons = SharingPlan::new(
        (0..config.n_layers)
            .filter(|l| !cla_layers.contains(l))
            .map(|l| sattn_core::Span::new(l, l))
            .collect::<std::result::Result<_, _>>()?,
    )?;
    let base = config.clone().with_plan(SharingPlan::empty())?;
    let single = config.clone().with_plan(singletons)?;
    let a = forward_full(&base, &weights, &ids, false)?;
    let b = forward_full(&single, &weights, &ids, false)?;
    let differing = a
        .logits
        .data()
        .iter()
        .zip(b.logits.data())
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count();
    checks.push(Check {
        name: "singleton_spans_bitwise".into(),
        passed: differing == 0,
        detail: json!({ "differing_logits": differing }),
    });

    let full = forward_full(&config, &weights, &ids, false)?;
    let mut session = DecodeSession::new(&config, &weights)?;
    let mut worst = 0.0f32;
    let mut step_mismatches: Vec<(usize, Mismatch)> = Vec::new();
    for (n, &tok) in ids.iter().enumerate() {
        let logits = session.decode_step(tok)?;
        for (x, y) in logits.iter().zip(full.logits.row(n)) {
            worst = worst.max((x - y).abs());
        }
        let predicted = predict_costs(&config, n + 1, CostMode::DecodeStep)?;
        step_mismatches.extend(
            reconcile(&predicted, session.last_step_counters())
                .mismatches
                .into_iter()
                .map(|m| (n + 1, m)),
        );
    }
    checks.push(Check {
        name: "incremental_vs_full".into(),
        passed: worst <= args.tolerance,
        detail: json!({ "max_abs_diff": worst, "tolerance": args.tolerance, "tokens": ids.len() }),
    });

    let predicted = predict_costs(&config, ids.len(), CostMode::FullForward)?;
    let full_rec = reconcile(&predicted, &full.counters);
    checks.push(Check {
        name: "accounting_full_forward".into(),
        passed: full_rec.is_exact(),
        detail: json!({ "mismatches": full_rec.mismatches }),
    });
    checks.push(Check {
        name: "accounting_decode_steps".into(),
        passed: step_mismatches.is_empty(),
        detail: json!({
            "mismatches": step_mismatches
                .iter()
                .map(|(step, m)| json!({ "step": step, "mismatch": m }))
                .collect::<Vec<_>>()
        }),
    });

    let ok = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
    }
    if let Some(out) = &args.out {
        let meta = Meta::new("parity", &config, flags(args)).with("plan", config.sharing_plan.to_string());
        report::write_file(out, &report::render_json(&meta, json!({ "passed": ok, "checks": checks }))?)?;
    }
    if ok {
        Ok(0)
    } else {
        Err(CliError::Validation(
            checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.clone())
                .collect::<Vec<_>>()
                .join(", "),
        ))
    }
}
