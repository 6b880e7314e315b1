use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adarank_core::backends::{
    load_embeddings, BackendConfig, BackendError, EmbeddingBackend, Generator, HashingEmbedder, HttpChatClient,
    HttpEmbeddingClient, MockGenerator, MockOracleRanker, Ranker, RelevanceLabels,
};
use adarank_core::dataset::{load_dataset, write_native, DatasetFormat};
use adarank_core::distill::{
    build_stage1, build_stage2, emit_training_file, kmeans, sample_representatives, Augmentations, ClusteringConfig,
    DistillError, SamplingPlan, TrainingConfig,
};
use adarank_core::manifest::RunManifest;
use adarank_core::metrics::{
    build_report, oracle_from_reports, render_table, reports_to_csv, EntailmentBackend, ScoringConfig, StrategyReport,
    DEFAULT_JUDGE_TEMPLATE,
};
use adarank_core::pipeline::{
    parse_grid, run_strategy, write_run_log, CachedRanker, LlmGenerator, LlmRanker, RunOutcome, Strategy,
};
use adarank_core::protocol::{parse_selection, MalformedPolicy, PromptTemplate};
use adarank_core::synthbench::{
    generate_synth, run_shift_experiment, CandidateOrder, Overlap, RelevantCount, SynthConfig,
};
use adarank_core::types::{CandidateSet, EvalInstance};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    create_run_dir, BackendArgs, BackendKind, CliError, DatasetArgs, DistillArgs, EvaluateArgs, JudgeKind,
    OracleArgs, OracleModeArg, OrderArg, OverlapArg, RankArgs, SynthArgs,
};

fn snapshot<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializable output") + "\n"))
}

fn load_instances(data: &DatasetArgs) -> Result<Vec<EvalInstance>, CliError> {
    let path = data.dataset.as_ref().ok_or_else(|| CliError::usage("--dataset is required"))?;
    let format: DatasetFormat = data.format.parse().map_err(CliError::usage)?;
    let loaded = load_dataset(path, format, data.max_passages).map_err(CliError::usage)?;
    if loaded.truncated > 0 {
        eprintln!("note: truncated candidate lists for {} queries to {}", loaded.truncated, data.max_passages);
    }
    Ok(loaded.instances)
}

fn load_template(data: &DatasetArgs) -> Result<PromptTemplate, CliError> {
    match &data.template {
        Some(p) => PromptTemplate::load(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
        None => Ok(PromptTemplate::default()),
    }
}

fn load_labels(b: &BackendArgs) -> Result<Arc<RelevanceLabels>, CliError> {
    let path = b
        .labels
        .as_ref()
        .ok_or_else(|| CliError::usage("the mock backend needs --labels"))?;
    RelevanceLabels::load(path)
        .map(Arc::new)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn http_config(b: &BackendArgs) -> Result<BackendConfig, CliError> {
    match &b.backend_config {
        Some(p) => BackendConfig::load(p).map_err(CliError::usage),
        None => Ok(BackendConfig::default()),
    }
}

fn http_id(cfg: &BackendConfig) -> String {
    format!("http:{}:{}:cfg={}", cfg.endpoint, cfg.model, &cfg.hash()[..12])
}

/// Ranker plus generator for the selected backend, with manifest identifiers.
struct Backends {
    ranker: Arc<dyn Ranker>,
    generator: Arc<dyn Generator>,
    ids: BTreeMap<String, String>,
    chat: Option<(Arc<HttpChatClient>, String)>,
}

fn make_backends(b: &BackendArgs) -> Result<Backends, CliError> {
    let mut ids = BTreeMap::new();
    match b.backend {
        BackendKind::Mock => {
            let labels = load_labels(b)?;
            let ranker = MockOracleRanker::new(labels.clone(), b.noise_rate, b.seed);
            let generator = MockGenerator {
                robustness: b.robustness,
                knowledge_rate: b.knowledge_rate,
                seed: b.seed,
                labels,
            };
            ids.insert("ranker".into(), ranker.describe());
            ids.insert("generator".into(), generator.describe());
            Ok(Backends {
                ranker: Arc::new(ranker),
                generator: Arc::new(generator),
                ids,
                chat: None,
            })
        }
        BackendKind::Http => {
            let cfg = http_config(b)?;
            let client = Arc::new(HttpChatClient::new(&cfg));
            ids.insert("ranker".into(), http_id(&cfg));
            ids.insert("generator".into(), http_id(&cfg));
            Ok(Backends {
                ranker: Arc::new(LlmRanker {
                    backend: client.clone(),
                    model: cfg.model.clone(),
                    max_output_tokens: cfg.max_output_tokens,
                }),
                generator: Arc::new(LlmGenerator {
                    backend: client.clone(),
                    model: cfg.model.clone(),
                    max_output_tokens: cfg.max_output_tokens,
                }),
                ids,
                chat: Some((client, cfg.model)),
            })
        }
    }
}

fn finish_manifest(mut manifest: RunManifest, dir: &Path) -> Result<(), CliError> {
    manifest.finish();
    let path = dir.join("manifest.json");
    manifest.write(&path).map_err(|e| CliError::io(&path, e))
}

fn start_manifest(sub: &str, config: Value, seed: u64, ids: &BTreeMap<String, String>) -> RunManifest {
    let mut m = RunManifest::start(sub, config).seed("seed", seed);
    for (role, id) in ids {
        m = m.backend(role, id.clone());
    }
    m
}

#[derive(Serialize)]
struct SelectionLine<'a> {
    query_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ordinals: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw_output: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    repair_notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn cmd_rank(args: &RankArgs) -> Result<PathBuf, CliError> {
    if args.dump_template {
        print!("{}", PromptTemplate::default().to_toml());
        return Ok(PathBuf::new());
    }
    let policy: MalformedPolicy = args.policy.parse().map_err(CliError::usage)?;
    let instances = load_instances(&args.data)?;
    let template = load_template(&args.data)?;
    let backends = make_backends(&args.backend)?;
    let config = snapshot(args);
    let dir = create_run_dir(&args.output, "rank", &config)?;
    let mut manifest = start_manifest("rank", config, args.backend.seed, &backends.ids);
    manifest.template_hash = Some(template.hash());

    let results: Vec<_> = instances
        .par_iter()
        .map(|inst| {
            let cs = &inst.candidates;
            backends
                .ranker
                .rank(cs, &template)
                .map_err(|e| (e.is_unavailable(), e.to_string()))
                .and_then(|r| parse_selection(&r.raw, cs.m(), policy).map_err(|e| (false, e.to_string())))
        })
        .collect();

    let mut out = String::new();
    let (mut failures, mut unavailable) = (0usize, 0usize);
    for (inst, r) in instances.iter().zip(&results) {
        let id = inst.query().id.as_str();
        let line = match r {
            Ok(sel) => SelectionLine {
                query_id: id,
                ordinals: Some(sel.ordinals.clone()),
                raw_output: Some(sel.raw_output.clone()),
                repair_notes: sel.repair_notes.clone(),
                error: None,
            },
            Err((unavail, msg)) => {
                failures += 1;
                unavailable += usize::from(*unavail);
                SelectionLine { query_id: id, ordinals: None, raw_output: None, repair_notes: Vec::new(), error: Some(msg.clone()) }
            }
        };
        out.push_str(&serde_json::to_string(&line).expect("selection serializes"));
        out.push('\n');
    }
    write_file(&dir.join("selections.jsonl"), &out)?;
    manifest.outputs.insert("selections".into(), json!({"queries": instances.len(), "failures": failures}));
    finish_manifest(manifest, &dir)?;

    if unavailable == instances.len() {
        return Err(CliError::backend("ranker backend unavailable for every query"));
    }
    if failures as f64 > adarank_core::pipeline::MAX_FAILURE_RATE * instances.len() as f64 {
        return Err(CliError::quality(format!("{failures} of {} queries failed", instances.len())));
    }
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}

fn scoring_config(judge: JudgeKind, recall_cap: Option<usize>, backends: &Backends) -> Result<ScoringConfig, CliError> {
    let entailment = match judge {
        JudgeKind::Lexical => EntailmentBackend::default(),
        JudgeKind::Llm => {
            let (client, model) = backends
                .chat
                .clone()
                .ok_or_else(|| CliError::usage("--judge llm needs --backend http"))?;
            EntailmentBackend::LlmJudge {
                backend: client,
                model,
                template: DEFAULT_JUDGE_TEMPLATE.to_string(),
            }
        }
    };
    Ok(ScoringConfig { recall_cap, entailment })
}

fn file_label(s: &Strategy) -> String {
    s.to_string().to_lowercase()
}

/// Runs each strategy, writes its run log, and scores it.
fn run_grid(
    strategies: &[Strategy],
    instances: &[EvalInstance],
    backends: &Backends,
    template: &PromptTemplate,
    scoring: &ScoringConfig,
    dir: &Path,
) -> Result<(Vec<StrategyReport>, Vec<RunOutcome>), CliError> {
    let ranker = CachedRanker::new(backends.ranker.clone());
    let logs = dir.join("runs");
    std::fs::create_dir_all(&logs).map_err(|e| CliError::io(&logs, e))?;
    let mut reports = Vec::new();
    let mut outcomes = Vec::new();
    for &s in strategies {
        let outcome = run_strategy(instances, s, s.needs_ranker().then_some(&ranker as &dyn Ranker), &*backends.generator, template);
        let log = logs.join(format!("{}.jsonl", file_label(&s)));
        write_run_log(&log, &outcome.runs).map_err(|e| CliError::io(&log, e))?;
        if outcome.backend_exhausted {
            return Err(CliError::backend(format!("{s}: backend unavailable for every query")));
        }
        reports.push(build_report(&outcome, instances, scoring).map_err(CliError::usage)?);
        outcomes.push(outcome);
    }
    Ok((reports, outcomes))
}

fn quality_check(outcomes: &[RunOutcome]) -> Result<(), CliError> {
    let bad: Vec<String> = outcomes
        .iter()
        .filter(|o| o.exceeds_failure_threshold())
        .map(|o| format!("{} ({:.1}% failed)", o.strategy, 100.0 * o.failure_rate()))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::quality(format!("too many failed queries: {}", bad.join(", "))))
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<PathBuf, CliError> {
    let strategies = parse_grid(&args.grid).map_err(CliError::usage)?;
    let instances = load_instances(&args.data)?;
    let template = load_template(&args.data)?;
    let backends = make_backends(&args.backend)?;
    let scoring = scoring_config(args.judge, args.recall_cap, &backends)?;
    let config = snapshot(args);
    let dir = create_run_dir(&args.output, "evaluate", &config)?;
    let mut manifest = start_manifest("evaluate", config, args.backend.seed, &backends.ids);
    manifest.template_hash = Some(template.hash());
    manifest.backends.insert("entailment".into(), scoring.entailment.describe());

    let (reports, outcomes) = run_grid(&strategies, &instances, &backends, &template, &scoring, &dir)?;
    write_json(&dir.join("report.json"), &reports)?;
    write_file(&dir.join("report.csv"), &reports_to_csv(&reports, None))?;
    let table = render_table(&reports, None);
    write_file(&dir.join("report.txt"), &table)?;
    print!("{table}");
    manifest.outputs.insert(
        "strategies".into(),
        json!(reports.iter().map(|r| json!({"strategy": r.label, r.metric.clone(): r.mean_primary, "failures": r.failures})).collect::<Vec<_>>()),
    );
    finish_manifest(manifest, &dir)?;
    quality_check(&outcomes)?;
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<PathBuf, CliError> {
    let instances = load_instances(&args.data)?;
    let template = load_template(&args.data)?;
    let backends = make_backends(&args.backend)?;
    let scoring = scoring_config(JudgeKind::Lexical, args.recall_cap, &backends)?;
    let config = snapshot(args);
    let dir = create_run_dir(&args.output, "oracle", &config)?;
    let mut manifest = start_manifest("oracle", config, args.backend.seed, &backends.ids);
    manifest.template_hash = Some(template.hash());

    let strategies: Vec<Strategy> = std::iter::once(Strategy::Vanilla { k: 0 })
        .chain((1..=args.max_k).map(|k| Strategy::Rerank { k }))
        .collect();
    let (reports, outcomes) = run_grid(&strategies, &instances, &backends, &template, &scoring, &dir)?;
    let by_k: BTreeMap<usize, &StrategyReport> =
        reports.iter().map(|r| (r.strategy.k().unwrap_or(0), r)).collect();
    let oracle = oracle_from_reports(&by_k, args.max_k).map_err(CliError::usage)?;

    let fixed: Vec<Value> = reports
        .iter()
        .map(|r| json!({"k": r.strategy.k().unwrap_or(0), "strategy": r.label, "mean": r.mean_primary}))
        .collect();
    let result = json!({
        "max_k": args.max_k,
        "metric": reports.first().map(|r| r.metric.clone()),
        "per_query": oracle.per_query,
        "per_dataset": oracle.per_dataset,
        "fixed_k": fixed,
    });
    write_json(&dir.join("oracle.json"), &result)?;
    write_file(&dir.join("report.csv"), &reports_to_csv(&reports, Some(&oracle)))?;
    match args.mode {
        OracleModeArg::PerQuery => println!("oracle (per query, k in 0..={}): {:.2}", args.max_k, oracle.per_query),
        OracleModeArg::PerDataset => println!("oracle (per dataset, k in 0..={}): {:.2}", args.max_k, oracle.per_dataset),
        OracleModeArg::Both => print!("{}", render_table(&reports, Some(&oracle))),
    }
    manifest.outputs.insert("oracle".into(), result);
    finish_manifest(manifest, &dir)?;
    quality_check(&outcomes)?;
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| CliError::usage(format!("invalid value `{value}` for --{flag}")))
}

fn distill_error(e: DistillError) -> CliError {
    match e {
        DistillError::DropRate { .. } => CliError::quality(e),
        DistillError::Backend(_) => CliError::backend(e),
        DistillError::Cluster(_) | DistillError::Empty => CliError::usage(e),
    }
}

fn query_vectors(args: &DistillArgs, sets: &[&CandidateSet]) -> Result<(Vec<Vec<f64>>, String), CliError> {
    let ids: Vec<&str> = sets.iter().map(|cs| cs.query.id.as_str()).collect();
    let (raw, source) = if let Some(path) = &args.embeddings {
        let records = load_embeddings(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let by_id: HashMap<String, Vec<f32>> = records.into_iter().map(|r| (r.id, r.vector)).collect();
        let vectors = ids
            .iter()
            .map(|id| {
                by_id
                    .get(*id)
                    .cloned()
                    .ok_or_else(|| CliError::usage(format!("{}: no embedding for query `{id}`", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dims: Vec<usize> = vectors.iter().map(Vec::len).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(CliError::usage(format!("{}: embeddings differ in dimension", path.display())));
        }
        (vectors, format!("file:{}", path.display()))
    } else {
        let texts: Vec<String> = sets.iter().map(|cs| cs.query.text.clone()).collect();
        let embedder: Box<dyn EmbeddingBackend> = match args.backend.backend {
            BackendKind::Mock => Box::new(HashingEmbedder::default()),
            BackendKind::Http => {
                Box::new(HttpEmbeddingClient::new(&http_config(&args.backend)?).map_err(CliError::usage)?)
            }
        };
        let vectors = embedder.embed(&texts).map_err(|e| match e {
            BackendError::Unavailable { .. } | BackendError::Rejected { .. } => CliError::backend(e),
            other => CliError::usage(other),
        })?;
        (vectors, embedder.describe())
    };
    Ok((raw.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect(), source))
}

pub fn cmd_distill_prep(args: &DistillArgs) -> Result<PathBuf, CliError> {
    let augment: Augmentations = args.augment.parse().map_err(CliError::usage)?;
    let cluster_cfg = ClusteringConfig {
        k: args.k,
        max_iters: args.max_iters,
        tol: args.tol,
        seed: args.backend.seed,
        init: parse_enum("init", &args.init)?,
        metric: parse_enum("metric", &args.metric)?,
        parallel: args.parallel,
    };
    let plan = SamplingPlan {
        total_samples: args.samples,
        allocation: parse_enum("allocation", &args.allocation)?,
        within_cluster: parse_enum("within-cluster", &args.within_cluster)?,
    };
    let instances = load_instances(&args.data)?;
    let template = load_template(&args.data)?;
    let backends = make_backends(&args.backend)?;
    let teacher = &*backends.ranker;
    let config = snapshot(args);
    let dir = create_run_dir(&args.output, "distill-prep", &config)?;
    let mut ids = BTreeMap::new();
    ids.insert("teacher".to_string(), backends.ids["ranker"].clone());
    let mut manifest = start_manifest("distill-prep", config, args.backend.seed, &ids);
    manifest.template_hash = Some(template.hash());

    let candidates: Vec<CandidateSet> = instances.iter().map(|i| i.candidates.clone()).collect();
    let (examples, labeling) = if args.stage == 1 {
        build_stage1(&candidates, teacher, &template).map_err(distill_error)?
    } else {
        let refs: Vec<&CandidateSet> = candidates.iter().collect();
        let (vectors, source) = query_vectors(args, &refs)?;
        manifest.backends.insert("embeddings".into(), source);
        let clusters = kmeans(&vectors, &cluster_cfg).map_err(|e| distill_error(e.into()))?;
        let qids: Vec<String> = candidates.iter().map(|c| c.query.id.clone()).collect();
        let sampled_ids = sample_representatives(&qids, &clusters.assignments, &clusters.distances, &plan, args.backend.seed)
            .map_err(|e| distill_error(e.into()))?;
        write_file(&dir.join("sampled_ids.txt"), &(sampled_ids.join("\n") + "\n"))?;
        manifest.outputs.insert(
            "clustering".into(),
            json!({"k": args.k, "iterations": clusters.iterations, "converged": clusters.converged, "inertia": clusters.inertia}),
        );
        manifest.outputs.insert("sampled_queries".into(), json!(sampled_ids.len()));
        let chosen: std::collections::HashSet<&str> = sampled_ids.iter().map(String::as_str).collect();
        let sampled: Vec<CandidateSet> =
            candidates.iter().filter(|c| chosen.contains(c.query.id.as_str())).cloned().collect();
        build_stage2(&sampled, teacher, &template, augment, args.backend.seed).map_err(distill_error)?
    };

    let train = dir.join("train.jsonl");
    let summary = emit_training_file(&examples, &train).map_err(|e| CliError::io(&train, e))?;
    let cfg_path = dir.join("training_config.json");
    TrainingConfig::default().write(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    println!(
        "stage {}: {} examples from {} source queries ({} dropped)",
        args.stage,
        summary.total,
        summary.source_queries,
        labeling.dropped()
    );
    manifest.outputs.insert("training_file".into(), serde_json::to_value(&summary).expect("summary serializes"));
    manifest.outputs.insert("labeling".into(), serde_json::to_value(&labeling).expect("report serializes"));
    manifest.outputs.insert(
        "training_config".into(),
        serde_json::to_value(TrainingConfig::default()).expect("config serializes"),
    );
    finish_manifest(manifest, &dir)?;
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}

pub fn cmd_synth_bench(args: &SynthArgs) -> Result<PathBuf, CliError> {
    let strategies = parse_grid(&args.grid).map_err(CliError::usage)?;
    let cfg = SynthConfig {
        num_queries: usize::try_from(args.queries).map_err(CliError::usage)?,
        m: args.m,
        relevant: if args.p0 > 0.0 {
            RelevantCount::ZeroWithProb { p0: args.p0, count: args.relevant }
        } else {
            RelevantCount::Fixed { count: args.relevant }
        },
        overlap: match args.overlap {
            OverlapArg::Low => Overlap::Low,
            OverlapArg::High => Overlap::High,
        },
        order: match args.order {
            OrderArg::Random => CandidateOrder::Random,
            OrderArg::Bm25 => CandidateOrder::Bm25,
        },
        seed: args.seed,
    };
    let corpus = generate_synth(&cfg).map_err(CliError::usage)?;
    let make = |robustness| MockGenerator {
        robustness,
        knowledge_rate: args.knowledge_rate,
        seed: args.seed,
        labels: corpus.labels.clone(),
    };
    let (weak, strong) = (make(args.weak), make(args.strong));
    let report = run_shift_experiment(&corpus, &weak, &strong, &strategies).map_err(CliError::usage)?;

    let config = snapshot(args);
    let dir = create_run_dir(&args.output, "synth-bench", &config)?;
    let mut ids = BTreeMap::new();
    ids.insert("weak".to_string(), weak.describe());
    ids.insert("strong".to_string(), strong.describe());
    ids.insert("ranker".to_string(), format!("mock-oracle-ranker(noise=0,seed={})", args.seed));
    let mut manifest = start_manifest("synth-bench", config, args.seed, &ids);
    manifest.template_hash = Some(PromptTemplate::default().hash());

    let corpus_path = dir.join("corpus.jsonl");
    write_native(&corpus_path, &corpus.instances).map_err(|e| CliError::io(&corpus_path, e))?;
    let labels_path = dir.join("labels.jsonl");
    corpus.labels.write(&labels_path).map_err(|e| CliError::io(&labels_path, e))?;
    write_json(&dir.join("shift_report.json"), &report)?;
    write_file(&dir.join("shift_report.csv"), &report.to_csv())?;

    let mut out = std::io::stdout().lock();
    for d in &report.deltas {
        let _ = writeln!(
            out,
            "{:<6} (robustness {}): Vanilla-10 {:.2}  AdaRank {:.2}  delta {:+.2}  context ratio {:.3}",
            d.generator, d.robustness, d.vanilla10_accuracy, d.adarank_accuracy, d.delta_accuracy, d.context_ratio
        );
    }
    manifest.outputs.insert("deltas".into(), serde_json::to_value(&report.deltas).expect("deltas serialize"));
    finish_manifest(manifest, &dir)?;
    eprintln!("wrote {}", dir.display());
    Ok(dir)
}
