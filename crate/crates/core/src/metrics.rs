//! Scoring of query runs, strategy reports and the best-k oracle bound.
//!
//! All scores are percentages in `[0, 100]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatRequest};
use crate::pipeline::{extract_list_items, QueryRun, RunOutcome, Strategy};
use crate::protocol::ChatMessage;
use crate::text::{content_words, normalize_answer, tokens};
use crate::types::{AliasSet, EvalInstance, GoldKind, GoldLabels};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("Overall* needs all three dataset scores; missing {0}")]
    MissingComponent(&'static str),
    #[error("query {query} has no score for k={k}")]
    MissingK { query: usize, k: usize },
    #[error("no scores to aggregate")]
    Empty,
    #[error("no gold labels for query `{0}`")]
    UnknownQuery(String),
}

/// STR-EM: share of alias sets with at least one alias occurring as a substring
/// of the normalized answer.
pub fn score_str_em(answer: &str, gold: &[AliasSet]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let answer = normalize_answer(answer);
    if answer.is_empty() {
        return 0.0;
    }
    let hits = gold
        .iter()
        .filter(|set| {
            set.iter().any(|alias| {
                let alias = normalize_answer(alias);
                !alias.is_empty() && answer.contains(&alias)
            })
        })
        .count();
    100.0 * hits as f64 / gold.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-based precision/recall/F1 for list answers.
///
/// Predictions are normalized and deduplicated. Each gold alias set can be
/// matched at most once, and the match count is a maximum bipartite matching,
/// so the result does not depend on prediction order.
pub fn score_list_f1(pred_items: &[String], gold: &[AliasSet], recall_cap: Option<usize>) -> PrecisionRecall {
    let mut seen = HashSet::new();
    let preds: Vec<String> = pred_items
        .iter()
        .map(|p| normalize_answer(p))
        .filter(|p| !p.is_empty() && seen.insert(p.clone()))
        .collect();
    let gold_norm: Vec<HashSet<String>> = gold
        .iter()
        .map(|set| set.iter().map(|a| normalize_answer(a)).collect())
        .collect();
    let edges: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            gold_norm
                .iter()
                .enumerate()
                .filter(|(_, set)| set.contains(p))
                .map(|(g, _)| g)
                .collect()
        })
        .collect();
    let matches = max_matching(&edges, gold.len()) as f64;

    let precision = if preds.is_empty() { 0.0 } else { matches / preds.len() as f64 };
    let denom = match recall_cap {
        Some(cap) => gold.len().min(cap),
        None => gold.len(),
    };
    let recall = if denom == 0 { 0.0 } else { (matches / denom as f64).min(1.0) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall {
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    }
}

// Kuhn's augmenting-path matching; inputs are tiny.
fn max_matching(edges: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, edges: &[Vec<usize>], visited: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &edges[u] {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            if owner[v].is_none_or(|w| augment(w, edges, visited, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    (0..edges.len())
        .filter(|&u| {
            let mut visited = vec![false; n_right];
            augment(u, edges, &mut visited, &mut owner)
        })
        .count()
}

pub const DEFAULT_JUDGE_TEMPLATE: &str = "Premise: {premise}\n\nHypothesis: {hypothesis}\n\n\
Does the premise entail the hypothesis? Answer with a single word: yes or no.";

/// Decides whether an answer entails a claim.
#[derive(Clone)]
pub enum EntailmentBackend {
    /// Entailed iff at least `threshold` of the claim's content words occur in
    /// the answer (normalized, no stemming).
    Lexical { threshold: f64 },
    /// Asks a chat model; `template` takes `{premise}` and `{hypothesis}`.
    LlmJudge {
        backend: Arc<dyn ChatBackend>,
        model: String,
        template: String,
    },
}

impl Default for EntailmentBackend {
    fn default() -> Self {
        EntailmentBackend::Lexical { threshold: 0.8 }
    }
}

impl std::fmt::Debug for EntailmentBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntailmentBackend::Lexical { threshold } => write!(f, "Lexical({threshold})"),
            EntailmentBackend::LlmJudge { backend, .. } => write!(f, "LlmJudge({})", backend.describe()),
        }
    }
}

impl EntailmentBackend {
    pub fn describe(&self) -> String {
        format!("{self:?}")
    }
}

pub fn lexical_entails(answer: &str, claim: &str, threshold: f64) -> bool {
    let mut claim_words: Vec<String> = content_words(claim);
    if claim_words.is_empty() {
        claim_words = tokens(claim);
    }
    let claim_words: HashSet<String> = claim_words.into_iter().collect();
    if claim_words.is_empty() {
        return false;
    }
    let answer_words: HashSet<String> = tokens(answer).into_iter().collect();
    let covered = claim_words.iter().filter(|w| answer_words.contains(*w)).count();
    covered as f64 / claim_words.len() as f64 >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecall {
    pub score: f64,
    /// Claims the judge could not assess; each is scored as not entailed.
    pub failed_claims: usize,
}

pub fn score_claim_recall(answer: &str, claims: &[String], backend: &EntailmentBackend) -> ClaimRecall {
    if claims.is_empty() || answer.trim().is_empty() {
        return ClaimRecall { score: 0.0, failed_claims: 0 };
    }
    let mut entailed = 0usize;
    let mut failed = 0usize;
    for claim in claims {
        match backend {
            EntailmentBackend::Lexical { threshold } => {
                if lexical_entails(answer, claim, *threshold) {
                    entailed += 1;
                }
            }
            EntailmentBackend::LlmJudge { backend, model, template } => {
                let prompt = template.replace("{premise}", answer).replace("{hypothesis}", claim);
                let req = ChatRequest::new(model.clone(), vec![ChatMessage::user(prompt)]);
                match backend.chat(&req) {
                    Ok(resp) => {
                        if resp.text.trim().to_ascii_lowercase().starts_with("yes") {
                            entailed += 1;
                        }
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "entailment judge failed; claim scored 0");
                        failed += 1;
                    }
                }
            }
        }
    }
    ClaimRecall {
        score: 100.0 * entailed as f64 / claims.len() as f64,
        failed_claims: failed,
    }
}

/// Mean of the three dataset scores. Every component is required.
pub fn overall_star(asqa_em: Option<f64>, eli5_claim: Option<f64>, qampari_f1: Option<f64>) -> Result<f64, MetricsError> {
    let em = asqa_em.ok_or(MetricsError::MissingComponent("ASQA EM"))?;
    let claim = eli5_claim.ok_or(MetricsError::MissingComponent("ELI5 claim recall"))?;
    let f1 = qampari_f1.ok_or(MetricsError::MissingComponent("QAMPARI F1"))?;
    Ok((em + claim + f1) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Mean over queries of each query's best k.
    #[default]
    PerQuery,
    /// Best k for the dataset mean.
    PerDataset,
}

impl std::str::FromStr for OracleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_query" | "query" => Ok(Self::PerQuery),
            "per_dataset" | "dataset" => Ok(Self::PerDataset),
            other => Err(format!("unknown oracle mode `{other}`")),
        }
    }
}

/// Best-k oracle over per-query scores for k in `0..=max_k`.
///
/// `scores[q]` maps k to query q's score. Per-query mode requires every k for
/// every query; per-dataset mode averages whatever is present for each k.
pub fn oracle_best_k<T: Float>(scores: &[BTreeMap<usize, T>], max_k: usize, mode: OracleMode) -> Result<T, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    match mode {
        OracleMode::PerQuery => {
            let mut total = T::zero();
            for (q, row) in scores.iter().enumerate() {
                let mut best = T::neg_infinity();
                for k in 0..=max_k {
                    let s = *row.get(&k).ok_or(MetricsError::MissingK { query: q, k })?;
                    best = best.max(s);
                }
                total = total + best;
            }
            Ok(total / T::from(scores.len()).expect("query count fits the scalar type"))
        }
        OracleMode::PerDataset => {
            let mut best: Option<T> = None;
            for k in 0..=max_k {
                let present: Vec<T> = scores.iter().filter_map(|row| row.get(&k).copied()).collect();
                if present.is_empty() {
                    continue;
                }
                let sum = present.iter().fold(T::zero(), |a, b| a + *b);
                let mean = sum / T::from(present.len()).expect("count fits the scalar type");
                best = Some(best.map_or(mean, |b| b.max(mean)));
            }
            best.ok_or(MetricsError::Empty)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
    pub ranker_prompt: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub primary_metric: f64,
    /// (precision, recall), present iff the gold kind is list answers.
    pub components: Option<(f64, f64)>,
    pub context_size: usize,
    pub tokens: TokenCounts,
    /// Set when part of the score could not be computed (e.g. judge failures).
    pub flagged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ScoringConfig {
    pub recall_cap: Option<usize>,
    pub entailment: EntailmentBackend,
}

pub fn metric_name(kind: GoldKind) -> &'static str {
    match kind {
        GoldKind::ShortAnswers => "str_em",
        GoldKind::ListAnswers => "f1",
        GoldKind::Claims => "claim_recall",
    }
}

pub fn score_run(run: &QueryRun, gold: &GoldLabels, cfg: &ScoringConfig) -> QueryScore {
    let (primary, components, flagged) = match gold {
        GoldLabels::ShortAnswers(sets) => (score_str_em(&run.answer_text, sets), None, false),
        GoldLabels::ListAnswers(sets) => {
            let pr = score_list_f1(&extract_list_items(&run.answer_text), sets, cfg.recall_cap);
            (pr.f1, Some((pr.precision, pr.recall)), false)
        }
        GoldLabels::Claims(claims) => {
            let cr = score_claim_recall(&run.answer_text, claims, &cfg.entailment);
            (cr.score, None, cr.failed_claims > 0)
        }
    };
    QueryScore {
        query_id: run.query_id.clone(),
        primary_metric: primary,
        components,
        context_size: run.context_ordinals.len(),
        tokens: TokenCounts {
            prompt: run.prompt_tokens,
            completion: run.completion_tokens,
            ranker_prompt: run.ranker_prompt_tokens,
        },
        flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub label: String,
    pub metric: String,
    pub scores: Vec<QueryScore>,
    pub mean_primary: f64,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_context_size: f64,
    pub mean_prompt_tokens: f64,
    pub failures: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Scores every non-failed run; aggregates are means over the scored queries.
pub fn build_report(outcome: &RunOutcome, instances: &[EvalInstance], cfg: &ScoringConfig) -> Result<StrategyReport, MetricsError> {
    let gold: BTreeMap<&str, &GoldLabels> = instances.iter().map(|i| (i.query().id.as_str(), &i.gold)).collect();
    let kind = instances.first().map(|i| i.gold.kind()).ok_or(MetricsError::Empty)?;
    let mut scores = Vec::new();
    for run in outcome.runs.iter().filter(|r| !r.failed()) {
        let g = gold
            .get(run.query_id.as_str())
            .ok_or_else(|| MetricsError::UnknownQuery(run.query_id.clone()))?;
        scores.push(score_run(run, g, cfg));
    }
    let list = kind == GoldKind::ListAnswers;
    Ok(StrategyReport {
        strategy: outcome.strategy,
        label: outcome.strategy.to_string(),
        metric: metric_name(kind).to_string(),
        mean_primary: mean(scores.iter().map(|s| s.primary_metric)),
        mean_precision: list.then(|| mean(scores.iter().filter_map(|s| s.components.map(|c| c.0)))),
        mean_recall: list.then(|| mean(scores.iter().filter_map(|s| s.components.map(|c| c.1)))),
        mean_context_size: mean(scores.iter().map(|s| s.context_size as f64)),
        mean_prompt_tokens: mean(scores.iter().map(|s| s.tokens.prompt as f64)),
        failures: outcome.failures(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub max_k: usize,
    pub per_query: f64,
    pub per_dataset: f64,
}

/// Oracle over a set of Rerank-k (or Vanilla-0) reports indexed by k.
pub fn oracle_from_reports(by_k: &BTreeMap<usize, &StrategyReport>, max_k: usize) -> Result<OracleSummary, MetricsError> {
    let mut query_order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for (k, report) in by_k {
        for s in &report.scores {
            if !rows.contains_key(&s.query_id) {
                query_order.push(s.query_id.clone());
            }
            rows.entry(s.query_id.clone()).or_default().insert(*k, s.primary_metric);
        }
    }
    let matrix: Vec<BTreeMap<usize, f64>> = query_order.iter().map(|q| rows[q].clone()).collect();
    Ok(OracleSummary {
        max_k,
        per_query: oracle_best_k(&matrix, max_k, OracleMode::PerQuery)?,
        per_dataset: oracle_best_k(&matrix, max_k, OracleMode::PerDataset)?,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_default()
}

/// CSV with one row per strategy plus an optional oracle row.
pub fn reports_to_csv(reports: &[StrategyReport], oracle: Option<&OracleSummary>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "k", "metric", "P", "R", "F1", "mean_context_size", "mean_prompt_tokens"])
        .expect("in-memory csv");
    for r in reports {
        let list = r.mean_precision.is_some();
        w.write_record([
            r.label.clone(),
            r.strategy.k().map(|k| k.to_string()).unwrap_or_default(),
            format!("{:.2}", r.mean_primary),
            fmt_opt(r.mean_precision),
            fmt_opt(r.mean_recall),
            if list { format!("{:.2}", r.mean_primary) } else { String::new() },
            format!("{:.2}", r.mean_context_size),
            format!("{:.2}", r.mean_prompt_tokens),
        ])
        .expect("in-memory csv");
    }
    if let Some(o) = oracle {
        w.write_record(["Oracle".to_string(), o.max_k.to_string(), format!("{:.2}", o.per_query), String::new(), String::new(), String::new(), String::new(), String::new()])
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn row_rank(s: &Strategy) -> (u8, usize) {
    match s {
        Strategy::Vanilla { k } => (0, *k),
        Strategy::Rerank { k } => (1, *k),
        Strategy::AdaRank => (2, 0),
    }
}

/// Plain-text table: Vanilla rows, Rerank rows, AdaRank, then Oracle.
pub fn render_table(reports: &[StrategyReport], oracle: Option<&OracleSummary>) -> String {
    let mut rows: Vec<&StrategyReport> = reports.iter().collect();
    rows.sort_by_key(|r| row_rank(&r.strategy));
    let metric = reports.first().map(|r| r.metric.as_str()).unwrap_or("metric");
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>8} {:>8} {:>9} {:>11} {:>6}", "Method", metric, "P", "R", "ctx", "prompt_tok", "fail");
    let mut last_group = None;
    for r in rows {
        let group = row_rank(&r.strategy).0;
        if last_group.is_some_and(|g| g != group) {
            let _ = writeln!(out, "{}", "-".repeat(70));
        }
        last_group = Some(group);
        let _ = writeln!(
            out,
            "{:<12} {:>10.2} {:>8} {:>8} {:>9.2} {:>11.1} {:>6}",
            r.label,
            r.mean_primary,
            fmt_opt(r.mean_precision),
            fmt_opt(r.mean_recall),
            r.mean_context_size,
            r.mean_prompt_tokens,
            r.failures
        );
    }
    if let Some(o) = oracle {
        let _ = writeln!(out, "{}", "-".repeat(70));
        let _ = writeln!(out, "{:<12} {:>10.2}   (per-dataset best k: {:.2}, k in 0..={})", "Oracle", o.per_query, o.per_dataset, o.max_k);
    }
    out
}
