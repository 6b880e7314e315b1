//! Strategy execution: build each query's context under Vanilla-k, Rerank-k or
//! adaptive selection, then generate an answer from it.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendError, ChatBackend, ChatRequest, Generation, Generator, Ranker, RankerReply,
};
use crate::protocol::{build_rank_prompt, parse_selection, ChatMessage, MalformedPolicy, PromptTemplate};
use crate::text::normalize_answer;
use crate::types::{CandidateSet, EvalInstance, GoldKind, Passage};

/// Fraction of failed queries above which a run is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// First `k` passages in retrieval order; `k = 0` is closed-book.
    Vanilla { k: usize },
    /// First `k` passages after listwise reranking (a full permutation).
    Rerank { k: usize },
    /// The ranker's selection verbatim, possibly empty.
    AdaRank,
}

impl Strategy {
    pub fn needs_ranker(&self) -> bool {
        !matches!(self, Strategy::Vanilla { .. })
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            Strategy::Vanilla { k } | Strategy::Rerank { k } => Some(*k),
            Strategy::AdaRank => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Vanilla { k } => write!(f, "Vanilla-{k}"),
            Strategy::Rerank { k } => write!(f, "Rerank-{k}"),
            Strategy::AdaRank => f.write_str("AdaRank"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid strategy grid `{input}`: {reason}")]
pub struct GridError {
    pub input: String,
    pub reason: String,
}

impl FromStr for Strategy {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let grid = parse_grid(s)?;
        match grid.as_slice() {
            [one] => Ok(*one),
            _ => Err(GridError {
                input: s.to_string(),
                reason: "expected a single strategy".into(),
            }),
        }
    }
}

/// Parses the compact grid DSL, e.g. `vanilla:0,1,3,5,10 rerank:1,3,5,10 adarank`.
/// Duplicates are dropped, order of first appearance kept.
pub fn parse_grid(input: &str) -> Result<Vec<Strategy>, GridError> {
    let err = |reason: String| GridError {
        input: input.to_string(),
        reason,
    };
    let mut out: Vec<Strategy> = Vec::new();
    for group in input.split_whitespace() {
        let (kind, ks) = match group.split_once(':') {
            Some((kind, ks)) => (kind.to_ascii_lowercase(), Some(ks)),
            None => (group.to_ascii_lowercase(), None),
        };
        let parse_ks = |ks: Option<&str>| -> Result<Vec<usize>, GridError> {
            let ks = ks.ok_or_else(|| err(format!("`{kind}` needs a k list, e.g. {kind}:1,3")))?;
            ks.split(',')
                .map(|k| {
                    k.trim()
                        .parse::<usize>()
                        .map_err(|_| err(format!("`{k}` is not a non-negative integer")))
                })
                .collect()
        };
        let strategies: Vec<Strategy> = match kind.as_str() {
            "vanilla" => parse_ks(ks)?.into_iter().map(|k| Strategy::Vanilla { k }).collect(),
            "rerank" => parse_ks(ks)?.into_iter().map(|k| Strategy::Rerank { k }).collect(),
            "adarank" => {
                if ks.is_some() {
                    return Err(err("adarank takes no k list".into()));
                }
                vec![Strategy::AdaRank]
            }
            other => return Err(err(format!("unknown strategy `{other}`"))),
        };
        for s in strategies {
            if !out.contains(&s) {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(err("no strategies given".into()));
    }
    Ok(out)
}

/// One query's execution record; one JSONL line of the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRun {
    pub query_id: String,
    pub strategy: Strategy,
    pub context_ordinals: Vec<usize>,
    pub answer_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub ranker_raw: Option<String>,
    pub ranker_prompt_tokens: u64,
    pub repair_notes: Vec<String>,
    pub failure: Option<String>,
}

impl QueryRun {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub strategy: Strategy,
    pub runs: Vec<QueryRun>,
    /// Every query failed because the backend was unavailable.
    pub backend_exhausted: bool,
}

impl RunOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.failed()).count()
    }

    pub fn failure_rate(&self) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        self.failures() as f64 / self.runs.len() as f64
    }

    pub fn exceeds_failure_threshold(&self) -> bool {
        self.failure_rate() > MAX_FAILURE_RATE
    }
}

/// Context passages for a strategy given the raw ranker output (when needed).
pub fn context_for(
    strategy: Strategy,
    cs: &CandidateSet,
    ranker_raw: Option<&str>,
) -> Result<(Vec<usize>, Vec<String>), BackendError> {
    let m = cs.m();
    match strategy {
        Strategy::Vanilla { k } => Ok(((1..=k.min(m)).collect(), Vec::new())),
        Strategy::Rerank { k } => {
            let raw = ranker_raw.ok_or_else(|| BackendError::InvalidRequest("rerank needs ranker output".into()))?;
            let sel = parse_selection(raw, m, MalformedPolicy::FallbackOriginalOrder)
                .expect("fallback policy never fails");
            let mut order = sel.ordinals;
            // Dropped passages go after the selected ones, in retrieval order.
            for o in 1..=m {
                if !order.contains(&o) {
                    order.push(o);
                }
            }
            order.truncate(k);
            Ok((order, sel.repair_notes))
        }
        Strategy::AdaRank => {
            let raw = ranker_raw.ok_or_else(|| BackendError::InvalidRequest("adarank needs ranker output".into()))?;
            let sel = parse_selection(raw, m, MalformedPolicy::FallbackOriginalOrder)
                .expect("fallback policy never fails");
            Ok((sel.ordinals, sel.repair_notes))
        }
    }
}

/// Answer prompt: optional numbered documents in context order, the question,
/// then a format instruction chosen by the gold kind.
pub fn build_answer_prompt(question: &str, passages: &[&Passage], kind: GoldKind) -> Vec<ChatMessage> {
    let mut user = String::new();
    if !passages.is_empty() {
        for (i, p) in passages.iter().enumerate() {
            let title = p.title.as_deref().map(str::trim).unwrap_or("");
            user.push_str(&format!("Document [{}] ({}): {}\n", i + 1, title, p.text.trim()));
        }
        user.push('\n');
    }
    user.push_str(&format!("Question: {}\n\n", question.trim()));
    user.push_str(match kind {
        GoldKind::ShortAnswers => {
            "Answer the question with a short factual answer. If the question is ambiguous, \
             give every plausible answer."
        }
        GoldKind::ListAnswers => {
            "Answer with a comma-separated list of entities that answer the question, \
             and nothing else."
        }
        GoldKind::Claims => "Answer the question in a concise, informative paragraph.",
    });
    let system = if passages.is_empty() {
        "You are a helpful assistant that answers questions accurately."
    } else {
        "You are a helpful assistant that answers questions accurately, using the provided \
         documents where they are useful."
    };
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

/// Splits a list answer on commas and newlines into normalized, non-empty items.
pub fn extract_list_items(answer: &str) -> Vec<String> {
    answer
        .split([',', '\n', ';'])
        .map(normalize_answer)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Listwise ranker backed by a chat model.
pub struct LlmRanker {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
    pub max_output_tokens: u32,
}

impl Ranker for LlmRanker {
    fn rank(&self, cs: &CandidateSet, template: &PromptTemplate) -> Result<RankerReply, BackendError> {
        let mut req = ChatRequest::new(self.model.clone(), build_rank_prompt(cs, template));
        req.max_output_tokens = self.max_output_tokens;
        let resp = self.backend.chat(&req)?;
        Ok(RankerReply {
            raw: resp.text,
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
        })
    }

    fn describe(&self) -> String {
        format!("llm-ranker:{}", self.backend.describe())
    }
}

/// Answer generator backed by a chat model.
pub struct LlmGenerator {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
    pub max_output_tokens: u32,
}

impl Generator for LlmGenerator {
    fn generate(&self, inst: &EvalInstance, context: &[usize]) -> Result<Generation, BackendError> {
        let passages: Vec<&Passage> = context
            .iter()
            .filter_map(|o| inst.candidates.passage(*o))
            .collect();
        let messages = build_answer_prompt(&inst.query().text, &passages, inst.gold.kind());
        let mut req = ChatRequest::new(self.model.clone(), messages);
        req.max_output_tokens = self.max_output_tokens;
        let resp = self.backend.chat(&req)?;
        Ok(Generation {
            text: resp.text,
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
        })
    }

    fn describe(&self) -> String {
        format!("llm-generator:{}", self.backend.describe())
    }
}

/// Memoizes ranker replies per query id, so a strategy grid ranks each query once.
pub struct CachedRanker<R> {
    inner: R,
    cache: Mutex<HashMap<String, RankerReply>>,
}

impl<R: Ranker> CachedRanker<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<R: Ranker> Ranker for CachedRanker<R> {
    fn rank(&self, cs: &CandidateSet, template: &PromptTemplate) -> Result<RankerReply, BackendError> {
        let key = format!("{}\u{0}{}", template.hash(), cs.query.id);
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let reply = self.inner.rank(cs, template)?;
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(key, reply.clone());
        Ok(reply)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

fn run_one(
    inst: &EvalInstance,
    strategy: Strategy,
    ranker: Option<&dyn Ranker>,
    generator: &dyn Generator,
    template: &PromptTemplate,
) -> Result<QueryRun, (BackendError, Option<String>)> {
    let cs = &inst.candidates;
    let (ranker_raw, ranker_prompt_tokens) = if strategy.needs_ranker() {
        let ranker = ranker.ok_or_else(|| {
            (BackendError::InvalidRequest(format!("{strategy} needs a ranker backend")), None)
        })?;
        let reply = ranker.rank(cs, template).map_err(|e| (e, None))?;
        (Some(reply.raw), reply.prompt_tokens)
    } else {
        (None, 0)
    };
    let (context, notes) =
        context_for(strategy, cs, ranker_raw.as_deref()).map_err(|e| (e, ranker_raw.clone()))?;
    let generation = generator
        .generate(inst, &context)
        .map_err(|e| (e, ranker_raw.clone()))?;
    Ok(QueryRun {
        query_id: cs.query.id.clone(),
        strategy,
        context_ordinals: context,
        answer_text: generation.text,
        prompt_tokens: generation.prompt_tokens,
        completion_tokens: generation.completion_tokens,
        ranker_raw,
        ranker_prompt_tokens,
        repair_notes: notes,
        failure: None,
    })
}

/// Runs one strategy over every instance. Queries run concurrently; results
/// come back in input order. Backend failures are recorded per query and the
/// run continues; callers check [`RunOutcome::exceeds_failure_threshold`].
pub fn run_strategy(
    instances: &[EvalInstance],
    strategy: Strategy,
    ranker: Option<&dyn Ranker>,
    generator: &dyn Generator,
    template: &PromptTemplate,
) -> RunOutcome {
    let results: Vec<(QueryRun, Option<bool>)> = instances
        .par_iter()
        .map(|inst| match run_one(inst, strategy, ranker, generator, template) {
            Ok(run) => (run, None),
            Err((e, raw)) => {
                tracing::warn!(query = %inst.query().id, %strategy, error = %e, "query failed");
                let run = QueryRun {
                    query_id: inst.query().id.clone(),
                    strategy,
                    context_ordinals: Vec::new(),
                    answer_text: String::new(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    ranker_raw: raw,
                    ranker_prompt_tokens: 0,
                    repair_notes: Vec::new(),
                    failure: Some(e.to_string()),
                };
                (run, Some(e.is_unavailable()))
            }
        })
        .collect();
    let failures: Vec<bool> = results.iter().filter_map(|(_, f)| *f).collect();
    let backend_exhausted =
        !results.is_empty() && failures.len() == results.len() && failures.iter().all(|u| *u);
    RunOutcome {
        strategy,
        runs: results.into_iter().map(|(r, _)| r).collect(),
        backend_exhausted,
    }
}

pub fn run_log_lines(runs: &[QueryRun]) -> String {
    let mut out = String::new();
    for run in runs {
        out.push_str(&serde_json::to_string(run).expect("query run serializes"));
        out.push('\n');
    }
    out
}

pub fn write_run_log(path: &Path, runs: &[QueryRun]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(run_log_lines(runs).as_bytes())?;
    w.flush()
}
