//! Deterministic local backends.
//!
//! [`MockOracleRanker`] answers from relevance labels, optionally corrupting its
//! output in the ways the selection parser knows how to repair.
//! [`MockGenerator`] is a behavioural noise model: it answers correctly iff the
//! context holds a relevant passage and every irrelevant passage in it is
//! independently ignored with probability `robustness`; with an empty context
//! it answers from parametric knowledge with probability `knowledge_rate`.
//!
//! Every random draw comes from a stream seeded by `(seed, query id)`, so
//! outcomes do not depend on execution order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, Generation, Generator, Ranker,
    RankerReply,
};
use crate::pipeline::build_answer_prompt;
use crate::protocol::{build_rank_prompt, render_selection, PromptTemplate};
use crate::seeding::rng_for;
use crate::text::approx_token_count;
use crate::types::{CandidateSet, EvalInstance, GoldLabels};

/// Graded relevance per (query id, ordinal). Ordinals absent from a query's map
/// have grade 0; a query absent from the map has no labels at all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceLabels {
    grades: BTreeMap<String, BTreeMap<usize, u8>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    query_id: String,
    relevant_ordinals: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grades: Option<Vec<u8>>,
}

impl RelevanceLabels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a query; all of its passages start irrelevant.
    pub fn add_query(&mut self, query_id: impl Into<String>) {
        self.grades.entry(query_id.into()).or_default();
    }

    pub fn set(&mut self, query_id: &str, ordinal: usize, grade: u8) {
        let q = self.grades.entry(query_id.to_string()).or_default();
        if grade == 0 {
            q.remove(&ordinal);
        } else {
            q.insert(ordinal, grade.min(2));
        }
    }

    pub fn contains(&self, query_id: &str) -> bool {
        self.grades.contains_key(query_id)
    }

    pub fn grade(&self, query_id: &str, ordinal: usize) -> u8 {
        self.grades
            .get(query_id)
            .and_then(|q| q.get(&ordinal))
            .copied()
            .unwrap_or(0)
    }

    pub fn relevant(&self, query_id: &str) -> Option<BTreeSet<usize>> {
        self.grades.get(query_id).map(|q| q.keys().copied().collect())
    }

    /// Relevant ordinals sorted by (grade desc, ordinal asc).
    pub fn ranked(&self, query_id: &str) -> Option<Vec<usize>> {
        let q = self.grades.get(query_id)?;
        let mut v: Vec<(usize, u8)> = q.iter().map(|(o, g)| (*o, *g)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Some(v.into_iter().map(|(o, _)| o).collect())
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// Number of (query, ordinal) pairs with grade > 0.
    pub fn relevant_pairs(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    /// JSONL `{"query_id": str, "relevant_ordinals": [int], "grades": [int]}`
    /// with ordinals in ranked order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for id in self.grades.keys() {
            let ranked = self.ranked(id).unwrap_or_default();
            let grades = ranked.iter().map(|o| self.grade(id, *o)).collect();
            let line = LabelLine {
                query_id: id.clone(),
                relevant_ordinals: ranked,
                grades: Some(grades),
            };
            out.push_str(&serde_json::to_string(&line).expect("label line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }

    /// Parses label JSONL. Without a `grades` array every listed ordinal gets grade 1.
    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let mut labels = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Decode(format!("labels line {}: {e}", i + 1)))?;
            if let Some(g) = &rec.grades {
                if g.len() != rec.relevant_ordinals.len() {
                    return Err(BackendError::Decode(format!(
                        "labels line {}: grades and relevant_ordinals differ in length",
                        i + 1
                    )));
                }
            }
            labels.add_query(rec.query_id.clone());
            for (j, o) in rec.relevant_ordinals.iter().enumerate() {
                let grade = rec.grades.as_ref().map_or(1, |g| g[j]).max(1);
                labels.set(&rec.query_id, *o, grade);
            }
        }
        Ok(labels)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Output corruptions the mock ranker can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Identifier list wrapped in explanatory prose.
    ProseWrapper,
    /// First identifier repeated.
    DuplicateId,
    /// An identifier beyond the candidate count inserted.
    OutOfRangeId,
    /// No identifier at all; only recoverable through a fallback policy.
    NoIdentifiers,
}

/// The default catalog: exactly the cases the parser repairs without a fallback.
pub const REPAIRABLE_CORRUPTIONS: [Corruption; 3] = [
    Corruption::ProseWrapper,
    Corruption::DuplicateId,
    Corruption::OutOfRangeId,
];

fn corrupt(kind: Corruption, ranked: &[usize], m: usize) -> String {
    let clean = render_selection(ranked).expect("labels yield a valid selection");
    match (kind, ranked.first()) {
        (Corruption::DuplicateId, Some(&first)) => {
            let mut ids = vec![first];
            ids.extend_from_slice(ranked);
            join_ids(&ids)
        }
        (Corruption::OutOfRangeId, Some(&first)) => {
            let mut ids = vec![first, m + 1];
            ids.extend_from_slice(&ranked[1..]);
            join_ids(&ids)
        }
        (Corruption::NoIdentifiers, _) => {
            "I am unable to judge which passages are relevant to this query.".to_string()
        }
        _ => format!("Based on the query, the ranking is: {clean}. These are the useful passages."),
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|o| format!("[{o}]"))
        .collect::<Vec<_>>()
        .join(" > ")
}

#[derive(Debug, Clone)]
pub struct MockOracleRanker {
    pub labels: Arc<RelevanceLabels>,
    pub noise_rate: f64,
    pub seed: u64,
    pub corruptions: Vec<Corruption>,
}

impl MockOracleRanker {
    pub fn new(labels: Arc<RelevanceLabels>, noise_rate: f64, seed: u64) -> Self {
        Self {
            labels,
            noise_rate,
            seed,
            corruptions: REPAIRABLE_CORRUPTIONS.to_vec(),
        }
    }

    pub fn with_corruptions(mut self, corruptions: Vec<Corruption>) -> Self {
        self.corruptions = corruptions;
        self
    }
}

/// Labels rendered as a selection, possibly corrupted per `noise_rate`.
pub fn mock_rank(oracle: &MockOracleRanker, cs: &CandidateSet) -> Result<String, BackendError> {
    let id = &cs.query.id;
    let ranked: Vec<usize> = oracle
        .labels
        .ranked(id)
        .ok_or_else(|| BackendError::MissingLabels(id.clone()))?
        .into_iter()
        .filter(|o| *o <= cs.m())
        .collect();
    let mut rng = rng_for(oracle.seed, &[id, "rank"]);
    let noisy = oracle.noise_rate > 0.0 && rng.random::<f64>() < oracle.noise_rate;
    if noisy && !oracle.corruptions.is_empty() {
        let kind = oracle.corruptions[rng.random_range(0..oracle.corruptions.len())];
        return Ok(corrupt(kind, &ranked, cs.m()));
    }
    Ok(render_selection(&ranked).expect("labels yield a valid selection"))
}

impl Ranker for MockOracleRanker {
    fn rank(
        &self,
        cs: &CandidateSet,
        template: &PromptTemplate,
    ) -> Result<RankerReply, BackendError> {
        let raw = mock_rank(self, cs)?;
        let prompt_tokens = build_rank_prompt(cs, template)
            .iter()
            .map(|m| approx_token_count(&m.content) as u64)
            .sum();
        Ok(RankerReply {
            completion_tokens: approx_token_count(&raw) as u64,
            raw,
            prompt_tokens,
        })
    }

    fn describe(&self) -> String {
        format!(
            "mock-oracle-ranker(noise={},seed={},corruptions={:?})",
            self.noise_rate, self.seed, self.corruptions
        )
    }
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    /// Probability of ignoring each irrelevant passage in context.
    pub robustness: f64,
    /// Probability of a correct closed-book answer.
    pub knowledge_rate: f64,
    pub seed: u64,
    pub labels: Arc<RelevanceLabels>,
}

/// Decides whether the mock generator answers correctly.
pub fn mock_generate(
    gen: &MockGenerator,
    context: &[usize],
    relevant: &BTreeSet<usize>,
    query_id: &str,
) -> bool {
    let mut rng = rng_for(gen.seed, &[query_id, "generate"]);
    if context.is_empty() {
        return rng.random::<f64>() < gen.knowledge_rate;
    }
    let has_relevant = context.iter().any(|o| relevant.contains(o));
    // Draw for every irrelevant passage so the stream position is independent of outcomes.
    let mut all_ignored = true;
    for _ in context.iter().filter(|o| !relevant.contains(o)) {
        if rng.random::<f64>() >= gen.robustness {
            all_ignored = false;
        }
    }
    has_relevant && all_ignored
}

/// Text a correct answer consists of for the given gold labels.
pub fn reference_answer(gold: &GoldLabels) -> String {
    let first = |sets: &Vec<Vec<String>>| -> Vec<String> {
        sets.iter().filter_map(|s| s.first().cloned()).collect()
    };
    match gold {
        GoldLabels::ShortAnswers(sets) => first(sets).join("; "),
        GoldLabels::ListAnswers(sets) => first(sets).join(", "),
        GoldLabels::Claims(claims) => claims.join(". "),
    }
}

pub const MOCK_WRONG_ANSWER: &str = "I am not sure.";

impl Generator for MockGenerator {
    fn generate(&self, inst: &EvalInstance, context: &[usize]) -> Result<Generation, BackendError> {
        let id = &inst.query().id;
        let relevant = self
            .labels
            .relevant(id)
            .ok_or_else(|| BackendError::MissingLabels(id.clone()))?;
        let text = if mock_generate(self, context, &relevant, id) {
            reference_answer(&inst.gold)
        } else {
            MOCK_WRONG_ANSWER.to_string()
        };
        let passages: Vec<_> = context
            .iter()
            .filter_map(|o| inst.candidates.passage(*o))
            .collect();
        let prompt_tokens = build_answer_prompt(&inst.query().text, &passages, inst.gold.kind())
            .iter()
            .map(|m| approx_token_count(&m.content) as u64)
            .sum();
        Ok(Generation {
            completion_tokens: approx_token_count(&text) as u64,
            text,
            prompt_tokens,
        })
    }

    fn describe(&self) -> String {
        format!(
            "mock-generator(robustness={},knowledge_rate={},seed={})",
            self.robustness, self.knowledge_rate, self.seed
        )
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Chat backend answering through a closure. Useful as a teacher or judge
/// double in tests.
pub struct ScriptedChat {
    name: String,
    respond: Box<Responder>,
}

impl ScriptedChat {
    pub fn new(
        name: impl Into<String>,
        respond: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            respond: Box::new(respond),
        }
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let text = (self.respond)(req)?;
        Ok(ChatResponse {
            text,
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0.0,
        })
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.name)
    }
}
