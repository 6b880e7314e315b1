//! Synthetic labeled retrieval corpora and the weak-vs-strong generator
//! experiment run on them.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{MockGenerator, MockOracleRanker, RelevanceLabels};
use crate::metrics::{build_report, ScoringConfig, StrategyReport};
use crate::pipeline::{run_strategy, Strategy};
use crate::protocol::PromptTemplate;
use crate::seeding::rng_for;
use crate::text::tokens;
use crate::types::{CandidateSet, EvalInstance, GoldLabels, Query};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RelevantCount {
    Fixed { count: usize },
    /// Zero relevant passages with probability `p0`, otherwise `count`.
    ZeroWithProb { p0: f64, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// Distractors are about unrelated topics.
    #[default]
    Low,
    /// Distractors reuse the query's topic words and attribute.
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrder {
    /// Relevant passages at seeded random positions.
    #[default]
    Random,
    /// Candidates sorted by BM25 score against the question.
    Bm25,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_queries: usize,
    pub m: usize,
    pub relevant: RelevantCount,
    pub overlap: Overlap,
    pub order: CandidateOrder,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_queries: 2000,
            m: 10,
            relevant: RelevantCount::Fixed { count: 2 },
            overlap: Overlap::Low,
            order: CandidateOrder::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("strategy list must include {0}")]
    MissingStrategy(&'static str),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.m == 0 {
            return Err(SynthError::Config("m must be positive".into()));
        }
        let count = match self.relevant {
            RelevantCount::Fixed { count } => count,
            RelevantCount::ZeroWithProb { p0, count } => {
                if !(0.0..=1.0).contains(&p0) {
                    return Err(SynthError::Config(format!("p0={p0} is not a probability")));
                }
                count
            }
        };
        if count > self.m {
            return Err(SynthError::Config(format!("{count} relevant passages exceed m={}", self.m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub instances: Vec<EvalInstance>,
    pub labels: Arc<RelevanceLabels>,
}

const TOPICS: &[&str] = &[
    "river", "castle", "comet", "orchard", "harbor", "glacier", "library", "volcano", "meadow", "lighthouse",
    "canyon", "monastery", "observatory", "vineyard", "reef", "bridge", "forest", "desert", "island", "tower",
    "quarry", "lagoon", "citadel", "plateau", "archive", "canal", "temple", "marsh", "summit", "garden",
];
const QUALIFIERS: &[&str] = &[
    "northern", "ancient", "silent", "golden", "hidden", "western", "crimson", "eastern", "frozen", "lost",
    "southern", "emerald", "great", "little", "old", "new", "upper", "lower", "royal", "wild",
];
const ATTRIBUTES: &[&str] = &[
    "founder", "architect", "namesake", "discoverer", "patron", "keeper", "builder", "guardian", "surveyor",
    "chronicler",
];
const FILLER: &[&str] = &[
    "Visitors often arrive in the early morning when the light is soft.",
    "Local records describe several changes over the past centuries.",
    "The surrounding area is known for its mild climate and quiet roads.",
    "Guides recommend planning the trip well ahead of the busy season.",
    "Many accounts mention the place in letters and travel diaries.",
    "A small museum nearby keeps maps and photographs of the region.",
];
const SYLLABLES: &[&str] = &["ka", "lo", "mir", "zen", "tar", "vo", "qui", "bel", "dra", "nos", "fen", "ru"];

/// A letters-only token unique to `index`.
fn answer_token(index: usize, rng: &mut impl Rng) -> String {
    let mut word: String = (0..2).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    let mut n = index;
    loop {
        word.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            break;
        }
    }
    word.push_str("ex");
    word
}

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// Generates `num_queries` labeled instances. Same config, same corpus.
pub fn generate_synth(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut labels = RelevanceLabels::new();
    let mut instances = Vec::with_capacity(cfg.num_queries);
    for i in 0..cfg.num_queries {
        let id = format!("syn-{i:05}");
        let mut rng = rng_for(cfg.seed, &["synth", &id]);
        let qual = pick(&mut rng, QUALIFIERS);
        let topic = pick(&mut rng, TOPICS);
        let attr = pick(&mut rng, ATTRIBUTES);
        let answer = answer_token(i, &mut rng);
        let question = format!("Who was the {attr} of the {qual} {topic}?");

        let n_rel = match cfg.relevant {
            RelevantCount::Fixed { count } => count,
            RelevantCount::ZeroWithProb { p0, count } => {
                if rng.random::<f64>() < p0 {
                    0
                } else {
                    count
                }
            }
        };
        let mut is_relevant = vec![false; cfg.m];
        is_relevant[..n_rel].iter_mut().for_each(|r| *r = true);
        is_relevant.shuffle(&mut rng);

        let mut passages: Vec<(String, Option<String>, String, bool)> = Vec::with_capacity(cfg.m);
        let mut rel_seen = 0usize;
        for (j, rel) in is_relevant.iter().enumerate() {
            let filler = pick(&mut rng, FILLER);
            let (title, text) = if *rel {
                rel_seen += 1;
                let fact = match rel_seen % 3 {
                    1 => format!("The {attr} of the {qual} {topic} was {answer}, according to most sources."),
                    2 => format!("Records name {answer} as the {attr} of the {qual} {topic}."),
                    _ => format!("Among its {attr}s, the {qual} {topic} remembers {answer} best."),
                };
                (format!("The {qual} {topic}"), format!("{fact} {filler}"))
            } else {
                match cfg.overlap {
                    Overlap::High => {
                        let other = pick(&mut rng, ATTRIBUTES);
                        (
                            format!("The {qual} {topic}"),
                            format!("The {qual} {topic} has a long history, and its {other} is still debated. {filler}"),
                        )
                    }
                    Overlap::Low => {
                        let q2 = pick(&mut rng, QUALIFIERS);
                        let t2 = pick(&mut rng, TOPICS);
                        (format!("The {q2} {t2}"), format!("The {q2} {t2} lies at the edge of the valley. {filler}"))
                    }
                }
            };
            passages.push((format!("{id}-p{j}"), Some(title), text, *rel));
        }
        if cfg.order == CandidateOrder::Bm25 {
            let docs: Vec<String> = passages.iter().map(|p| p.2.clone()).collect();
            let order = Bm25::new(&docs).rank(&question);
            passages = order.into_iter().map(|j| passages[j].clone()).collect();
        }

        labels.add_query(&id);
        for (j, p) in passages.iter().enumerate() {
            if p.3 {
                labels.set(&id, j + 1, 1);
            }
        }
        let candidates = CandidateSet::from_unnumbered(
            Query::new(&id, question).expect("templated question is non-empty"),
            passages.into_iter().map(|(d, t, x, _)| (d, t, x)),
            cfg.m,
        )
        .expect("templated passages are valid");
        instances.push(EvalInstance {
            candidates,
            gold: GoldLabels::ShortAnswers(vec![vec![answer]]),
        });
    }
    Ok(SynthCorpus {
        instances,
        labels: Arc::new(labels),
    })
}

/// Okapi BM25 over a small in-memory document set.
#[derive(Debug, Clone)]
pub struct Bm25 {
    docs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    avg_len: f64,
    df: HashMap<String, usize>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25 {
    pub fn new(docs: &[String]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut tfs = Vec::with_capacity(docs.len());
        let mut lengths = Vec::with_capacity(docs.len());
        for d in docs {
            let toks = tokens(d);
            lengths.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
            tfs.push(tf);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self { docs: tfs, lengths, avg_len, df, k1: 1.2, b: 0.75 }
    }

    pub fn score(&self, query: &str) -> Vec<f64> {
        let n = self.docs.len() as f64;
        let terms: BTreeSet<String> = tokens(query).into_iter().collect();
        self.docs
            .iter()
            .zip(&self.lengths)
            .map(|(tf, &len)| {
                terms
                    .iter()
                    .map(|t| {
                        let f = *tf.get(t).unwrap_or(&0) as f64;
                        if f == 0.0 {
                            return 0.0;
                        }
                        let df = *self.df.get(t).unwrap_or(&0) as f64;
                        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                        let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / self.avg_len.max(1e-9));
                        idf * f * (self.k1 + 1.0) / (f + norm)
                    })
                    .sum()
            })
            .collect()
    }

    /// Document indices by descending score, ties by index.
    pub fn rank(&self, query: &str) -> Vec<usize> {
        let scores = self.score(query);
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub generator: String,
    pub strategy: String,
    pub accuracy: f64,
    pub mean_context_size: f64,
    pub mean_prompt_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDelta {
    pub generator: String,
    pub robustness: f64,
    pub vanilla10_accuracy: f64,
    pub adarank_accuracy: f64,
    /// AdaRank accuracy minus Vanilla-10 accuracy, in points.
    pub delta_accuracy: f64,
    /// AdaRank mean context size over Vanilla-10's.
    pub context_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub num_queries: usize,
    pub rows: Vec<ShiftRow>,
    pub deltas: Vec<ShiftDelta>,
}

impl ShiftReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["generator", "strategy", "accuracy", "mean_context_size", "mean_prompt_tokens"])
            .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.generator.clone(),
                r.strategy.clone(),
                format!("{:.2}", r.accuracy),
                format!("{:.2}", r.mean_context_size),
                format!("{:.2}", r.mean_prompt_tokens),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Runs every strategy under both generators with a noise-free oracle ranker.
pub fn run_shift_experiment(
    synth: &SynthCorpus,
    weak: &MockGenerator,
    strong: &MockGenerator,
    strategies: &[Strategy],
) -> Result<ShiftReport, SynthError> {
    let vanilla10 = Strategy::Vanilla { k: 10 };
    if !strategies.contains(&vanilla10) {
        return Err(SynthError::MissingStrategy("Vanilla-10"));
    }
    if !strategies.contains(&Strategy::AdaRank) {
        return Err(SynthError::MissingStrategy("AdaRank"));
    }
    let ranker = MockOracleRanker::new(synth.labels.clone(), 0.0, weak.seed);
    let template = PromptTemplate::default();
    let scoring = ScoringConfig::default();

    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    for (name, generator) in [("weak", weak), ("strong", strong)] {
        let mut reports: Vec<StrategyReport> = Vec::new();
        for &s in strategies {
            let outcome = run_strategy(&synth.instances, s, Some(&ranker), generator, &template);
            let report = build_report(&outcome, &synth.instances, &scoring)
                .map_err(|e| SynthError::Config(e.to_string()))?;
            rows.push(ShiftRow {
                generator: name.to_string(),
                strategy: report.label.clone(),
                accuracy: report.mean_primary,
                mean_context_size: report.mean_context_size,
                mean_prompt_tokens: report.mean_prompt_tokens,
            });
            reports.push(report);
        }
        let find = |s: Strategy| reports.iter().find(|r| r.strategy == s).expect("checked above");
        let (v, a) = (find(vanilla10), find(Strategy::AdaRank));
        deltas.push(ShiftDelta {
            generator: name.to_string(),
            robustness: generator.robustness,
            vanilla10_accuracy: v.mean_primary,
            adarank_accuracy: a.mean_primary,
            delta_accuracy: a.mean_primary - v.mean_primary,
            context_ratio: if v.mean_context_size > 0.0 {
                a.mean_context_size / v.mean_context_size
            } else {
                f64::NAN
            },
        });
    }
    Ok(ShiftReport {
        num_queries: synth.instances.len(),
        rows,
        deltas,
    })
}
