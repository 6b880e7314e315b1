//! Distillation data curation: teacher labeling, k-means representative
//! sampling, augmentation and training-file emission.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Ranker};
use crate::protocol::{
    build_rank_prompt, parse_selection, render_selection, ChatMessage, MalformedPolicy, PromptTemplate, Role,
};
use crate::seeding::rng_for;
use crate::types::CandidateSet;

/// Stage 1 and 2 abort when more teacher outputs than this share are unusable.
pub const MAX_DROP_RATE: f64 = 0.20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("k={k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("vectors must have at least one dimension")]
    ZeroDimension,
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize, index: usize },
    #[error("total_samples={total} exceeds the number of points ({n})")]
    TooManySamples { total: usize, n: usize },
    #[error("assignments and distances differ in length ({assignments} vs {distances} vs {ids} ids)")]
    LengthMismatch { assignments: usize, distances: usize, ids: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    #[default]
    KmeansPp,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Squared Euclidean on the raw vectors.
    #[default]
    SquaredEuclidean,
    /// Squared Euclidean after unit-normalizing every vector.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
    pub init: InitMethod,
    pub metric: DistanceMetric,
    /// Data-parallel assignment step. Results are identical either way.
    pub parallel: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 20,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            init: InitMethod::KmeansPp,
            metric: DistanceMetric::SquaredEuclidean,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Squared distance from each point to its assigned centroid.
    pub distances: Vec<T>,
    pub inertia: T,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn squared_distance<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let d = *x - *y;
        acc + d * d
    })
}

fn unit_normalize<T: Float>(v: &[T]) -> Vec<T> {
    let norm = v.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
    if norm > T::zero() {
        v.iter().map(|x| *x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn check_points<T>(vectors: &[Vec<T>], k: usize) -> Result<usize, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > vectors.len() {
        return Err(ClusterError::TooFewPoints { k, n: vectors.len() });
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(ClusterError::ZeroDimension);
    }
    if let Some(index) = vectors.iter().position(|v| v.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            got: vectors[index].len(),
            index,
        });
    }
    Ok(dim)
}

/// Initial centroids drawn from a `ChaCha8Rng` seeded with `seed`.
///
/// kmeans++ picks the first centroid uniformly, then each next one with
/// probability proportional to its squared distance from the nearest chosen
/// centroid.
pub fn init_centroids<T: Float>(vectors: &[Vec<T>], k: usize, init: InitMethod, seed: u64) -> Result<Vec<Vec<T>>, ClusterError> {
    check_points(vectors, k)?;
    let mut rng = rng_for(seed, &["kmeans-init"]);
    let n = vectors.len();
    match init {
        InitMethod::Random => {
            let picks = rand::seq::index::sample(&mut rng, n, k);
            Ok(picks.iter().map(|i| vectors[i].clone()).collect())
        }
        InitMethod::KmeansPp => {
            let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
            let mut nearest: Vec<f64> = vectors
                .iter()
                .map(|v| squared_distance(v, &centroids[0]).to_f64().unwrap_or(0.0))
                .collect();
            while centroids.len() < k {
                let total: f64 = nearest.iter().sum();
                let idx = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    let mut chosen = n - 1;
                    for (i, d) in nearest.iter().enumerate() {
                        if r < *d {
                            chosen = i;
                            break;
                        }
                        r -= d;
                    }
                    chosen
                } else {
                    rng.random_range(0..n)
                };
                let c = vectors[idx].clone();
                for (d, v) in nearest.iter_mut().zip(vectors) {
                    *d = d.min(squared_distance(v, &c).to_f64().unwrap_or(0.0));
                }
                centroids.push(c);
            }
            Ok(centroids)
        }
    }
}

fn nearest_centroid<T: Float>(v: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(v, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(v, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_step<T: Float + Send + Sync>(vectors: &[Vec<T>], centroids: &[Vec<T>], parallel: bool) -> (Vec<usize>, Vec<T>, T) {
    let pairs: Vec<(usize, T)> = if parallel {
        vectors.par_iter().map(|v| nearest_centroid(v, centroids)).collect()
    } else {
        vectors.iter().map(|v| nearest_centroid(v, centroids)).collect()
    };
    // Summed sequentially so the result does not depend on thread count.
    let inertia = pairs.iter().fold(T::zero(), |a, (_, d)| a + *d);
    let (assignments, distances) = pairs.into_iter().unzip();
    (assignments, distances, inertia)
}

fn update_step<T: Float>(vectors: &[Vec<T>], assignments: &[usize], distances: &[T], k: usize, dim: usize) -> Vec<Vec<T>> {
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &c) in vectors.iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(v) {
            *s = *s + *x;
        }
    }
    let mut taken = vec![false; vectors.len()];
    for c in 0..k {
        if counts[c] > 0 {
            let n = T::from(counts[c]).expect("count fits the scalar type");
            sums[c].iter_mut().for_each(|s| *s = *s / n);
        } else {
            // Reseed to the point farthest from its own centroid.
            let far = (0..vectors.len())
                .filter(|i| !taken[*i])
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if distances[b] >= distances[i] => Some(b),
                    _ => Some(i),
                })
                .expect("k <= n leaves a free point");
            taken[far] = true;
            sums[c] = vectors[far].clone();
        }
    }
    sums
}

/// Lloyd's algorithm from seeded initial centroids.
pub fn kmeans<T: Float + Send + Sync>(vectors: &[Vec<T>], cfg: &ClusteringConfig) -> Result<KMeansResult<T>, ClusterError> {
    let dim = check_points(vectors, cfg.k)?;
    let normalized: Vec<Vec<T>>;
    let points = match cfg.metric {
        DistanceMetric::SquaredEuclidean => vectors,
        DistanceMetric::Cosine => {
            normalized = vectors.iter().map(|v| unit_normalize(v)).collect();
            &normalized[..]
        }
    };
    let tol = T::from(cfg.tol).unwrap_or_else(T::zero);

    let mut centroids = init_centroids(points, cfg.k, cfg.init, cfg.seed)?;
    let (mut assignments, mut distances, mut inertia) = assign_step(points, &centroids, cfg.parallel);
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        let next = update_step(points, &assignments, &distances, cfg.k, dim);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(T::zero(), T::max);
        centroids = next;
        let prev = inertia;
        (assignments, distances, inertia) = assign_step(points, &centroids, cfg.parallel);
        debug_assert!(
            inertia <= prev + prev * T::epsilon() * T::from(16).unwrap(),
            "inertia increased from {:?} to {:?}",
            prev.to_f64(),
            inertia.to_f64()
        );
        history.push(inertia);
        if shift < tol {
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        distances,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    #[default]
    Proportional,
    UniformPerCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinCluster {
    #[default]
    NearestCentroid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    pub total_samples: usize,
    pub allocation: Allocation,
    pub within_cluster: WithinCluster,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            total_samples: 5000,
            allocation: Allocation::Proportional,
            within_cluster: WithinCluster::NearestCentroid,
        }
    }
}

/// Per-cluster sample counts summing to `total`, each capped by the cluster size.
pub fn allocate(sizes: &[usize], total: usize, allocation: Allocation) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let k = sizes.len();
    let mut quota = vec![0usize; k];
    if k == 0 || n == 0 {
        return quota;
    }
    match allocation {
        Allocation::Proportional => {
            let mut rems = Vec::with_capacity(k);
            for (c, &size) in sizes.iter().enumerate() {
                let num = total as u128 * size as u128;
                quota[c] = (num / n as u128) as usize;
                rems.push((num % n as u128, c));
            }
            let left = total - quota.iter().sum::<usize>();
            rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, c) in rems.iter().take(left) {
                quota[c] += 1;
            }
        }
        Allocation::UniformPerCluster => {
            for (c, q) in quota.iter_mut().enumerate() {
                *q = total / k + usize::from(c < total % k);
            }
        }
    }
    let mut overflow = 0;
    for (q, &size) in quota.iter_mut().zip(sizes) {
        if *q > size {
            overflow += *q - size;
            *q = size;
        }
    }
    while overflow > 0 {
        let target = (0..k)
            .filter(|&c| quota[c] < sizes[c])
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("total <= n leaves spare capacity");
        let add = overflow.min(sizes[target] - quota[target]);
        quota[target] += add;
        overflow -= add;
    }
    quota
}

/// Picks exactly `plan.total_samples` ids, returned sorted.
pub fn sample_representatives<T: Float>(
    ids: &[String],
    assignments: &[usize],
    distances: &[T],
    plan: &SamplingPlan,
    seed: u64,
) -> Result<Vec<String>, ClusterError> {
    if ids.len() != assignments.len() || ids.len() != distances.len() {
        return Err(ClusterError::LengthMismatch {
            assignments: assignments.len(),
            distances: distances.len(),
            ids: ids.len(),
        });
    }
    if plan.total_samples > ids.len() {
        return Err(ClusterError::TooManySamples {
            total: plan.total_samples,
            n: ids.len(),
        });
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignments.iter().enumerate() {
        members[c].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quota = allocate(&sizes, plan.total_samples, plan.allocation);

    let mut out = Vec::with_capacity(plan.total_samples);
    for (c, group) in members.iter_mut().enumerate() {
        match plan.within_cluster {
            WithinCluster::NearestCentroid => group.sort_by(|&a, &b| {
                distances[a]
                    .partial_cmp(&distances[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| ids[a].cmp(&ids[b]))
            }),
            WithinCluster::Random => {
                group.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
                group.shuffle(&mut rng_for(seed, &["sample", &c.to_string()]));
            }
        }
        out.extend(group.iter().take(quota[c]).map(|&i| ids[i].clone()));
    }
    out.sort();
    Ok(out)
}

/// One teacher-labeled ranking demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// System and user messages of the ranking prompt.
    pub messages: Vec<ChatMessage>,
    /// Canonical selection string; `"[0]"` when nothing is relevant.
    pub target: String,
    pub stage: u8,
    pub source_query_id: String,
    pub augmentation_tag: Option<String>,
    pub num_candidates: usize,
}

impl TrainingExample {
    pub fn new(cs: &CandidateSet, template: &PromptTemplate, ordinals: &[usize], stage: u8, tag: Option<&str>) -> Self {
        Self {
            messages: build_rank_prompt(cs, template),
            target: render_selection(ordinals).expect("selection ordinals are unique and positive"),
            stage,
            source_query_id: cs.query.id.clone(),
            augmentation_tag: tag.map(str::to_string),
            num_candidates: cs.m(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("dropped {dropped} of {total} teacher outputs, above the {:.0}% limit", MAX_DROP_RATE * 100.0)]
    DropRate { dropped: usize, total: usize },
    #[error("teacher backend failed for every query: {0}")]
    Backend(BackendError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("no queries to label")]
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelingReport {
    pub labeled: usize,
    pub dropped_unparseable: usize,
    pub dropped_backend: usize,
    pub dropped_ids: Vec<String>,
}

impl LabelingReport {
    pub fn dropped(&self) -> usize {
        self.dropped_unparseable + self.dropped_backend
    }
}

/// Teacher selections for every query, in input order. Unusable outputs are
/// dropped and counted.
fn label_all(
    queries: &[CandidateSet],
    teacher: &dyn Ranker,
    template: &PromptTemplate,
) -> Result<(Vec<(usize, Vec<usize>)>, LabelingReport), DistillError> {
    if queries.is_empty() {
        return Err(DistillError::Empty);
    }
    let results: Vec<Result<Vec<usize>, Option<BackendError>>> = queries
        .par_iter()
        .map(|cs| {
            let reply = teacher.rank(cs, template).map_err(Some)?;
            parse_selection(&reply.raw, cs.m(), MalformedPolicy::Error)
                .map(|s| s.ordinals)
                .map_err(|_| None)
        })
        .collect();

    let mut report = LabelingReport::default();
    let mut kept = Vec::new();
    let mut last_backend_error = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(ordinals) => kept.push((i, ordinals)),
            Err(e) => {
                match e {
                    Some(err) => {
                        report.dropped_backend += 1;
                        last_backend_error = Some(err);
                    }
                    None => report.dropped_unparseable += 1,
                }
                report.dropped_ids.push(queries[i].query.id.clone());
            }
        }
    }
    report.labeled = kept.len();
    if report.dropped_backend == queries.len() {
        return Err(DistillError::Backend(last_backend_error.expect("at least one backend error")));
    }
    if report.dropped() as f64 > MAX_DROP_RATE * queries.len() as f64 {
        return Err(DistillError::DropRate {
            dropped: report.dropped(),
            total: queries.len(),
        });
    }
    if report.dropped() > 0 {
        tracing::warn!(dropped = report.dropped(), total = queries.len(), "dropped teacher outputs");
    }
    Ok((kept, report))
}

/// Stage 1: one example per query whose teacher output parses strictly.
pub fn build_stage1(
    queries: &[CandidateSet],
    teacher: &dyn Ranker,
    template: &PromptTemplate,
) -> Result<(Vec<TrainingExample>, LabelingReport), DistillError> {
    let (kept, report) = label_all(queries, teacher, template)?;
    let examples = kept
        .iter()
        .map(|(i, ords)| TrainingExample::new(&queries[*i], template, ords, 1, None))
        .collect();
    Ok((examples, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    /// Add a copy with candidates permuted and the target relabeled.
    pub shuffle: bool,
    /// Add a copy whose candidates are only the passages the teacher left out,
    /// with target `[0]`.
    pub irrelevant: bool,
}

impl std::str::FromStr for Augmentations {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut a = Augmentations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "shuffle" => a.shuffle = true,
                "irrelevant" => a.irrelevant = true,
                "none" => {}
                other => return Err(format!("unknown augmentation `{other}` (expected shuffle, irrelevant)")),
            }
        }
        Ok(a)
    }
}

/// Applies a seeded permutation to the candidates. Position `j` of the result
/// holds original ordinal `perm[j - 1]`; the selection is mapped accordingly.
pub fn shuffle_candidates(cs: &CandidateSet, selection: &[usize], seed: u64) -> (CandidateSet, Vec<usize>) {
    let mut perm: Vec<usize> = (1..=cs.m()).collect();
    perm.shuffle(&mut rng_for(seed, &[&cs.query.id, "shuffle"]));
    let shuffled = cs.subset(&perm).expect("permutation of a valid set is valid");
    let mut new_pos = vec![0usize; cs.m() + 1];
    for (j, &orig) in perm.iter().enumerate() {
        new_pos[orig] = j + 1;
    }
    let mapped = selection.iter().map(|&o| new_pos[o]).collect();
    (shuffled, mapped)
}

/// Stage 2: strict teacher labels for the sampled queries plus augmentations.
pub fn build_stage2(
    sampled: &[CandidateSet],
    teacher: &dyn Ranker,
    template: &PromptTemplate,
    augment: Augmentations,
    seed: u64,
) -> Result<(Vec<TrainingExample>, LabelingReport), DistillError> {
    let (kept, report) = label_all(sampled, teacher, template)?;
    let mut examples = Vec::new();
    for (i, ords) in &kept {
        let cs = &sampled[*i];
        examples.push(TrainingExample::new(cs, template, ords, 2, None));
        if augment.shuffle {
            let (shuffled, mapped) = shuffle_candidates(cs, ords, seed);
            examples.push(TrainingExample::new(&shuffled, template, &mapped, 2, Some("shuffle")));
        }
        if augment.irrelevant {
            let rest: Vec<usize> = (1..=cs.m()).filter(|o| !ords.contains(o)).collect();
            if !rest.is_empty() {
                let only_irrelevant = cs.subset(&rest).expect("subset of a valid set is valid");
                examples.push(TrainingExample::new(&only_irrelevant, template, &[], 2, Some("irrelevant")));
            }
        }
    }
    Ok((examples, report))
}

#[derive(Serialize, Deserialize)]
struct TrainingLine {
    messages: Vec<ChatMessage>,
    stage: u8,
    tag: Option<String>,
    source_query_id: String,
    num_candidates: usize,
}

/// Per-stage and per-tag counts of an emitted file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingFileSummary {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub source_queries: usize,
}

pub fn summarize(examples: &[TrainingExample]) -> TrainingFileSummary {
    let mut counts = BTreeMap::new();
    let mut sources = std::collections::BTreeSet::new();
    for ex in examples {
        *counts.entry(format!("stage{}", ex.stage)).or_insert(0) += 1;
        if let Some(tag) = &ex.augmentation_tag {
            *counts.entry(format!("stage{}:{tag}", ex.stage)).or_insert(0) += 1;
        }
        sources.insert(ex.source_query_id.as_str());
    }
    TrainingFileSummary {
        total: examples.len(),
        counts,
        source_queries: sources.len(),
    }
}

/// Writes chat-format JSONL: the prompt messages followed by the target as the
/// assistant turn.
pub fn emit_training_file(examples: &[TrainingExample], path: &Path) -> std::io::Result<TrainingFileSummary> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let mut messages = ex.messages.clone();
        messages.push(ChatMessage::assistant(ex.target.clone()));
        let line = TrainingLine {
            messages,
            stage: ex.stage,
            tag: ex.augmentation_tag.clone(),
            source_query_id: ex.source_query_id.clone(),
            num_candidates: ex.num_candidates,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(summarize(examples))
}

pub fn load_training_file(path: &Path) -> std::io::Result<Vec<TrainingExample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut line: TrainingLine = serde_json::from_str(l)
                .map_err(|e| std::io::Error::other(format!("line {}: {e}", i + 1)))?;
            let target = match line.messages.pop() {
                Some(m) if m.role == Role::Assistant => m.content,
                _ => return Err(std::io::Error::other(format!("line {}: missing assistant target", i + 1))),
            };
            Ok(TrainingExample {
                messages: line.messages,
                target,
                stage: line.stage,
                source_query_id: line.source_query_id,
                augmentation_tag: line.tag,
                num_candidates: line.num_candidates,
            })
        })
        .collect()
}

/// Fine-tuning recipe recorded for downstream trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub base_model: String,
    pub epochs_per_stage: u32,
    pub learning_rate: String,
    pub lr_schedule: String,
    pub batch_size: u32,
    pub stages: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_model: "mistralai/Mistral-7B-v0.1".into(),
            epochs_per_stage: 3,
            learning_rate: "5e-6".into(),
            lr_schedule: "cosine".into(),
            batch_size: 64,
            stages: 2,
        }
    }
}

impl TrainingConfig {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("config serializes") + "\n")
    }
}
