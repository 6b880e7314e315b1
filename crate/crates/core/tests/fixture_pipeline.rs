use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use adarank_core::backends::{MockGenerator, MockOracleRanker, RelevanceLabels};
use adarank_core::dataset::{load_dataset, to_native_line, DatasetFormat};
use adarank_core::metrics::{build_report, oracle_from_reports, ScoringConfig, StrategyReport};
use adarank_core::pipeline::{parse_grid, run_strategy};
use adarank_core::protocol::PromptTemplate;
use adarank_core::synthbench::{generate_synth, Overlap, RelevantCount, SynthConfig};
use adarank_core::types::EvalInstance;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn load() -> (Vec<EvalInstance>, Arc<RelevanceLabels>) {
    let dir = fixture_dir();
    let ds = load_dataset(&dir.join("queries.jsonl"), DatasetFormat::NativeJsonl, 10).unwrap();
    let labels = RelevanceLabels::load(&dir.join("labels.jsonl")).unwrap();
    (ds.instances, Arc::new(labels))
}

#[test]
fn fixture_matches_its_generator() {
    let cfg = SynthConfig {
        num_queries: 200,
        relevant: RelevantCount::ZeroWithProb { p0: 0.25, count: 2 },
        overlap: Overlap::High,
        seed: 7,
        ..Default::default()
    };
    let corpus = generate_synth(&cfg).unwrap();
    let dir = fixture_dir();
    let expected: String = corpus.instances.iter().map(|i| to_native_line(i) + "\n").collect();
    assert_eq!(std::fs::read_to_string(dir.join("queries.jsonl")).unwrap(), expected);
    assert_eq!(std::fs::read_to_string(dir.join("labels.jsonl")).unwrap(), corpus.labels.to_jsonl());
}

#[test]
fn strategies_build_the_expected_contexts() {
    let (instances, labels) = load();
    assert_eq!(instances.len(), 200);
    let ranker = MockOracleRanker::new(labels.clone(), 0.2, 3);
    let generator = MockGenerator { robustness: 0.85, knowledge_rate: 0.2, seed: 3, labels: labels.clone() };
    let template = PromptTemplate::default();
    for s in parse_grid("vanilla:0,3,10 rerank:1,3 adarank").unwrap() {
        let out = run_strategy(&instances, s, Some(&ranker), &generator, &template);
        assert_eq!(out.failures(), 0);
        for (inst, run) in instances.iter().zip(&out.runs) {
            assert_eq!(run.query_id, inst.query().id);
            let ranked = labels.ranked(&run.query_id).unwrap();
            let m = inst.candidates.m();
            match s.k() {
                Some(k) if !s.needs_ranker() => {
                    assert_eq!(run.context_ordinals, (1..=k.min(m)).collect::<Vec<_>>())
                }
                Some(k) => {
                    assert_eq!(run.context_ordinals.len(), k.min(m));
                    let n = ranked.len().min(k);
                    assert_eq!(&run.context_ordinals[..n], &ranked[..n]);
                }
                None => assert_eq!(run.context_ordinals, ranked),
            }
        }
    }
}

#[test]
fn oracle_dominates_fixed_k_on_fixture() {
    let (instances, labels) = load();
    let ranker = MockOracleRanker::new(labels.clone(), 0.0, 1);
    let generator = MockGenerator { robustness: 0.8, knowledge_rate: 0.3, seed: 1, labels };
    let template = PromptTemplate::default();
    let mut reports: Vec<StrategyReport> = Vec::new();
    for s in parse_grid("vanilla:0 rerank:1,2,3,4,5").unwrap() {
        let out = run_strategy(&instances, s, Some(&ranker), &generator, &template);
        reports.push(build_report(&out, &instances, &ScoringConfig::default()).unwrap());
    }
    let by_k: BTreeMap<usize, &StrategyReport> = reports.iter().map(|r| (r.strategy.k().unwrap(), r)).collect();
    let oracle = oracle_from_reports(&by_k, 5).unwrap();
    assert!(oracle.per_query >= oracle.per_dataset);
    for r in &reports {
        assert!(oracle.per_dataset >= r.mean_primary - 1e-12);
    }
}
