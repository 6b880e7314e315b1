//! Dataset ingestion: the native JSONL format and a one-way ALCE importer.
//!
//! Native JSONL holds one instance per line:
//!
//! ```json
//! {"query": {"id": "q1", "text": "..."},
//!  "passages": [{"doc_id": "d1", "title": null, "text": "..."}],
//!  "gold": {"kind": "short_answers", "items": [["alias", "alias"]]}}
//! ```
//!
//! Passage ordinals are not stored; they are assigned 1..m in file order, which
//! is taken to be first-stage retrieval rank. Passages beyond the configured
//! maximum are truncated and counted.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::types::{CandidateSet, EvalInstance, GoldKind, GoldLabels, InvalidInstance, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    AlceJson,
    NativeJsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alce_json" | "alce" => Ok(Self::AlceJson),
            "native_jsonl" | "native" | "jsonl" => Ok(Self::NativeJsonl),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset {0} contains no records")]
    Empty(String),
    #[error("record at line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("record at line {line} has gold kind {found}, but earlier records use {expected}")]
    MixedGoldKinds {
        line: usize,
        expected: GoldKind,
        found: GoldKind,
    },
    #[error("record at line {line}: duplicate query id `{id}`")]
    DuplicateQueryId { line: usize, id: String },
}

impl DatasetError {
    fn malformed(line: usize, field: &str, message: impl ToString) -> Self {
        Self::Malformed {
            line,
            field: field.to_string(),
            message: message.to_string(),
        }
    }

    fn invalid(line: usize, err: InvalidInstance) -> Self {
        let field = match err {
            InvalidInstance::EmptyQueryId => "query.id",
            InvalidInstance::EmptyQueryText => "query.text",
            InvalidInstance::NoPassages | InvalidInstance::TooManyPassages { .. } => "passages",
            InvalidInstance::EmptyPassageText { .. } | InvalidInstance::OrdinalGap { .. } => {
                "passages"
            }
            InvalidInstance::EmptyAliasSet => "gold",
        };
        Self::malformed(line, field, err)
    }
}

/// Instances plus the number of records whose passage list was truncated.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub instances: Vec<EvalInstance>,
    pub truncated: usize,
}

impl LoadedDataset {
    pub fn gold_kind(&self) -> Option<GoldKind> {
        self.instances.first().map(|i| i.gold.kind())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeRecord {
    query: Query,
    passages: Vec<NativePassage>,
    gold: GoldLabels,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativePassage {
    doc_id: String,
    title: Option<String>,
    text: String,
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    max_passages: usize,
) -> Result<LoadedDataset, DatasetError> {
    let content = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let loaded = match format {
        DatasetFormat::NativeJsonl => parse_native(&content, max_passages)?,
        DatasetFormat::AlceJson => parse_alce(&content, max_passages)?,
    };
    if loaded.instances.is_empty() {
        return Err(DatasetError::Empty(path.display().to_string()));
    }
    if loaded.truncated > 0 {
        tracing::warn!(
            truncated = loaded.truncated,
            max_passages,
            "truncated candidate lists"
        );
    }
    Ok(loaded)
}

/// Parses native JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_native(content: &str, max_passages: usize) -> Result<LoadedDataset, DatasetError> {
    let mut builder = Builder::default();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: NativeRecord = serde_json::from_str(line).map_err(|e| {
            let field = guess_field(&e.to_string());
            DatasetError::malformed(line_no, &field, e)
        })?;
        let passages = record
            .passages
            .into_iter()
            .map(|p| (p.doc_id, p.title, p.text))
            .collect();
        builder.push(line_no, record.query, passages, record.gold, max_passages)?;
    }
    Ok(builder.finish())
}

fn guess_field(message: &str) -> String {
    // serde_json reports "missing field `x`" / "unknown variant"; surface the name when present.
    message
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "record".to_string())
}

/// Parses ALCE data: either a JSON array of records or one record per line.
/// For arrays the reported "line" is the 1-based record index.
pub fn parse_alce(content: &str, max_passages: usize) -> Result<LoadedDataset, DatasetError> {
    let records: Vec<(usize, Value)> = if content.trim_start().starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(content)
            .map_err(|e| DatasetError::malformed(e.line(), "record", e))?;
        values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    } else {
        content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map(|v| (i + 1, v))
                    .map_err(|e| DatasetError::malformed(i + 1, "record", e))
            })
            .collect::<Result<_, _>>()?
    };

    let mut builder = Builder::default();
    for (line, record) in records {
        let obj = record
            .as_object()
            .ok_or_else(|| DatasetError::malformed(line, "record", "expected an object"))?;
        let text = obj
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::malformed(line, "question", "missing or not a string"))?;
        let id = ["sample_id", "id", "question_id", "qid"]
            .iter()
            .find_map(|k| obj.get(*k).and_then(value_as_id))
            .unwrap_or_else(|| format!("alce-{line}"));
        let docs = obj
            .get("docs")
            .and_then(Value::as_array)
            .ok_or_else(|| DatasetError::malformed(line, "docs", "missing or not an array"))?;
        let mut passages = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let body = doc.get("text").and_then(Value::as_str).ok_or_else(|| {
                DatasetError::malformed(line, &format!("docs[{i}].text"), "missing or not a string")
            })?;
            let title = doc.get("title").and_then(Value::as_str).map(str::to_owned);
            let doc_id = doc
                .get("id")
                .and_then(value_as_id)
                .unwrap_or_else(|| format!("{id}-{}", i + 1));
            passages.push((doc_id, title, body.to_string()));
        }
        let gold = alce_gold(line, obj)?;
        let query = Query::new(id, text).map_err(|e| DatasetError::invalid(line, e))?;
        builder.push(line, query, passages, gold, max_passages)?;
    }
    Ok(builder.finish())
}

fn value_as_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::String(s) => Some(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| i.as_str().map(str::to_owned))
            .collect(),
        _ => None,
    }
}

fn alce_gold(line: usize, obj: &serde_json::Map<String, Value>) -> Result<GoldLabels, DatasetError> {
    if let Some(pairs) = obj.get("qa_pairs") {
        let pairs = pairs
            .as_array()
            .ok_or_else(|| DatasetError::malformed(line, "qa_pairs", "not an array"))?;
        let sets = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.get("short_answers").and_then(string_list).ok_or_else(|| {
                    DatasetError::malformed(
                        line,
                        &format!("qa_pairs[{i}].short_answers"),
                        "missing or not a list of strings",
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(GoldLabels::ShortAnswers(sets));
    }
    if let Some(answers) = obj.get("answers") {
        let sets = answers
            .as_array()
            .ok_or_else(|| DatasetError::malformed(line, "answers", "not an array"))?
            .iter()
            .enumerate()
            .map(|(i, a)| {
                string_list(a).ok_or_else(|| {
                    DatasetError::malformed(line, &format!("answers[{i}]"), "not a list of strings")
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(GoldLabels::ListAnswers(sets));
    }
    if let Some(claims) = obj.get("claims") {
        let claims = string_list(claims)
            .ok_or_else(|| DatasetError::malformed(line, "claims", "not a list of strings"))?;
        return Ok(GoldLabels::Claims(claims));
    }
    Err(DatasetError::malformed(
        line,
        "qa_pairs|answers|claims",
        "no gold labels present",
    ))
}

#[derive(Default)]
struct Builder {
    instances: Vec<EvalInstance>,
    truncated: usize,
    kind: Option<GoldKind>,
    ids: HashSet<String>,
}

impl Builder {
    fn push(
        &mut self,
        line: usize,
        query: Query,
        mut passages: Vec<(String, Option<String>, String)>,
        gold: GoldLabels,
        max_passages: usize,
    ) -> Result<(), DatasetError> {
        let query = Query::new(query.id, query.text).map_err(|e| DatasetError::invalid(line, e))?;
        gold.validate().map_err(|e| DatasetError::invalid(line, e))?;
        match self.kind {
            None => self.kind = Some(gold.kind()),
            Some(expected) if expected != gold.kind() => {
                return Err(DatasetError::MixedGoldKinds {
                    line,
                    expected,
                    found: gold.kind(),
                })
            }
            _ => {}
        }
        if !self.ids.insert(query.id.clone()) {
            return Err(DatasetError::DuplicateQueryId { line, id: query.id });
        }
        if passages.len() > max_passages {
            passages.truncate(max_passages);
            self.truncated += 1;
        }
        let candidates = CandidateSet::from_unnumbered(query, passages, max_passages)
            .map_err(|e| DatasetError::invalid(line, e))?;
        self.instances.push(EvalInstance { candidates, gold });
        Ok(())
    }

    fn finish(self) -> LoadedDataset {
        LoadedDataset {
            instances: self.instances,
            truncated: self.truncated,
        }
    }
}

/// Serializes one instance as a native JSONL line (no trailing newline).
pub fn to_native_line(inst: &EvalInstance) -> String {
    let record = NativeRecord {
        query: inst.candidates.query.clone(),
        passages: inst
            .candidates
            .passages()
            .iter()
            .map(|p| NativePassage {
                doc_id: p.doc_id.clone(),
                title: p.title.clone(),
                text: p.text.clone(),
            })
            .collect(),
        gold: inst.gold.clone(),
    };
    serde_json::to_string(&record).expect("native record serializes")
}

pub fn write_native(path: &Path, instances: &[EvalInstance]) -> std::io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        writeln!(out, "{}", to_native_line(inst))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alce_record(ndocs: usize) -> Value {
        let docs: Vec<Value> = (0..ndocs)
            .map(|i| serde_json::json!({"title": format!("T{i}"), "text": format!("body {i}")}))
            .collect();
        serde_json::json!({
            "sample_id": "s1",
            "question": "Who built it?",
            "docs": docs,
            "qa_pairs": [
                {"short_answers": ["Alice"]},
                {"short_answers": ["Bob", "Robert"]},
                {"short_answers": ["Carol"]}
            ]
        })
    }

    #[test]
    fn alce_record_maps_fields() {
        let content = serde_json::to_string(&vec![alce_record(10)]).unwrap();
        let loaded = parse_alce(&content, 10).unwrap();
        assert_eq!(loaded.instances.len(), 1);
        assert_eq!(loaded.truncated, 0);
        let inst = &loaded.instances[0];
        assert_eq!(inst.candidates.m(), 10);
        assert_eq!(inst.gold.kind(), GoldKind::ShortAnswers);
        match &inst.gold {
            GoldLabels::ShortAnswers(sets) => assert_eq!(sets.len(), 3),
            _ => unreachable!(),
        }
        assert_eq!(inst.candidates.passage(1).unwrap().title.as_deref(), Some("T0"));
    }

    #[test]
    fn alce_truncates_to_max() {
        let content = serde_json::to_string(&vec![alce_record(20)]).unwrap();
        let loaded = parse_alce(&content, 10).unwrap();
        assert_eq!(loaded.instances[0].candidates.m(), 10);
        assert_eq!(loaded.truncated, 1);
        let ords: Vec<_> = loaded.instances[0]
            .candidates
            .passages()
            .iter()
            .map(|p| p.ordinal)
            .collect();
        assert_eq!(ords, (1..=10).collect::<Vec<_>>());
        assert_eq!(
            loaded.instances[0].candidates.passage(10).unwrap().text,
            "body 9"
        );
    }

    #[test]
    fn zero_docs_is_an_error_naming_the_line() {
        let content = format!(
            "{}\n{}\n",
            serde_json::to_string(&alce_record(2)).unwrap(),
            serde_json::to_string(&alce_record(0))
                .unwrap()
                .replace("\"s1\"", "\"s2\"")
        );
        let err = parse_alce(&content, 10).unwrap_err();
        match err {
            DatasetError::Malformed { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "passages");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn native_reports_missing_field() {
        let err = parse_native(r#"{"query":{"id":"a","text":"b"},"passages":[]}"#, 10).unwrap_err();
        match err {
            DatasetError::Malformed { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "gold");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_gold_kinds_rejected() {
        let a = r#"{"query":{"id":"a","text":"q"},"passages":[{"doc_id":"d","title":null,"text":"t"}],"gold":{"kind":"claims","items":[["x"]]}}"#;
        let b = r#"{"query":{"id":"b","text":"q"},"passages":[{"doc_id":"d","title":null,"text":"t"}],"gold":{"kind":"list_answers","items":[["x"]]}}"#;
        let err = parse_native(&format!("{a}\n{b}\n"), 10).unwrap_err();
        assert!(matches!(err, DatasetError::MixedGoldKinds { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetFormat::NativeJsonl, 10),
            Err(DatasetError::Empty(_))
        ));
    }

    #[test]
    fn qampari_and_eli5_shapes() {
        let q = r#"{"id": 7, "question": "list?", "docs": [{"title": "t", "text": "x"}], "answers": [["a", "A"], ["b"]]}"#;
        let loaded = parse_alce(q, 10).unwrap();
        assert_eq!(loaded.instances[0].query().id, "7");
        assert_eq!(loaded.gold_kind(), Some(GoldKind::ListAnswers));
        let e = r#"{"question_id": "e1", "question": "why?", "docs": [{"title": "t", "text": "x"}], "claims": ["c1", "c2"]}"#;
        let loaded = parse_alce(e, 10).unwrap();
        assert_eq!(
            loaded.instances[0].gold,
            GoldLabels::Claims(vec!["c1".into(), "c2".into()])
        );
    }
}
