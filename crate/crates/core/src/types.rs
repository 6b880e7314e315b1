//! Domain types shared across the harness.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Default cap on candidates per query.
pub const DEFAULT_MAX_PASSAGES: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InvalidInstance {
    #[error("query id is empty")]
    EmptyQueryId,
    #[error("query text is empty")]
    EmptyQueryText,
    #[error("candidate set has no passages")]
    NoPassages,
    #[error("candidate set has {got} passages, maximum is {max}")]
    TooManyPassages { got: usize, max: usize },
    #[error("passage {ordinal} has empty text")]
    EmptyPassageText { ordinal: usize },
    #[error("passage at position {index} has ordinal {ordinal}, expected {}", index + 1)]
    OrdinalGap { index: usize, ordinal: usize },
    #[error("gold labels contain an empty alias set")]
    EmptyAliasSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, InvalidInstance> {
        let query = Self {
            id: id.into(),
            text: text.into(),
        };
        if query.id.is_empty() {
            return Err(InvalidInstance::EmptyQueryId);
        }
        if query.text.trim().is_empty() {
            return Err(InvalidInstance::EmptyQueryText);
        }
        Ok(query)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    /// 1-based identifier shown to the ranker.
    pub ordinal: usize,
    pub doc_id: String,
    pub title: Option<String>,
    pub text: String,
}

/// A query with its first-stage retrieved passages, in retrieval order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: Query,
    passages: Vec<Passage>,
}

impl CandidateSet {
    /// Validates ordinal contiguity (1..=m), non-empty texts and `0 < m <= max`.
    pub fn new(query: Query, passages: Vec<Passage>, max: usize) -> Result<Self, InvalidInstance> {
        if passages.is_empty() {
            return Err(InvalidInstance::NoPassages);
        }
        if passages.len() > max {
            return Err(InvalidInstance::TooManyPassages {
                got: passages.len(),
                max,
            });
        }
        for (index, p) in passages.iter().enumerate() {
            if p.ordinal != index + 1 {
                return Err(InvalidInstance::OrdinalGap {
                    index,
                    ordinal: p.ordinal,
                });
            }
            if p.text.trim().is_empty() {
                return Err(InvalidInstance::EmptyPassageText { ordinal: p.ordinal });
            }
        }
        Ok(Self { query, passages })
    }

    /// Builds a candidate set from unnumbered passages, assigning ordinals in order.
    pub fn from_unnumbered(
        query: Query,
        passages: impl IntoIterator<Item = (String, Option<String>, String)>,
        max: usize,
    ) -> Result<Self, InvalidInstance> {
        let passages = passages
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, title, text))| Passage {
                ordinal: i + 1,
                doc_id,
                title,
                text,
            })
            .collect();
        Self::new(query, passages, max)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn m(&self) -> usize {
        self.passages.len()
    }

    /// Passage for a 1-based ordinal.
    pub fn passage(&self, ordinal: usize) -> Option<&Passage> {
        ordinal.checked_sub(1).and_then(|i| self.passages.get(i))
    }

    /// Returns a new set holding the given passages (by current ordinal), renumbered 1..n.
    pub fn subset(&self, ordinals: &[usize]) -> Result<Self, InvalidInstance> {
        let passages = ordinals
            .iter()
            .filter_map(|&o| self.passage(o))
            .map(|p| (p.doc_id.clone(), p.title.clone(), p.text.clone()));
        Self::from_unnumbered(self.query.clone(), passages, usize::MAX)
    }
}

/// Ordered adaptive evidence subset parsed from ranker output.
///
/// An empty `ordinals` list is the termination case: no passage is relevant and
/// generation proceeds closed-book.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub ordinals: Vec<usize>,
    pub raw_output: String,
    pub repair_notes: Vec<String>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.ordinals.is_empty()
    }
}

/// Acceptable surface forms of one required answer.
pub type AliasSet = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    ShortAnswers,
    ListAnswers,
    Claims,
}

impl fmt::Display for GoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoldKind::ShortAnswers => "short_answers",
            GoldKind::ListAnswers => "list_answers",
            GoldKind::Claims => "claims",
        })
    }
}

/// Ground truth for one query. Serialized as `{"kind": ..., "items": [[...], ...]}`,
/// with claims stored as single-element lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGold", into = "RawGold")]
pub enum GoldLabels {
    ShortAnswers(Vec<AliasSet>),
    ListAnswers(Vec<AliasSet>),
    Claims(Vec<String>),
}

impl GoldLabels {
    pub fn kind(&self) -> GoldKind {
        match self {
            GoldLabels::ShortAnswers(_) => GoldKind::ShortAnswers,
            GoldLabels::ListAnswers(_) => GoldKind::ListAnswers,
            GoldLabels::Claims(_) => GoldKind::Claims,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidInstance> {
        match self {
            GoldLabels::ShortAnswers(sets) | GoldLabels::ListAnswers(sets) => {
                if sets.iter().any(|s| s.iter().all(|a| a.trim().is_empty())) {
                    return Err(InvalidInstance::EmptyAliasSet);
                }
            }
            GoldLabels::Claims(claims) => {
                if claims.iter().any(|c| c.trim().is_empty()) {
                    return Err(InvalidInstance::EmptyAliasSet);
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawGold {
    kind: GoldKind,
    items: Vec<Vec<String>>,
}

impl TryFrom<RawGold> for GoldLabels {
    type Error = InvalidInstance;

    fn try_from(raw: RawGold) -> Result<Self, Self::Error> {
        let gold = match raw.kind {
            GoldKind::ShortAnswers => GoldLabels::ShortAnswers(raw.items),
            GoldKind::ListAnswers => GoldLabels::ListAnswers(raw.items),
            GoldKind::Claims => {
                if raw.items.iter().any(|i| i.len() != 1) {
                    return Err(InvalidInstance::EmptyAliasSet);
                }
                GoldLabels::Claims(raw.items.into_iter().flatten().collect())
            }
        };
        gold.validate()?;
        Ok(gold)
    }
}

impl From<GoldLabels> for RawGold {
    fn from(gold: GoldLabels) -> Self {
        let kind = gold.kind();
        let items = match gold {
            GoldLabels::ShortAnswers(s) | GoldLabels::ListAnswers(s) => s,
            GoldLabels::Claims(c) => c.into_iter().map(|c| vec![c]).collect(),
        };
        RawGold { kind, items }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub candidates: CandidateSet,
    pub gold: GoldLabels,
}

impl EvalInstance {
    pub fn query(&self) -> &Query {
        &self.candidates.query
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> Query {
        Query::new("q1", "who?").unwrap()
    }

    #[test]
    fn rejects_blank_query_text() {
        assert_eq!(Query::new("q", "   "), Err(InvalidInstance::EmptyQueryText));
        assert_eq!(Query::new("", "x"), Err(InvalidInstance::EmptyQueryId));
    }

    #[test]
    fn candidate_set_checks_contiguity() {
        let p = |o| Passage {
            ordinal: o,
            doc_id: format!("d{o}"),
            title: None,
            text: "t".into(),
        };
        assert!(CandidateSet::new(q(), vec![p(1), p(2)], 10).is_ok());
        assert_eq!(
            CandidateSet::new(q(), vec![p(1), p(3)], 10),
            Err(InvalidInstance::OrdinalGap {
                index: 1,
                ordinal: 3
            })
        );
        assert_eq!(
            CandidateSet::new(q(), vec![], 10),
            Err(InvalidInstance::NoPassages)
        );
        assert!(matches!(
            CandidateSet::new(q(), vec![p(1), p(2)], 1),
            Err(InvalidInstance::TooManyPassages { .. })
        ));
    }

    #[test]
    fn gold_wire_format() {
        let g: GoldLabels =
            serde_json::from_str(r#"{"kind":"claims","items":[["a b"],["c"]]}"#).unwrap();
        assert_eq!(g, GoldLabels::Claims(vec!["a b".into(), "c".into()]));
        let back = serde_json::to_string(&g).unwrap();
        assert_eq!(back, r#"{"kind":"claims","items":[["a b"],["c"]]}"#);
        assert!(serde_json::from_str::<GoldLabels>(r#"{"kind":"short_answers","items":[[]]}"#)
            .is_err());
    }
}
