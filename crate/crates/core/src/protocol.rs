//! Listwise ranking prompt and the passage-dropout output grammar.
//!
//! The ranker sees each candidate tagged with a bracketed identifier and answers
//! with the relevant identifiers in descending relevance, joined by `" > "`.
//! Irrelevant passages are simply left out; `[0]` means nothing is relevant.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{CandidateSet, Selection};

pub const TERMINATION_TOKEN: &str = "[0]";
pub const SEPARATOR: &str = " > ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {message}")]
    Read { path: String, message: String },
    #[error("instruction text must mention the termination token \"[0]\"")]
    MissingTermination,
    #[error("instruction text must mention the separator \" > \"")]
    MissingSeparator,
    #[error("per-passage format must contain the {{ordinal}} slot")]
    MissingOrdinalSlot,
    #[error("per-passage character budget must be positive")]
    ZeroBudget,
}

/// Ranking prompt template.
///
/// `per_passage_format` takes `{ordinal}`, `{title}` and `{text}`; when a passage
/// has no title the `{title}: ` segment is dropped. `instruction_text` may use
/// `{query}` and `{num}` (candidate count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub per_passage_format: String,
    pub instruction_text: String,
    pub per_passage_char_budget: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_text: "You are an intelligent assistant that judges which passages help \
                          answer a search query and ranks the useful ones by relevance."
                .to_string(),
            per_passage_format: "[{ordinal}] {title}: {text}".to_string(),
            instruction_text: "Search query: {query}\n\n\
                 Above are {num} passages, each marked with a numerical identifier in brackets. \
                 Select only the passages that contribute to answering the query and rank them \
                 in descending order of relevance. Leave out every passage that is irrelevant. \
                 Output the identifiers of the selected passages separated by \" > \", for \
                 example [a] > [b] > [c]. If none of the passages is relevant, output only [0]. \
                 Respond with the identifier list only, without any explanation."
                .to_string(),
            per_passage_char_budget: 1000,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if !self.instruction_text.contains(TERMINATION_TOKEN) {
            return Err(TemplateError::MissingTermination);
        }
        if !self.instruction_text.contains(SEPARATOR) {
            return Err(TemplateError::MissingSeparator);
        }
        if !self.per_passage_format.contains("{ordinal}") {
            return Err(TemplateError::MissingOrdinalSlot);
        }
        if self.per_passage_char_budget == 0 {
            return Err(TemplateError::ZeroBudget);
        }
        Ok(())
    }

    /// Loads a template from TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let read_err = |message: String| TemplateError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let template: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
        };
        template.validate()?;
        Ok(template)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    /// Hex SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("template serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Truncates to at most `budget` characters, cutting back to the last whitespace
/// so no word is split. A single over-long word is hard-cut.
pub fn truncate_at_word(text: &str, budget: usize) -> &str {
    let text = text.trim();
    if text.chars().count() <= budget {
        return text;
    }
    let cut = text
        .char_indices()
        .nth(budget)
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let head = &text[..cut];
    // The char right after the cut being whitespace means head already ends on a word.
    if text[cut..].starts_with(char::is_whitespace) {
        return head.trim_end();
    }
    match head.rfind(char::is_whitespace) {
        Some(ws) => head[..ws].trim_end(),
        None => head,
    }
}

fn render_passage(template: &PromptTemplate, ordinal: usize, title: Option<&str>, text: &str) -> String {
    let body = truncate_at_word(text, template.per_passage_char_budget);
    let title = title.map(str::trim).filter(|t| !t.is_empty());
    let format = match title {
        Some(_) => template.per_passage_format.clone(),
        None => template
            .per_passage_format
            .replace("{title}: ", "")
            .replace("{title}", ""),
    };
    format
        .replace("{ordinal}", &ordinal.to_string())
        .replace("{title}", title.unwrap_or(""))
        .replace("{text}", body)
}

/// System message plus a user message enumerating every candidate followed by
/// the selection instruction.
pub fn build_rank_prompt(cs: &CandidateSet, template: &PromptTemplate) -> Vec<ChatMessage> {
    let mut user = String::new();
    for p in cs.passages() {
        user.push_str(&render_passage(template, p.ordinal, p.title.as_deref(), &p.text));
        user.push('\n');
    }
    user.push('\n');
    user.push_str(
        &template
            .instruction_text
            .replace("{query}", cs.query.text.trim())
            .replace("{num}", &cs.m().to_string()),
    );
    vec![
        ChatMessage::system(template.system_text.clone()),
        ChatMessage::user(user),
    ]
}

/// What to do when ranker output contains no usable identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedPolicy {
    Error,
    #[default]
    FallbackOriginalOrder,
    Empty,
}

impl std::str::FromStr for MalformedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(Self::Error),
            "fallback_original_order" | "fallback" => Ok(Self::FallbackOriginalOrder),
            "empty" => Ok(Self::Empty),
            other => Err(format!("unknown malformed-output policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("no valid passage identifier in ranker output: {raw:?}")]
    ParseFailure { raw: String },
    #[error("ordinal {0} appears more than once")]
    Duplicate(usize),
    #[error("ordinal must be positive")]
    NonPositive,
}

fn id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*(\d+)\s*\]").expect("valid regex"))
}

/// Parses ranker output under the dropout grammar.
///
/// Identifiers are taken left to right. `[0]` ends the list: as the first
/// identifier it yields the empty selection, later it keeps what came before.
/// Duplicates (keep-first) and out-of-range identifiers are dropped with a note.
pub fn parse_selection(
    raw: &str,
    m: usize,
    policy: MalformedPolicy,
) -> Result<Selection, SelectionError> {
    let mut ordinals: Vec<usize> = Vec::new();
    let mut notes = Vec::new();
    let mut terminated = false;
    let mut seen_any = false;

    for cap in id_pattern().captures_iter(raw) {
        let digits = &cap[1];
        // Absurdly long digit runs cannot be in range.
        let value = digits.parse::<usize>().ok();
        if value == Some(0) {
            if seen_any {
                notes.push(format!(
                    "termination token after {} identifier(s); kept preceding identifiers",
                    ordinals.len()
                ));
            }
            terminated = true;
            break;
        }
        seen_any = true;
        match value {
            Some(v) if v <= m => {
                if ordinals.contains(&v) {
                    notes.push(format!("dropped duplicate identifier [{v}]"));
                } else {
                    ordinals.push(v);
                }
            }
            _ => notes.push(format!("dropped out-of-range identifier [{digits}] (m={m})")),
        }
    }

    if ordinals.is_empty() && !terminated {
        match policy {
            MalformedPolicy::Error => {
                return Err(SelectionError::ParseFailure {
                    raw: raw.to_string(),
                })
            }
            MalformedPolicy::FallbackOriginalOrder => {
                ordinals = (1..=m).collect();
                notes.push("no valid identifier; fell back to original order".to_string());
            }
            MalformedPolicy::Empty => {
                notes.push("no valid identifier; treated as empty selection".to_string());
            }
        }
    }

    Ok(Selection {
        ordinals,
        raw_output: raw.to_string(),
        repair_notes: notes,
    })
}

/// Canonical rendering: `"[0]"` for the empty list, otherwise `"[a] > [b] > ..."`.
pub fn render_selection(ordinals: &[usize]) -> Result<String, SelectionError> {
    if ordinals.is_empty() {
        return Ok(TERMINATION_TOKEN.to_string());
    }
    for (i, &o) in ordinals.iter().enumerate() {
        if o == 0 {
            return Err(SelectionError::NonPositive);
        }
        if ordinals[..i].contains(&o) {
            return Err(SelectionError::Duplicate(o));
        }
    }
    Ok(ordinals
        .iter()
        .map(|o| format!("[{o}]"))
        .collect::<Vec<_>>()
        .join(SEPARATOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Query;
    use proptest::prelude::*;

    fn cs(m: usize, text: &str) -> CandidateSet {
        CandidateSet::from_unnumbered(
            Query::new("q", "what is it?").unwrap(),
            (0..m).map(|i| (format!("d{i}"), Some(format!("Title {i}")), text.to_string())),
            100,
        )
        .unwrap()
    }

    #[test]
    fn prompt_enumerates_each_identifier_once_in_order() {
        let msgs = build_rank_prompt(&cs(3, "body"), &PromptTemplate::default());
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        let user = &msgs[1].content;
        let positions: Vec<usize> = ["[1]", "[2]", "[3]"]
            .iter()
            .map(|id| {
                assert_eq!(user.matches(id).count(), 1, "{id} in {user}");
                user.find(id).unwrap()
            })
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(user.contains("[1] Title 0: body"));
    }

    #[test]
    fn long_passage_truncated_at_word_boundary() {
        let word = "lorem ";
        let text = word.repeat(5000 / word.len() + 1);
        let template = PromptTemplate::default();
        let msgs = build_rank_prompt(&cs(1, &text), &template);
        let line = msgs[1].content.lines().next().unwrap();
        let body = line.strip_prefix("[1] Title 0: ").unwrap();
        assert!(body.chars().count() <= 1000);
        assert!(body.ends_with("lorem"));
        assert!(text.starts_with(body));
    }

    #[test]
    fn truncate_handles_single_long_word() {
        assert_eq!(truncate_at_word("abcdefgh", 3), "abc");
        assert_eq!(truncate_at_word("ab cd ef", 5), "ab cd");
        assert_eq!(truncate_at_word("ab cd ef", 4), "ab");
        assert_eq!(truncate_at_word("short", 100), "short");
    }

    #[test]
    fn untitled_passage_drops_title_segment() {
        let c = CandidateSet::from_unnumbered(
            Query::new("q", "x").unwrap(),
            vec![("d".to_string(), None, "hello".to_string())],
            10,
        )
        .unwrap();
        let msgs = build_rank_prompt(&c, &PromptTemplate::default());
        assert!(msgs[1].content.starts_with("[1] hello\n"));
    }

    #[test]
    fn default_template_is_valid_and_mentions_termination() {
        let t = PromptTemplate::default();
        t.validate().unwrap();
        let msgs = build_rank_prompt(&cs(4, "x"), &t);
        assert!(msgs[1].content.contains("[0]"));
        assert!(msgs[1].content.contains("what is it?"));
    }

    #[test]
    fn template_validation_errors() {
        let mut t = PromptTemplate::default();
        t.instruction_text = "rank them with > please".into();
        assert!(matches!(t.validate(), Err(TemplateError::MissingTermination)));
        let mut t = PromptTemplate::default();
        t.per_passage_format = "{text}".into();
        assert!(matches!(t.validate(), Err(TemplateError::MissingOrdinalSlot)));
    }

    #[test]
    fn template_toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.toml");
        let t = PromptTemplate::default();
        std::fs::write(&path, t.to_toml()).unwrap();
        assert_eq!(PromptTemplate::load(&path).unwrap(), t);
    }

    #[test]
    fn parse_examples() {
        let p = |raw, m, pol| parse_selection(raw, m, pol).unwrap();
        assert_eq!(p("[2] > [4] > [1]", 5, MalformedPolicy::Error).ordinals, vec![2, 4, 1]);
        let s = p("The answer is [0].", 10, MalformedPolicy::Error);
        assert!(s.ordinals.is_empty());
        assert!(s.repair_notes.is_empty());

        let s = p("[3] > [3] > [7] > [1]", 5, MalformedPolicy::Error);
        assert_eq!(s.ordinals, vec![3, 1]);
        assert_eq!(s.repair_notes.len(), 2);
        assert!(s.repair_notes[0].contains("duplicate"));
        assert!(s.repair_notes[1].contains("out-of-range"));

        let s = p("no relevant ids here", 4, MalformedPolicy::FallbackOriginalOrder);
        assert_eq!(s.ordinals, vec![1, 2, 3, 4]);
        assert!(s.repair_notes[0].contains("fell back"));

        let s = p("nothing", 4, MalformedPolicy::Empty);
        assert!(s.ordinals.is_empty());
        assert_eq!(s.repair_notes.len(), 1);
    }

    #[test]
    fn termination_after_identifiers_keeps_prefix() {
        let s = parse_selection("[2] > [0] > [3]", 5, MalformedPolicy::Error).unwrap();
        assert_eq!(s.ordinals, vec![2]);
        assert_eq!(s.repair_notes.len(), 1);
    }

    #[test]
    fn error_policy_carries_raw_text() {
        let err = parse_selection("sorry", 3, MalformedPolicy::Error).unwrap_err();
        assert_eq!(err, SelectionError::ParseFailure { raw: "sorry".into() });
        // Only out-of-range ids also count as no valid identifier.
        assert!(parse_selection("[9] > [8]", 3, MalformedPolicy::Error).is_err());
    }

    #[test]
    fn huge_identifiers_are_out_of_range() {
        let s = parse_selection("[99999999999999999999999] > [1]", 3, MalformedPolicy::Error)
            .unwrap();
        assert_eq!(s.ordinals, vec![1]);
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_selection(&[3, 1, 5]).unwrap(), "[3] > [1] > [5]");
        assert_eq!(render_selection(&[]).unwrap(), "[0]");
        assert_eq!(render_selection(&[1]).unwrap(), "[1]");
        assert_eq!(render_selection(&[1, 1]), Err(SelectionError::Duplicate(1)));
        assert_eq!(render_selection(&[0]), Err(SelectionError::NonPositive));
    }

    #[test]
    fn prompt_length_monotone_in_m() {
        let t = PromptTemplate::default();
        let lens: Vec<usize> = (1..=10)
            .map(|m| build_rank_prompt(&cs(m, "some passage text"), &t)[1].content.len())
            .collect();
        assert!(lens.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest! {
        #[test]
        fn parse_never_yields_duplicates_or_out_of_range(raw in "(\\[[0-9]{1,2}\\]|[ >a-z\\[\\]0-9.])*", m in 1usize..12) {
            for policy in [MalformedPolicy::Error, MalformedPolicy::FallbackOriginalOrder, MalformedPolicy::Empty] {
                if let Ok(sel) = parse_selection(&raw, m, policy) {
                    let mut seen = std::collections::HashSet::new();
                    for o in &sel.ordinals {
                        prop_assert!(*o >= 1 && *o <= m);
                        prop_assert!(seen.insert(*o));
                    }
                }
            }
        }
    }
}
