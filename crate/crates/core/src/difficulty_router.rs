//! Difficulty grading ahead of generation, and template routing.
//!
//! A question is complex when two or more tables were linked, or when its
//! wording matches a nesting cue. Cues are lowercase phrases matched on token
//! boundaries; `...` inside a cue stands for any run of tokens, so
//! `"most ... per"` matches "the most students per department".

use serde::{Deserialize, Serialize};

use crate::example_store::tokenize;
use crate::prompt_engine::TemplateKind;
use crate::schema_linker::LinkedSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyGrade {
    pub level: Level,
    /// `multi_table` and/or `cue:<phrase>` for every rule that fired.
    pub signals: Vec<String>,
}

pub const MULTI_TABLE_SIGNAL: &str = "multi_table";

pub fn default_nesting_cues() -> Vec<String> {
    [
        "for each",
        "more than one",
        "both",
        "neither",
        "not in",
        "at least",
        "except",
        "most ... per",
        "least ... per",
        "highest ... per",
        "lowest ... per",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub nesting_cues: Vec<String>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            nesting_cues: default_nesting_cues(),
        }
    }
}

fn find_seq(haystack: &[String], needle: &[String], from: usize) -> Option<usize> {
    if needle.is_empty() {
        return Some(from);
    }
    (from..=haystack.len().checked_sub(needle.len())?)
        .find(|&i| haystack[i..i + needle.len()] == *needle)
        .map(|i| i + needle.len())
}

/// True when the cue's segments occur in order on token boundaries.
pub fn cue_matches(cue: &str, question_tokens: &[String]) -> bool {
    let segments: Vec<Vec<String>> = cue
        .split("...")
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect();
    if segments.is_empty() {
        return false;
    }
    let mut pos = 0;
    for seg in &segments {
        match find_seq(question_tokens, seg, pos) {
            Some(end) => pos = end,
            None => return false,
        }
    }
    true
}

pub fn grade_parts(
    linked_table_count: usize,
    question: &str,
    cfg: &RouterConfig,
) -> DifficultyGrade {
    let mut signals = Vec::new();
    if linked_table_count >= 2 {
        signals.push(MULTI_TABLE_SIGNAL.to_string());
    }
    let tokens = tokenize(question);
    for cue in &cfg.nesting_cues {
        if cue_matches(cue, &tokens) {
            signals.push(format!("cue:{cue}"));
        }
    }
    let level = if signals.is_empty() {
        Level::Simple
    } else {
        Level::Complex
    };
    DifficultyGrade { level, signals }
}

pub fn grade(linked: &LinkedSchema, question: &str, cfg: &RouterConfig) -> DifficultyGrade {
    grade_parts(linked.linked.len(), question, cfg)
}

pub fn select_template(grade: &DifficultyGrade) -> TemplateKind {
    match grade.level {
        Level::Simple => TemplateKind::Cot,
        Level::Complex => TemplateKind::Got,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        let cfg = RouterConfig::default();
        let g = grade_parts(1, "list all singers", &cfg);
        assert_eq!(g.level, Level::Simple);
        assert!(g.signals.is_empty());
        assert_eq!(select_template(&g), TemplateKind::Cot);

        let g = grade_parts(2, "list all singers", &cfg);
        assert_eq!(g.signals, [MULTI_TABLE_SIGNAL]);
        assert_eq!(select_template(&g), TemplateKind::Got);

        let g = grade_parts(1, "singers with more than one concert", &cfg);
        assert_eq!(g.signals, ["cue:more than one"]);

        let g = grade_parts(3, "Which stadium has the most concerts per year?", &cfg);
        assert_eq!(g.signals, [MULTI_TABLE_SIGNAL, "cue:most ... per"]);
        assert_eq!(select_template(&g), TemplateKind::Got);
    }

    #[test]
    fn cue_boundaries() {
        let t = tokenize("find the bothersome items");
        assert!(!cue_matches("both", &t));
        assert!(!cue_matches(
            "most ... per",
            &tokenize("per capita is the most")
        ));
        assert!(cue_matches(
            "not in",
            &tokenize("Which ids are NOT in the list?")
        ));
        assert!(!cue_matches("", &t));
    }
}
