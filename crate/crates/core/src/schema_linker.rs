//! Two-stage schema linking over a filtered schema: each table is scored 1-10
//! by the model, tables above the threshold are kept, then columns of each
//! kept table are chosen by majority vote over repeated model calls.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::llm_backend::{Backend, BackendError, CallContext, Stage};
use crate::prompt_engine::{PromptTemplate, SlotValues};
use crate::schema_catalog::{DatabaseSchema, SerializationStyle, TableDef};

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("table `{table}`: backend call failed: {source}")]
    Backend {
        table: String,
        #[source]
        source: BackendError,
    },
    #[error("table `{table}`: no score in 1..=10 found in reply {raw:?}")]
    ScoringFailed { table: String, raw: String },
    #[error("table `{table}`: none of {votes} column votes could be parsed")]
    VotingFailed { table: String, votes: usize },
    #[error("no table scores to select from")]
    EmptyScores,
    #[error("invalid linking config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkingConfig {
    /// Tables need a score strictly greater than this.
    pub threshold: u8,
    /// Odd number of column-selection calls per table.
    pub votes: usize,
    /// Replaces the link templates' own exemplars when non-empty.
    pub few_shot: Vec<String>,
}

impl Default for LinkingConfig {
    fn default() -> Self {
        Self {
            threshold: 6,
            votes: 3,
            few_shot: Vec::new(),
        }
    }
}

impl LinkingConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(1..=10).contains(&self.threshold) {
            return Err(LinkError::InvalidConfig(format!(
                "threshold {} outside 1..=10",
                self.threshold
            )));
        }
        if self.votes == 0 || self.votes.is_multiple_of(2) {
            return Err(LinkError::InvalidConfig(format!(
                "votes must be odd and positive, got {}",
                self.votes
            )));
        }
        Ok(())
    }

    fn exemplars(&self) -> Option<&[String]> {
        (!self.few_shot.is_empty()).then_some(self.few_shot.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableScore {
    pub table: String,
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSchema {
    pub base: DatabaseSchema,
    pub table_scores: Vec<TableScore>,
    pub linked: BTreeMap<String, BTreeSet<String>>,
    pub threshold: u8,
    /// Set when no table cleared the threshold and the best one was kept.
    pub fallback: bool,
    /// Tables whose votes were all unparsable; every column was kept.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub unvoted: BTreeSet<String>,
}

impl LinkedSchema {
    /// The base schema restricted to the linked tables and columns.
    pub fn projected(&self) -> DatabaseSchema {
        self.base
            .project(&self.linked)
            .expect("linked names are drawn from the base schema")
    }

    pub fn linked_tables(&self) -> impl Iterator<Item = &str> {
        self.linked.keys().map(String::as_str)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.linked.is_empty() {
            return Err("no table linked".into());
        }
        for (table, cols) in &self.linked {
            let def = self
                .base
                .table(table)
                .ok_or_else(|| format!("linked table `{table}` not in base"))?;
            if cols.is_empty() {
                return Err(format!("linked table `{table}` has no columns"));
            }
            if let Some(c) = cols.iter().find(|c| def.column(c).is_none()) {
                return Err(format!("linked column `{table}.{c}` not in base"));
            }
            let score = self
                .table_scores
                .iter()
                .find(|s| s.table.eq_ignore_ascii_case(table))
                .ok_or_else(|| format!("linked table `{table}` has no score"))?;
            if score.score <= self.threshold && !self.fallback {
                return Err(format!(
                    "table `{table}` scored {} but threshold is {}",
                    score.score, self.threshold
                ));
            }
        }
        if self.fallback && self.linked.len() != 1 {
            return Err("fallback must link exactly one table".into());
        }
        Ok(())
    }
}

fn integer_runs(text: &str) -> impl Iterator<Item = (usize, u64)> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let value = text[start..i].parse::<u64>().unwrap_or(u64::MAX);
                return Some((start, value));
            }
            i += 1;
        }
        None
    })
}

/// Reads a 1-10 score: a labelled `Score: n` first, else the first integer
/// in range anywhere in the reply.
pub fn parse_score(reply: &str) -> Option<u8> {
    let lower = reply.to_ascii_lowercase();
    for (pos, _) in lower.match_indices("score") {
        let rest = lower[pos + 5..].trim_start();
        if let Some(rest) = rest.strip_prefix([':', '=']) {
            let rest = rest.trim_start();
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            if let Ok(v) = digits.parse::<u8>() {
                if (1..=10).contains(&v) {
                    return Some(v);
                }
            }
        }
    }
    integer_runs(reply)
        .map(|(_, v)| v)
        .find(|v| (1..=10).contains(v))
        .map(|v| v as u8)
}

/// Scores one table against the question with a single model call, retrying
/// once if the reply carries no usable score.
pub fn score_table(
    template: &PromptTemplate,
    question: &str,
    table: &TableDef,
    cfg: &LinkingConfig,
    backend: &dyn Backend,
    question_id: &str,
) -> Result<TableScore, LinkError> {
    let table_text = single_table_text(table);
    let prompt = template.render(&SlotValues {
        schema: &table_text,
        question,
        examples: "",
        exemplars: cfg.exemplars(),
    });
    let ctx = CallContext::new(question_id, Stage::Linking);
    let mut last = String::new();
    for _ in 0..2 {
        let reply = backend
            .complete(&ctx, &prompt)
            .map_err(|source| LinkError::Backend {
                table: table.name.clone(),
                source,
            })?;
        if let Some(score) = parse_score(&reply.text) {
            let rationale = reply.text.trim();
            return Ok(TableScore {
                table: table.name.clone(),
                score,
                rationale: (!rationale.is_empty()).then(|| rationale.to_string()),
            });
        }
        last = reply.text;
    }
    Err(LinkError::ScoringFailed {
        table: table.name.clone(),
        raw: last,
    })
}

fn single_table_text(table: &TableDef) -> String {
    let mut t = table.clone();
    for c in &mut t.columns {
        c.table_index = 0;
    }
    DatabaseSchema {
        db_id: "_".into(),
        tables: vec![t],
        foreign_keys: vec![],
    }
    .serialize(SerializationStyle::DdlLike)
}

/// Tables scoring strictly above the threshold, best first (ties keep the
/// input order). Falls back to the single best table when none qualifies.
pub fn select_tables(scores: &[TableScore], cfg: &LinkingConfig) -> Result<Vec<String>, LinkError> {
    if scores.is_empty() {
        return Err(LinkError::EmptyScores);
    }
    let mut passing: Vec<&TableScore> = scores.iter().filter(|s| s.score > cfg.threshold).collect();
    // Stable sort keeps schema order among equal scores.
    passing.sort_by_key(|s| std::cmp::Reverse(s.score));
    if passing.is_empty() {
        let best = scores
            .iter()
            .reduce(|best, s| if s.score > best.score { s } else { best })
            .expect("non-empty");
        return Ok(vec![best.table.clone()]);
    }
    Ok(passing.into_iter().map(|s| s.table.clone()).collect())
}

fn clean_item(item: &str) -> &str {
    let item = item.trim().trim_matches(|c: char| {
        c.is_whitespace()
            || matches!(
                c,
                '`' | '"' | '\'' | '[' | ']' | '*' | '-' | '.' | '{' | '}'
            )
    });
    item.rsplit('.').next().unwrap_or(item).trim()
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// Parses one column vote. `None` means the reply is unparsable; an empty set
/// means it named only unknown columns.
pub fn parse_column_reply(reply: &str, table: &TableDef) -> Option<BTreeSet<String>> {
    let lower = reply.to_ascii_lowercase();
    let body = match lower.find("columns:") {
        Some(pos) => reply[pos + "columns:".len()..].lines().next().unwrap_or(""),
        None => reply,
    };
    let items: Vec<&str> = body
        .split([',', '\n', ';'])
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect();
    let known = |name: &str| table.column(name).map(|c| c.name.clone());

    let has_list = items.iter().any(|i| is_identifier(i) || known(i).is_some());
    if has_list {
        return Some(items.iter().filter_map(|i| known(i)).collect());
    }
    // Prose reply: pick out column names mentioned as words.
    let mentioned: BTreeSet<String> = reply
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter_map(known)
        .collect();
    (!mentioned.is_empty()).then_some(mentioned)
}

/// Columns named by a strict majority of `cfg.votes` independent calls.
pub fn vote_columns(
    template: &PromptTemplate,
    table: &TableDef,
    question: &str,
    cfg: &LinkingConfig,
    backend: &dyn Backend,
    question_id: &str,
) -> Result<BTreeSet<String>, LinkError> {
    let table_text = single_table_text(table);
    let prompt = template.render(&SlotValues {
        schema: &table_text,
        question,
        examples: "",
        exemplars: cfg.exemplars(),
    });
    let ctx = CallContext::new(question_id, Stage::Linking);
    let mut ballots = Vec::with_capacity(cfg.votes);
    for _ in 0..cfg.votes {
        let reply = backend
            .complete(&ctx, &prompt)
            .map_err(|source| LinkError::Backend {
                table: table.name.clone(),
                source,
            })?;
        ballots.push(parse_column_reply(&reply.text, table));
    }
    tally(table, &ballots, cfg.votes)
}

/// Majority over `votes` ballots; unparsable ballots count as empty votes.
pub fn tally(
    table: &TableDef,
    ballots: &[Option<BTreeSet<String>>],
    votes: usize,
) -> Result<BTreeSet<String>, LinkError> {
    if ballots.iter().all(Option::is_none) {
        return Err(LinkError::VotingFailed {
            table: table.name.clone(),
            votes,
        });
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ballot in ballots.iter().flatten() {
        for col in ballot {
            *counts.entry(col.as_str()).or_default() += 1;
        }
    }
    let winners: BTreeSet<String> = counts
        .into_iter()
        .filter(|(_, n)| 2 * n > votes)
        .map(|(c, _)| c.to_string())
        .collect();
    if winners.is_empty() {
        Ok(table.column_names().map(String::from).collect())
    } else {
        Ok(winners)
    }
}

/// Runs table scoring, selection and column voting over the filtered schema.
pub fn link_schema(
    filtered: &DatabaseSchema,
    question: &str,
    cfg: &LinkingConfig,
    table_template: &PromptTemplate,
    column_template: &PromptTemplate,
    backend: &dyn Backend,
    question_id: &str,
) -> Result<LinkedSchema, LinkError> {
    cfg.validate()?;
    let table_scores = filtered
        .tables
        .iter()
        .map(|t| score_table(table_template, question, t, cfg, backend, question_id))
        .collect::<Result<Vec<_>, _>>()?;
    let selected = select_tables(&table_scores, cfg)?;
    let fallback = table_scores.iter().all(|s| s.score <= cfg.threshold);

    let mut linked = BTreeMap::new();
    let mut unvoted = BTreeSet::new();
    for name in &selected {
        let table = filtered.table(name).expect("selected from filtered schema");
        let cols = match vote_columns(column_template, table, question, cfg, backend, question_id) {
            Err(LinkError::VotingFailed { table: t, votes }) => {
                log::warn!("{question_id}: no parsable column vote for `{t}` in {votes} replies, keeping all columns");
                unvoted.insert(t);
                table.column_names().map(String::from).collect()
            }
            other => other?,
        };
        linked.insert(table.name.clone(), cols);
    }
    Ok(LinkedSchema {
        base: filtered.clone(),
        table_scores,
        linked,
        threshold: cfg.threshold,
        fallback,
        unvoted,
    })
}
