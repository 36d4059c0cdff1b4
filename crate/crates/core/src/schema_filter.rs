//! Question-driven schema compression: keep the top tables and, within them,
//! the top columns.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::example_store::{lexical_similarity, tokenize};
use crate::llm_backend::{Backend, BackendError, CallContext, Stage};
use crate::prompt_engine::{PromptTemplate, SlotValues};
use crate::schema_catalog::{DatabaseSchema, Selection, TableDef};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("scoring `{target}`: {source}")]
    Backend {
        target: String,
        #[source]
        source: BackendError,
    },
    #[error("scorer reply has no valid 1-10 score for `{target}`: {reply:?}")]
    MissingScore { target: String, reply: String },
    #[error(transparent)]
    Catalog(#[from] crate::schema_catalog::CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScorerKind {
    #[default]
    Lexical,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_tables: usize,
    pub max_columns_per_table: usize,
    pub scorer: FilterScorerKind,
    /// Append primary keys and surviving foreign-key endpoints beyond the cap.
    pub keep_keys: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_tables: 3,
            max_columns_per_table: 3,
            scorer: FilterScorerKind::Lexical,
            keep_keys: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    Table(String),
    Column(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub target: ScoreTarget,
    pub score: f64,
}

/// Scores tables and columns for a question. Lexical scores lie in [0, 1],
/// LLM scores in [1, 10].
pub trait RelevanceScorer: Send + Sync {
    /// One score per table, in schema order.
    fn table_scores(
        &self,
        schema: &DatabaseSchema,
        question: &str,
    ) -> Result<Vec<f64>, FilterError>;
    /// One score per column of `table`, in column order.
    fn column_scores(&self, table: &TableDef, question: &str) -> Result<Vec<f64>, FilterError>;
}

/// Token-overlap scorer that needs no model.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

const TABLE_NAME_BONUS: f64 = 0.1;

impl LexicalScorer {
    pub fn table_score(table: &TableDef, question: &str) -> f64 {
        let best = std::iter::once(table.name.as_str())
            .chain(table.column_names())
            .map(|name| lexical_similarity(name, question))
            .fold(0.0, f64::max);
        let verbatim = tokenize(question)
            .iter()
            .any(|t| t.eq_ignore_ascii_case(&table.name));
        if verbatim {
            (best + TABLE_NAME_BONUS).min(1.0)
        } else {
            best
        }
    }
}

impl RelevanceScorer for LexicalScorer {
    fn table_scores(
        &self,
        schema: &DatabaseSchema,
        question: &str,
    ) -> Result<Vec<f64>, FilterError> {
        Ok(schema
            .tables
            .iter()
            .map(|t| Self::table_score(t, question))
            .collect())
    }

    fn column_scores(&self, table: &TableDef, question: &str) -> Result<Vec<f64>, FilterError> {
        Ok(table
            .columns
            .iter()
            .map(|c| lexical_similarity(&c.name, question))
            .collect())
    }
}

/// Asks the model for `name: score` lines, one batch call per request.
pub struct LlmScorer<'a> {
    pub backend: &'a dyn Backend,
    pub template: &'a PromptTemplate,
    pub question_id: &'a str,
}

/// Reads `name: score` pairs (comma- or newline-separated) from a reply.
/// Keys are lowercased; a `table.` prefix is dropped.
pub fn parse_score_lines(reply: &str) -> BTreeMap<String, u8> {
    let mut out = BTreeMap::new();
    for item in reply.split([',', '\n', ';']) {
        let Some((name, score)) = item.split_once(':') else {
            continue;
        };
        let name = name
            .trim()
            .trim_matches(|c: char| matches!(c, '-' | '*' | '`' | '"' | '\'') || c.is_whitespace());
        let name = name.rsplit('.').next().unwrap_or(name).to_lowercase();
        let digits: String = score
            .trim()
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if let Ok(v) = digits.parse::<u8>() {
            if (1..=10).contains(&v) && !name.is_empty() {
                out.entry(name).or_insert(v);
            }
        }
    }
    out
}

impl LlmScorer<'_> {
    fn ask(
        &self,
        candidates: &str,
        question: &str,
        context: &str,
    ) -> Result<BTreeMap<String, u8>, FilterError> {
        let prompt = self.template.render(&SlotValues {
            schema: candidates,
            question,
            ..Default::default()
        });
        let reply = self
            .backend
            .complete(&CallContext::new(self.question_id, Stage::Filter), &prompt)
            .map_err(|source| FilterError::Backend {
                target: context.to_string(),
                source,
            })?;
        Ok(parse_score_lines(&reply.text))
    }

    fn lookup(
        scores: &BTreeMap<String, u8>,
        name: &str,
        reply_ctx: &str,
    ) -> Result<f64, FilterError> {
        scores
            .get(&name.to_lowercase())
            .map(|v| *v as f64)
            .ok_or_else(|| FilterError::MissingScore {
                target: name.to_string(),
                reply: reply_ctx.to_string(),
            })
    }
}

impl RelevanceScorer for LlmScorer<'_> {
    fn table_scores(
        &self,
        schema: &DatabaseSchema,
        question: &str,
    ) -> Result<Vec<f64>, FilterError> {
        let candidates = schema
            .tables
            .iter()
            .map(|t| {
                format!(
                    "- {}({})",
                    t.name,
                    t.column_names().collect::<Vec<_>>().join(", ")
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let scores = self.ask(
            &candidates,
            question,
            &format!("tables of {}", schema.db_id),
        )?;
        let shown = format!("{scores:?}");
        schema
            .tables
            .iter()
            .map(|t| Self::lookup(&scores, &t.name, &shown))
            .collect()
    }

    fn column_scores(&self, table: &TableDef, question: &str) -> Result<Vec<f64>, FilterError> {
        let candidates = table
            .columns
            .iter()
            .map(|c| format!("- {}.{}", table.name, c.name))
            .collect::<Vec<_>>()
            .join("\n");
        let scores = self.ask(&candidates, question, &format!("columns of {}", table.name))?;
        let shown = format!("{scores:?}");
        table
            .columns
            .iter()
            .map(|c| Self::lookup(&scores, &c.name, &shown))
            .collect()
    }
}

pub fn score_tables(
    schema: &DatabaseSchema,
    question: &str,
    scorer: &dyn RelevanceScorer,
) -> Result<Vec<RelevanceScore>, FilterError> {
    let scores = scorer.table_scores(schema, question)?;
    Ok(schema
        .tables
        .iter()
        .zip(scores)
        .map(|(t, score)| RelevanceScore {
            target: ScoreTarget::Table(t.name.clone()),
            score,
        })
        .collect())
}

/// Indices of the `n` highest scores; ties keep the earlier index.
fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Reduces `schema` to at most `max_tables` tables of at most
/// `max_columns_per_table` columns each (plus key columns with `keep_keys`).
pub fn filter_schema(
    schema: &DatabaseSchema,
    question: &str,
    cfg: &FilterConfig,
    scorer: &dyn RelevanceScorer,
) -> Result<DatabaseSchema, FilterError> {
    let table_scores = scorer.table_scores(schema, question)?;
    let kept_tables = top_indices(&table_scores, cfg.max_tables.max(1));
    let kept_names: BTreeSet<String> = kept_tables
        .iter()
        .map(|&i| schema.tables[i].name.to_lowercase())
        .collect();

    let mut keep = Selection::new();
    for &ti in &kept_tables {
        let table = &schema.tables[ti];
        let col_scores = scorer.column_scores(table, question)?;
        let mut cols: BTreeSet<String> = top_indices(&col_scores, cfg.max_columns_per_table.max(1))
            .into_iter()
            .map(|ci| table.columns[ci].name.clone())
            .collect();
        if cfg.keep_keys {
            cols.extend(
                table
                    .columns
                    .iter()
                    .filter(|c| c.is_primary_key)
                    .map(|c| c.name.clone()),
            );
            for fk in &schema.foreign_keys {
                if !(kept_names.contains(&fk.from_column.table.to_lowercase())
                    && kept_names.contains(&fk.to_column.table.to_lowercase()))
                {
                    continue;
                }
                for end in [&fk.from_column, &fk.to_column] {
                    if end.table.eq_ignore_ascii_case(&table.name) {
                        if let Some(c) = table.column(&end.column) {
                            cols.insert(c.name.clone());
                        }
                    }
                }
            }
        }
        keep.insert(table.name.clone(), cols);
    }
    Ok(schema.project(&keep)?)
}
