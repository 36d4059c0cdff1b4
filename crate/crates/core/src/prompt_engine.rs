//! Prompt templates, prompt assembly and SQL extraction from model replies.
//!
//! A template file is split into sections by header lines:
//!
//! ```text
//! ### instruction
//! <instruction text>
//! ### exemplar
//! <one worked example>
//! ### exemplar
//! <another>
//! ### template
//! <body with {instruction} {exemplars} {schema} {examples} {question} markers>
//! ```
//!
//! Substitution is a single literal pass: text inserted into a slot is never
//! scanned for further markers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::example_store::{format_examples, ExamplePair};
use crate::schema_catalog::SerializationStyle;
use crate::schema_linker::LinkedSchema;
use crate::sql_scan;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template directory is missing `{0}`")]
    MissingKind(String),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template `{kind}`: slot {{{slot}}} is missing")]
    MissingSlot {
        kind: TemplateKind,
        slot: &'static str,
    },
    #[error("template `{kind}`: slot {{{slot}}} appears {count} times")]
    DuplicateSlot {
        kind: TemplateKind,
        slot: &'static str,
        count: usize,
    },
    #[error("template `{kind}`: {reason}")]
    Malformed { kind: TemplateKind, reason: String },
    #[error("template `{0}` cannot be used for SQL generation")]
    NotGeneration(TemplateKind),
    #[error("no SQL statement found in reply")]
    NoSqlFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Cot,
    Got,
    LinkTable,
    LinkColumn,
    FilterScore,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Cot,
        TemplateKind::Got,
        TemplateKind::LinkTable,
        TemplateKind::LinkColumn,
        TemplateKind::FilterScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Cot => "cot",
            TemplateKind::Got => "got",
            TemplateKind::LinkTable => "link_table",
            TemplateKind::LinkColumn => "link_column",
            TemplateKind::FilterScore => "filter_score",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tmpl", self.as_str())
    }

    pub fn is_generation(self) -> bool {
        matches!(self, TemplateKind::Cot | TemplateKind::Got)
    }

    fn required_slots(self) -> &'static [&'static str] {
        if self.is_generation() {
            &["schema", "question", "examples"]
        } else {
            &["schema", "question"]
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const SLOTS: [&str; 5] = ["instruction", "exemplars", "schema", "examples", "question"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub instruction: String,
    pub exemplars: Vec<String>,
    pub body: String,
}

/// Values substituted into a template body.
#[derive(Debug, Clone, Default)]
pub struct SlotValues<'a> {
    pub schema: &'a str,
    pub question: &'a str,
    pub examples: &'a str,
    /// Replaces the template's own exemplars when set.
    pub exemplars: Option<&'a [String]>,
}

fn count_marker(body: &str, slot: &str) -> usize {
    body.matches(&format!("{{{slot}}}")).count()
}

impl PromptTemplate {
    pub fn parse(kind: TemplateKind, text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            if let Some(header) = line.strip_prefix("### ") {
                sections.push((header.trim().to_ascii_lowercase(), String::new()));
            } else if let Some((_, content)) = sections.last_mut() {
                content.push_str(line);
                content.push('\n');
            } else if !line.trim().is_empty() {
                return Err(PromptError::Malformed {
                    kind,
                    reason: "text before the first section header".into(),
                });
            }
        }
        let mut instruction = String::new();
        let mut exemplars = Vec::new();
        let mut body = None;
        for (name, content) in sections {
            let content = content.trim_matches('\n').to_string();
            match name.as_str() {
                "instruction" => instruction = content,
                "exemplar" => exemplars.push(content),
                "template" => body = Some(content),
                other => {
                    return Err(PromptError::Malformed {
                        kind,
                        reason: format!("unknown section `{other}`"),
                    })
                }
            }
        }
        let template = Self {
            kind,
            instruction,
            exemplars,
            body: body.ok_or(PromptError::Malformed {
                kind,
                reason: "no `### template` section".into(),
            })?,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let kind = self.kind;
        for slot in SLOTS {
            let count = count_marker(&self.body, slot);
            if count > 1 {
                return Err(PromptError::DuplicateSlot { kind, slot, count });
            }
            let required = kind.required_slots().contains(&slot)
                || (slot == "instruction" && !self.instruction.is_empty())
                || (slot == "exemplars" && !self.exemplars.is_empty());
            if required && count == 0 {
                return Err(PromptError::MissingSlot { kind, slot });
            }
        }
        for (i, ex) in self.exemplars.iter().enumerate() {
            if let Some(missing) = exemplar_defect(kind, ex) {
                return Err(PromptError::Malformed {
                    kind,
                    reason: format!("exemplar {} lacks {missing}", i + 1),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &SlotValues<'_>) -> String {
        let exemplars = values.exemplars.unwrap_or(&self.exemplars).join("\n\n");
        let lookup = |name: &str| -> Option<&str> {
            match name {
                "instruction" => Some(self.instruction.as_str()),
                "exemplars" => Some(exemplars.as_str()),
                "schema" => Some(values.schema),
                "examples" => Some(values.examples),
                "question" => Some(values.question),
                _ => None,
            }
        };
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let replaced = after
                .find('}')
                .and_then(|close| lookup(&after[..close]).map(|value| (value, close)));
            match replaced {
                Some((value, close)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Names the first structural element an exemplar lacks, if any.
fn exemplar_defect(kind: TemplateKind, exemplar: &str) -> Option<&'static str> {
    let has_line = |pred: &dyn Fn(&str) -> bool| exemplar.lines().any(|l| pred(l.trim()));
    match kind {
        TemplateKind::Cot | TemplateKind::Got => {
            if !exemplar.contains("Question:") {
                return Some("a `Question:` line");
            }
            if !exemplar.contains("SQL:") {
                return Some("a final `SQL:` line");
            }
            if kind == TemplateKind::Cot {
                if !has_line(&|l| l.starts_with("1.")) {
                    return Some("a numbered reasoning step list");
                }
            } else {
                let node = |l: &str| {
                    l.strip_prefix('N')
                        .and_then(|r| r.split_once(':'))
                        .is_some_and(|(n, _)| {
                            !n.is_empty() && n.chars().all(|c| c.is_ascii_digit())
                        })
                };
                if !has_line(&node) {
                    return Some("numbered reasoning nodes (`N1: ...`)");
                }
                if !exemplar.contains("->") && !exemplar.contains('→') {
                    return Some("reasoning-graph edges (`-> N2`)");
                }
            }
            None
        }
        _ => None,
    }
}

/// One template per kind.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

impl TemplateSet {
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.is_file() {
                return Err(PromptError::MissingKind(kind.file_name()));
            }
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            templates.insert(kind, PromptTemplate::parse(kind, &text)?);
        }
        Ok(Self { templates })
    }

    /// Templates compiled into the binary (identical to `templates/` in the
    /// core crate).
    pub fn builtin() -> Self {
        let sources = [
            (TemplateKind::Cot, include_str!("../templates/cot.tmpl")),
            (TemplateKind::Got, include_str!("../templates/got.tmpl")),
            (
                TemplateKind::LinkTable,
                include_str!("../templates/link_table.tmpl"),
            ),
            (
                TemplateKind::LinkColumn,
                include_str!("../templates/link_column.tmpl"),
            ),
            (
                TemplateKind::FilterScore,
                include_str!("../templates/filter_score.tmpl"),
            ),
        ];
        let templates = sources
            .into_iter()
            .map(|(k, text)| (k, PromptTemplate::parse(k, text).expect("builtin template")))
            .collect();
        Self { templates }
    }

    /// Keeps at most `n` exemplars per template.
    pub fn with_exemplar_limit(mut self, n: usize) -> Self {
        for t in self.templates.values_mut() {
            t.exemplars.truncate(n);
        }
        self
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub schema_text: String,
    pub question: String,
    pub examples_text: String,
    pub template_kind: TemplateKind,
    pub rendered: String,
}

/// Builds the generation prompt from instruction, linked schema, question and
/// retrieved examples.
pub fn assemble(
    template: &PromptTemplate,
    linked: &LinkedSchema,
    question: &str,
    examples: &[&ExamplePair],
    style: SerializationStyle,
) -> Result<PromptBundle, PromptError> {
    if !template.kind.is_generation() {
        return Err(PromptError::NotGeneration(template.kind));
    }
    let schema_text = linked.projected().serialize(style);
    let examples_text = format_examples(examples, template.kind);
    let rendered = template.render(&SlotValues {
        schema: &schema_text,
        question,
        examples: &examples_text,
        exemplars: None,
    });
    Ok(PromptBundle {
        instruction: template.instruction.clone(),
        schema_text,
        question: question.to_string(),
        examples_text,
        template_kind: template.kind,
        rendered,
    })
}

/// Isolates one SQL statement from a model reply.
///
/// Priority: the first fenced code block (labelled `sql` or unlabelled) that
/// holds a statement, then the first bare `SELECT`/`WITH` statement in the
/// text. The statement ends at the first terminator outside literals.
pub fn extract_sql(reply: &str) -> Result<String, PromptError> {
    for block in fenced_blocks(reply) {
        if let Some(sql) = locate_statement(block) {
            return Ok(sql);
        }
    }
    // Prose fallback; never run into a fence.
    let prose = match reply.find("```") {
        Some(i) => &reply[..i],
        None => reply,
    };
    locate_statement(prose).ok_or(PromptError::NoSqlFound)
}

fn fenced_blocks(reply: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = reply;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else {
            break;
        };
        let inner = &after[..close];
        let (label, content) = match inner.find('\n') {
            Some(nl) => (inner[..nl].trim(), &inner[nl + 1..]),
            None => ("", inner),
        };
        if label.is_empty()
            || label.eq_ignore_ascii_case("sql")
            || label.eq_ignore_ascii_case("sqlite")
        {
            blocks.push(content);
        } else if !label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            // Single-line fence such as ```SELECT 1```.
            blocks.push(inner);
        }
        rest = &after[close + 3..];
    }
    blocks
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn starts_keyword(text: &str, at: usize, kw: &str) -> bool {
    let bytes = text.as_bytes();
    let end = at + kw.len();
    end <= text.len()
        && text.is_char_boundary(end)
        && text[at..end].eq_ignore_ascii_case(kw)
        && (at == 0 || !is_word_byte(bytes[at - 1]))
        && bytes.get(end).is_none_or(|b| !is_word_byte(*b))
}

/// `WITH name [(cols)] AS (` distinguishes a CTE from the English word.
fn looks_like_cte(text: &str) -> bool {
    static CTE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    CTE.get_or_init(|| {
        regex::Regex::new(r#"(?is)^with\s+(recursive\s+)?[\w"`\[\]]+\s*(\([^)]*\)\s*)?as\s*\("#)
            .expect("cte regex")
    })
    .is_match(text)
}

fn locate_statement(text: &str) -> Option<String> {
    let start = text.char_indices().map(|(i, _)| i).find(|&i| {
        starts_keyword(text, i, "select")
            || (starts_keyword(text, i, "with") && looks_like_cte(&text[i..]))
    })?;
    let stmt = &text[start..];
    let stmt = match sql_scan::first_terminator(stmt) {
        Some(end) => &stmt[..end],
        None => stmt,
    };
    let sql = stmt.trim().trim_end_matches(';').trim_end();
    (!sql.is_empty()).then(|| sql.to_string())
}
