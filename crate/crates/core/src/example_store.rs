//! Library of NL/SQL example pairs with top-k retrieval.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::llm_backend::{BackendError, Embedder};
use crate::prompt_engine::TemplateKind;

#[derive(Debug, thiserror::Error)]
pub enum ExampleError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed examples file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub id: String,
    pub db_id: String,
    pub question: String,
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_digest: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScorer {
    #[default]
    Lexical,
    BackendEmbedding,
}

/// Which text of a stored pair is compared with the incoming question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    #[default]
    QuestionOnly,
    QuestionWithSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub scorer: RetrievalScorer,
    pub compose: Composition,
    /// Drop pairs whose normalized question equals the query.
    pub exclude_identical: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            scorer: RetrievalScorer::Lexical,
            compose: Composition::QuestionOnly,
            exclude_identical: true,
        }
    }
}

/// Lowercased alphanumeric tokens; every other character separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Jaccard similarity of the two texts' token sets.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    jaccard(&token_set(a), &token_set(b))
}

#[derive(Debug, Deserialize)]
struct RawExample {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    db_id: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    query: Option<String>,
    #[serde(default)]
    schema_digest: Option<String>,
}

struct Indexed {
    pair: ExamplePair,
    normalized: String,
    tokens: BTreeSet<String>,
    embedding: Option<Vec<f32>>,
}

/// Immutable after construction; safe to share between threads.
pub struct ExampleStore {
    items: Vec<Indexed>,
    embedder: Option<Arc<dyn Embedder>>,
}

impl std::fmt::Debug for ExampleStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExampleStore")
            .field("len", &self.items.len())
            .field("embeddings", &self.embedder.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved<'a> {
    pub pair: &'a ExamplePair,
    pub score: f64,
}

impl ExampleStore {
    pub fn new(pairs: Vec<ExamplePair>) -> Result<Self, ExampleError> {
        let mut seen = HashSet::new();
        let mut items = Vec::with_capacity(pairs.len());
        for (index, pair) in pairs.into_iter().enumerate() {
            if pair.question.trim().is_empty() || pair.gold_sql.trim().is_empty() {
                return Err(ExampleError::MalformedRecord {
                    index,
                    reason: "empty question or SQL".into(),
                });
            }
            if !seen.insert(pair.id.clone()) {
                return Err(ExampleError::DuplicateId(pair.id));
            }
            items.push(Indexed {
                normalized: normalize(&pair.question),
                tokens: BTreeSet::new(),
                embedding: None,
                pair,
            });
        }
        let mut store = Self {
            items,
            embedder: None,
        };
        store.reindex(Composition::QuestionOnly);
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, ExampleError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExampleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ExampleError> {
        let raw: Vec<RawExample> = serde_json::from_str(text)?;
        let mut ordinals: HashMap<String, usize> = HashMap::new();
        let mut pairs = Vec::with_capacity(raw.len());
        for (index, r) in raw.into_iter().enumerate() {
            let missing = |field: &str| ExampleError::MalformedRecord {
                index,
                reason: format!("missing or empty `{field}`"),
            };
            let question = r
                .question
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| missing("question"))?;
            let gold_sql = r
                .query
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| missing("query"))?;
            let db_id = r.db_id.unwrap_or_default();
            let ordinal = ordinals.entry(db_id.clone()).or_insert(0);
            let id = r.id.unwrap_or_else(|| format!("{db_id}#{ordinal}"));
            *ordinal += 1;
            pairs.push(ExamplePair {
                id,
                db_id,
                question,
                gold_sql,
                schema_digest: r.schema_digest,
            });
        }
        Self::new(pairs)
    }

    fn compose(pair: &ExamplePair, compose: Composition) -> String {
        match (compose, &pair.schema_digest) {
            (Composition::QuestionWithSchema, Some(d)) => format!("{} {d}", pair.question),
            _ => pair.question.clone(),
        }
    }

    fn reindex(&mut self, compose: Composition) {
        for item in &mut self.items {
            item.tokens = token_set(&Self::compose(&item.pair, compose));
        }
    }

    /// Rebuilds the lexical index over the chosen text composition.
    pub fn with_composition(mut self, compose: Composition) -> Self {
        self.reindex(compose);
        self
    }

    /// Embeds every stored pair up front for the embedding scorer.
    pub fn with_embeddings(
        mut self,
        embedder: Arc<dyn Embedder>,
        compose: Composition,
    ) -> Result<Self, ExampleError> {
        for item in &mut self.items {
            item.embedding = Some(embedder.embed(&Self::compose(&item.pair, compose))?);
        }
        self.embedder = Some(embedder);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &ExamplePair> {
        self.items.iter().map(|i| &i.pair)
    }

    /// The `k` best pairs for `question`, by descending score then ascending id.
    pub fn retrieve_top_k(
        &self,
        question: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<Retrieved<'_>>, ExampleError> {
        let normalized = normalize(question);
        let eligible = self
            .items
            .iter()
            .filter(|i| !(cfg.exclude_identical && i.normalized == normalized));

        let mut scored: Vec<Retrieved<'_>> = match cfg.scorer {
            RetrievalScorer::Lexical => {
                let q = token_set(question);
                eligible
                    .map(|i| Retrieved {
                        pair: &i.pair,
                        score: jaccard(&q, &i.tokens),
                    })
                    .collect()
            }
            RetrievalScorer::BackendEmbedding => {
                let embedder = self.embedder.as_ref().ok_or_else(|| {
                    ExampleError::Embedding(BackendError::MalformedResponse(
                        "store was built without embeddings".into(),
                    ))
                })?;
                let q = embedder.embed(question)?;
                eligible
                    .map(|i| Retrieved {
                        pair: &i.pair,
                        score: cosine(&q, i.embedding.as_deref().unwrap_or(&[])),
                    })
                    .collect()
            }
        };
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.pair.id.cmp(&b.pair.id))
        });
        scored.truncate(cfg.k);
        Ok(scored)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Renders retrieved pairs as few-shot context for the given template.
pub fn format_examples(pairs: &[&ExamplePair], kind: TemplateKind) -> String {
    let answer_label = match kind {
        TemplateKind::Got => "Final SQL",
        _ => "SQL",
    };
    let mut out = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "Example {}:", i + 1);
        if let Some(digest) = &pair.schema_digest {
            let _ = writeln!(out, "Schema:\n{digest}");
        }
        let _ = writeln!(out, "Question: {}", pair.question);
        let _ = write!(out, "{answer_label}: {}", pair.gold_sql);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, q: &str) -> ExamplePair {
        ExamplePair {
            id: id.into(),
            db_id: "d".into(),
            question: q.into(),
            gold_sql: "SELECT 1".into(),
            schema_digest: None,
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            lexical_similarity("list all singers", "list all singers"),
            1.0
        );
        assert_eq!(lexical_similarity("cats", "dogs"), 0.0);
        // {how, many, singers} vs {how, many, concerts, are, there}: 2 shared of 6.
        assert!(
            (lexical_similarity("how many singers", "how many concerts are there") - 1.0 / 3.0)
                .abs()
                < 1e-12
        );
        assert_eq!(
            lexical_similarity("List, all SINGERS!", "list all singers"),
            1.0
        );
    }

    #[test]
    fn load_assigns_ids_and_rejects_empty_query() {
        let store = ExampleStore::parse(
            r#"[{"db_id":"a","question":"q1","query":"SELECT 1"},
                {"db_id":"a","question":"q2","query":"SELECT 2"},
                {"db_id":"b","question":"q3","query":"SELECT 3"}]"#,
        )
        .unwrap();
        let ids: Vec<&str> = store.pairs().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a#0", "a#1", "b#0"]);
        assert!(ExampleStore::parse("[]").unwrap().is_empty());
        assert!(matches!(
            ExampleStore::parse(r#"[{"db_id":"a","question":"q","query":""}]"#),
            Err(ExampleError::MalformedRecord { index: 0, .. })
        ));
        assert!(matches!(
            ExampleStore::load(Path::new("/nope.json")),
            Err(ExampleError::Io { .. })
        ));
    }

    #[test]
    fn retrieval_small_stores() {
        let cfg = RetrievalConfig::default();
        let empty = ExampleStore::new(vec![]).unwrap();
        assert!(empty.retrieve_top_k("anything", &cfg).unwrap().is_empty());

        let store = ExampleStore::new(vec![
            pair("b", "how many pets"),
            pair("a", "list all singers"),
        ])
        .unwrap();
        let got = store.retrieve_top_k("list singers", &cfg).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].pair.id, "a");
        assert!(got[0].score >= got[1].score);
    }

    #[test]
    fn ties_break_by_id_and_self_leak_excluded() {
        let store = ExampleStore::new(vec![
            pair("z", "count pets"),
            pair("m", "count pets please"),
            pair("y", "Count pets?"),
            pair("x", "count owners please"),
        ])
        .unwrap();
        let cfg = RetrievalConfig {
            k: 3,
            ..Default::default()
        };
        let ids: Vec<&str> = store
            .retrieve_top_k("count pets", &cfg)
            .unwrap()
            .iter()
            .map(|r| r.pair.id.as_str())
            .collect();
        assert_eq!(ids, ["m", "x"]);
        let cfg = RetrievalConfig {
            exclude_identical: false,
            ..cfg
        };
        let ids: Vec<&str> = store
            .retrieve_top_k("count pets", &cfg)
            .unwrap()
            .iter()
            .map(|r| r.pair.id.as_str())
            .collect();
        assert_eq!(ids, ["y", "z", "m"]);
    }

    #[test]
    fn format_examples_contract() {
        assert_eq!(format_examples(&[], TemplateKind::Cot), "");
        let p = pair("a", "How many pets?");
        let text = format_examples(&[&p], TemplateKind::Cot);
        assert!(text.contains("How many pets?"));
        assert!(text.contains("SELECT 1"));
        assert_eq!(text, format_examples(&[&p], TemplateKind::Cot));
    }

    struct LenEmbedder;
    impl Embedder for LenEmbedder {
        fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
            let t = token_set(text);
            Ok(vec![
                t.contains("pets") as u8 as f32,
                t.contains("singers") as u8 as f32,
                0.1,
            ])
        }
    }

    #[test]
    fn embedding_scorer() {
        let store = ExampleStore::new(vec![pair("a", "how many singers"), pair("b", "show pets")])
            .unwrap()
            .with_embeddings(Arc::new(LenEmbedder), Composition::QuestionOnly)
            .unwrap();
        let cfg = RetrievalConfig {
            k: 1,
            scorer: RetrievalScorer::BackendEmbedding,
            ..Default::default()
        };
        assert_eq!(
            store.retrieve_top_k("list pets", &cfg).unwrap()[0].pair.id,
            "b"
        );
    }
}
