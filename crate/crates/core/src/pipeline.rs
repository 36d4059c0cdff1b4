//! End-to-end question answering: filter, retrieve, link, grade, assemble,
//! generate, extract. Every question yields a record holding all stage
//! artifacts or a stage-tagged failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::difficulty_router::{self, DifficultyGrade};
use crate::example_store::{Composition, ExampleError, ExampleStore};
use crate::llm_backend::{Backend, CallContext, Embedder, RecordingBackend, Stage, Transcript};
use crate::prompt_engine::{self, PromptBundle, PromptError, TemplateKind, TemplateSet};
use crate::schema_catalog::{self, CatalogError, DatabaseSchema, SerializationStyle};
use crate::schema_filter::{self, FilterScorerKind, LexicalScorer, LlmScorer};
use crate::schema_linker::{self, LinkedSchema};
use crate::sql_exec_eval::{self, EvalCase, EvalError, EvalReport, PredictionRecord};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Examples(#[from] ExampleError),
    #[error(transparent)]
    Templates(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("duplicate db_id `{0}` in catalog")]
    DuplicateDb(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed questions file {path}: {reason}")]
    Questions { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub question: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered: Option<DatabaseSchema>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linked: Option<LinkedSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<DifficultyGrade>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
}

impl QuestionRecord {
    fn new(question_id: &str, question: &str, db_id: &str) -> Self {
        Self {
            question_id: question_id.into(),
            question: question.into(),
            db_id: db_id.into(),
            filtered: None,
            retrieved: Vec::new(),
            linked: None,
            grade: None,
            prompt: None,
            raw_reply: None,
            sql: None,
            failure: None,
        }
    }

    fn fail(mut self, stage: Stage, err: impl std::fmt::Display) -> Self {
        self.failure = Some(StageFailure {
            stage,
            message: err.to_string(),
        });
        self
    }
}

/// How far a question is taken through the stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAfter {
    Linking,
    Extraction,
}

/// One benchmark question with its gold SQL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchItem {
    pub question_id: String,
    pub question: String,
    pub db_id: String,
    pub gold_sql: String,
}

#[derive(Deserialize)]
struct RawQuestion {
    #[serde(default)]
    question_id: Option<String>,
    question: String,
    db_id: String,
    query: String,
}

pub fn default_question_id(index: usize) -> String {
    format!("q{index:04}")
}

/// Reads a questions file (JSON array of `{question, db_id, query}`).
/// Records without a `question_id` are numbered by position.
pub fn load_questions(path: &Path) -> Result<Vec<BenchItem>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let raw: Vec<RawQuestion> =
        serde_json::from_str(&text).map_err(|e| PipelineError::Questions {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let items: Vec<BenchItem> = raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| BenchItem {
            question_id: r.question_id.unwrap_or_else(|| default_question_id(i)),
            question: r.question,
            db_id: r.db_id,
            gold_sql: r.query,
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = items.iter().find(|i| !seen.insert(i.question_id.as_str())) {
        return Err(PipelineError::Questions {
            path: path.display().to_string(),
            reason: format!("duplicate question_id `{}`", dup.question_id),
        });
    }
    Ok(items)
}

pub struct Pipeline {
    config: PipelineConfig,
    catalog: BTreeMap<String, DatabaseSchema>,
    store: ExampleStore,
    templates: TemplateSet,
    backend: Arc<dyn Backend>,
}

impl Pipeline {
    /// Loads catalog, examples and templates named by the config.
    pub fn load(config: PipelineConfig, backend: Arc<dyn Backend>) -> Result<Self, PipelineError> {
        let catalog = schema_catalog::load_benchmark_catalog(&config.catalog)?;
        let store = ExampleStore::load(&config.examples)?;
        let templates = match &config.templates {
            Some(dir) => TemplateSet::load(dir)?,
            None => TemplateSet::builtin(),
        };
        Self::from_parts(config, catalog, store, templates, backend)
    }

    pub fn from_parts(
        config: PipelineConfig,
        catalog: Vec<DatabaseSchema>,
        store: ExampleStore,
        templates: TemplateSet,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        let mut by_id = BTreeMap::new();
        for schema in catalog {
            if let Some(dup) = by_id.insert(schema.db_id.clone(), schema) {
                return Err(PipelineError::DuplicateDb(dup.db_id));
            }
        }
        let store = store.with_composition(config.retrieval.compose);
        let templates = templates.with_exemplar_limit(config.exemplars);
        Ok(Self {
            config,
            catalog: by_id,
            store,
            templates,
            backend,
        })
    }

    /// Enables the embedding retrieval scorer.
    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Result<Self, PipelineError> {
        self.store = self
            .store
            .with_embeddings(embedder, self.config.retrieval.compose)?;
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn schema(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.catalog.get(db_id)
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn run_question(
        &self,
        question_id: &str,
        question: &str,
        db_id: &str,
        stop: StopAfter,
    ) -> QuestionRecord {
        let mut rec = QuestionRecord::new(question_id, question, db_id);
        let cfg = &self.config;
        let backend = self.backend.as_ref();

        let Some(schema) = self.catalog.get(db_id) else {
            return rec.fail(Stage::Catalog, format!("unknown db_id `{db_id}`"));
        };

        let filtered = match cfg.filter.scorer {
            FilterScorerKind::Lexical => {
                schema_filter::filter_schema(schema, question, &cfg.filter, &LexicalScorer)
            }
            FilterScorerKind::Llm => {
                let scorer = LlmScorer {
                    backend,
                    template: self.templates.get(TemplateKind::FilterScore),
                    question_id,
                };
                schema_filter::filter_schema(schema, question, &cfg.filter, &scorer)
            }
        };
        let filtered = match filtered {
            Ok(f) => f,
            Err(e) => return rec.fail(Stage::Filter, e),
        };
        rec.filtered = Some(filtered.clone());

        let query_text = match cfg.retrieval.compose {
            Composition::QuestionOnly => question.to_string(),
            Composition::QuestionWithSchema => {
                format!(
                    "{question} {}",
                    filtered.serialize(SerializationStyle::CompactList)
                )
            }
        };
        let retrieved = match self.store.retrieve_top_k(&query_text, &cfg.retrieval) {
            Ok(r) => r,
            Err(e) => return rec.fail(Stage::Retrieval, e),
        };
        rec.retrieved = retrieved.iter().map(|r| r.pair.id.clone()).collect();

        let linked = match schema_linker::link_schema(
            &filtered,
            question,
            &cfg.linking,
            self.templates.get(TemplateKind::LinkTable),
            self.templates.get(TemplateKind::LinkColumn),
            backend,
            question_id,
        ) {
            Ok(l) => l,
            Err(e) => return rec.fail(Stage::Linking, e),
        };
        rec.linked = Some(linked.clone());
        if stop == StopAfter::Linking {
            return rec;
        }

        let grade = difficulty_router::grade(&linked, question, &cfg.router);
        let kind = difficulty_router::select_template(&grade);
        rec.grade = Some(grade);

        let examples: Vec<_> = retrieved.iter().map(|r| r.pair).collect();
        let bundle = match prompt_engine::assemble(
            self.templates.get(kind),
            &linked,
            question,
            &examples,
            cfg.schema_style,
        ) {
            Ok(b) => b,
            Err(e) => return rec.fail(Stage::Prompt, e),
        };
        let reply = backend.complete(
            &CallContext::new(question_id, Stage::Generation),
            &bundle.rendered,
        );
        rec.prompt = Some(bundle);
        let reply = match reply {
            Ok(r) => r.text,
            Err(e) => return rec.fail(Stage::Generation, e),
        };
        rec.raw_reply = Some(reply.clone());

        match prompt_engine::extract_sql(&reply) {
            Ok(sql) => {
                rec.sql = Some(sql);
                rec
            }
            Err(e) => rec.fail(Stage::Extraction, e),
        }
    }

    /// Runs every item through the full pipeline on a bounded worker pool.
    /// Output order follows input order.
    pub fn run_many(&self, items: &[BenchItem]) -> Vec<QuestionRecord> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers.max(1))
            .build()
            .expect("worker pool");
        pool.install(|| {
            items
                .par_iter()
                .map(|it| {
                    self.run_question(
                        &it.question_id,
                        &it.question,
                        &it.db_id,
                        StopAfter::Extraction,
                    )
                })
                .collect()
        })
    }
}

pub fn predictions_from(records: &[QuestionRecord]) -> Vec<PredictionRecord> {
    records
        .iter()
        .map(|r| PredictionRecord {
            question_id: r.question_id.clone(),
            db_id: r.db_id.clone(),
            predicted_sql: r.sql.clone().unwrap_or_default(),
        })
        .collect()
}

/// Pairs predictions with gold SQL by question id. Every prediction needs a
/// gold record.
pub fn eval_cases(
    predictions: &[PredictionRecord],
    gold: &[BenchItem],
) -> Result<Vec<EvalCase>, PipelineError> {
    let by_id: BTreeMap<&str, &BenchItem> =
        gold.iter().map(|g| (g.question_id.as_str(), g)).collect();
    predictions
        .iter()
        .map(|p| {
            let g = by_id
                .get(p.question_id.as_str())
                .ok_or_else(|| PipelineError::Questions {
                    path: "<gold>".into(),
                    reason: format!("no gold record for `{}`", p.question_id),
                })?;
            Ok(EvalCase {
                question_id: p.question_id.clone(),
                db_id: p.db_id.clone(),
                predicted_sql: p.predicted_sql.clone(),
                gold_sql: g.gold_sql.clone(),
            })
        })
        .collect()
}

/// Files written for one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(runs_dir: &Path, run_id: &str) -> Result<Self, PipelineError> {
        let root = runs_dir.join(run_id);
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }
    pub fn transcript(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    fn write_with(
        &self,
        path: &Path,
        f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<(), PipelineError> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn write_records(&self, records: &[QuestionRecord]) -> Result<(), PipelineError> {
        self.write_with(&self.records(), |w| {
            for r in records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }

    pub fn write_predictions(&self, preds: &[PredictionRecord]) -> Result<(), PipelineError> {
        self.write_with(&self.predictions(), |w| {
            sql_exec_eval::write_predictions(preds, w)
        })
    }

    pub fn write_transcript(&self, transcript: &Transcript) -> Result<(), PipelineError> {
        self.write_with(&self.transcript(), |w| transcript.write_jsonl(w))
    }

    pub fn write_report(
        &self,
        report: &EvalReport,
        method: &str,
        llm: &str,
    ) -> Result<(), PipelineError> {
        self.write_with(&self.report_json(), |w| {
            w.write_all(report.to_json_pretty().as_bytes())?;
            w.write_all(b"\n")
        })?;
        self.write_with(&self.report_txt(), |w| {
            w.write_all(report.render_table(method, llm).as_bytes())
        })
    }
}

/// Output of a benchmark run.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub records: Vec<QuestionRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub report: EvalReport,
    pub run_dir: RunDir,
}

/// Answers every item, evaluates the predictions and writes the run
/// directory (`predictions.jsonl`, `records.jsonl`, `transcript.jsonl`,
/// `report.json`, `report.txt`).
pub fn run_bench(
    pipeline: &Pipeline,
    recorder: &RecordingBackend,
    items: &[BenchItem],
    run_id: &str,
) -> Result<BenchOutcome, PipelineError> {
    let cfg = pipeline.config();
    let records = pipeline.run_many(items);
    let predictions = predictions_from(&records);
    let cases = eval_cases(&predictions, items)?;
    let report = sql_exec_eval::evaluate(
        &cases,
        &cfg.db_root,
        cfg.suite_root.as_deref(),
        &cfg.eval,
        cfg.workers,
    )?;

    let run_dir = RunDir::create(&cfg.runs_dir, run_id)?;
    let order: Vec<String> = items.iter().map(|i| i.question_id.clone()).collect();
    run_dir.write_predictions(&predictions)?;
    run_dir.write_records(&records)?;
    run_dir.write_transcript(&recorder.transcript_ordered(&order))?;
    run_dir.write_report(&report, &cfg.method_label, &cfg.backend.model_name)?;
    Ok(BenchOutcome {
        records,
        predictions,
        report,
        run_dir,
    })
}

/// Generated run identifier based on the current time.
pub fn new_run_id() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    format!("run-{}-{:03}", now.as_secs(), now.subsec_millis())
}
