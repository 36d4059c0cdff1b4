//! The `apsql` command line: `ask`, `bench`, `link`, `eval`, `validate`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{self, Diagnostic, PipelineConfig, Severity};
use crate::example_store::{ExampleStore, RetrievalScorer};
use crate::llm_backend::{
    Backend, BackendError, CallContext, HttpBackend, RecordingBackend, ReplayBackend, Stage,
    Transcript,
};
use crate::pipeline::{self, Pipeline, QuestionRecord, RunDir, StopAfter};
use crate::prompt_engine::{PromptTemplate, TemplateKind};
use crate::schema_catalog;
use crate::sql_exec_eval;

const DEFAULT_CONFIG: &str = "apsql.toml";

#[derive(Debug, Parser)]
#[command(
    name = "apsql",
    version,
    about = "Text-to-SQL pipeline and execution-based evaluator"
)]
pub struct Cli {
    /// Config file (TOML). Defaults to ./apsql.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the table-linking threshold.
    #[arg(long, global = true)]
    pub threshold: Option<u8>,
    /// Override the number of retrieved examples.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Override the backend model name.
    #[arg(long = "backend-model", global = true)]
    pub backend_model: Option<String>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Answer model calls from a recorded transcript instead of a live backend.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question and print the SQL.
    Ask {
        question: String,
        #[arg(long)]
        db: String,
        /// Also run the SQL and print the result table.
        #[arg(long)]
        execute: bool,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Answer a questions file, evaluate, and write a run directory.
    Bench {
        questions: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Stop after schema linking and show the decisions.
    Link {
        question: String,
        #[arg(long)]
        db: String,
        /// Include raw model replies.
        #[arg(long)]
        verbose: bool,
    },
    /// Score a predictions file against gold SQL. Makes no model calls.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        db_root: Option<PathBuf>,
        #[arg(long)]
        suite_root: Option<PathBuf>,
        /// Write report.json and report.txt into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the configuration and list findings.
    Validate {
        /// Send one request to the configured backend.
        #[arg(long)]
        ping: bool,
    },
}

#[derive(Debug)]
pub struct Failure(pub String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

pub type CmdResult = Result<i32, Failure>;

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Validate { ping } => cmd_validate(&cli, *ping),
        Command::Eval {
            predictions,
            gold,
            db_root,
            suite_root,
            out,
        } => {
            let cfg = load_config(&cli)?;
            cmd_eval(
                &cfg,
                predictions,
                gold,
                db_root.as_deref(),
                suite_root.as_deref(),
                out.as_deref(),
            )
        }
        Command::Ask {
            question,
            db,
            execute,
            run_id,
        } => {
            let cfg = load_config(&cli)?;
            cmd_ask(
                &cfg,
                cli.replay.as_deref(),
                question,
                db,
                *execute,
                run_id.as_deref(),
            )
        }
        Command::Bench { questions, run_id } => {
            let cfg = load_config(&cli)?;
            cmd_bench(&cfg, cli.replay.as_deref(), questions, run_id.as_deref())
        }
        Command::Link {
            question,
            db,
            verbose,
        } => {
            let cfg = load_config(&cli)?;
            cmd_link(&cfg, cli.replay.as_deref(), question, db, *verbose)
        }
    }
}

fn config_path(cli: &Cli) -> Option<PathBuf> {
    cli.config.clone().or_else(|| {
        let p = PathBuf::from(DEFAULT_CONFIG);
        p.is_file().then_some(p)
    })
}

fn apply_overrides(cfg: &mut PipelineConfig, cli: &Cli) {
    if let Some(t) = cli.threshold {
        cfg.linking.threshold = t;
    }
    if let Some(k) = cli.k {
        cfg.retrieval.k = k;
    }
    if let Some(m) = &cli.backend_model {
        cfg.backend.model_name = m.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match config_path(cli) {
        Some(p) => PipelineConfig::load(&p)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(&mut cfg, cli);
    if cfg.workers == 0 {
        return Err(Failure("workers must be at least 1".into()));
    }
    cfg.linking.validate()?;
    Ok(cfg)
}

/// Replay, then script, then the live HTTP backend.
fn base_backend(cfg: &PipelineConfig, replay: Option<&Path>) -> Result<Arc<dyn Backend>, Failure> {
    if let Some(path) = replay {
        let transcript = Transcript::load(path)
            .map_err(|e| Failure(format!("cannot read {}: {e}", path.display())))?;
        return Ok(Arc::new(ReplayBackend::new(&transcript)));
    }
    if let Some(path) = &cfg.script {
        return Ok(Arc::new(config::load_script(path)?));
    }
    Ok(Arc::new(HttpBackend::new(cfg.backend.clone())?))
}

pub fn build_pipeline(
    cfg: &PipelineConfig,
    replay: Option<&Path>,
) -> Result<(Pipeline, Arc<RecordingBackend>), Failure> {
    let recorder = Arc::new(RecordingBackend::new(base_backend(cfg, replay)?));
    let pipeline = Pipeline::load(cfg.clone(), recorder.clone())?;
    let pipeline = if cfg.retrieval.scorer == RetrievalScorer::BackendEmbedding {
        if replay.is_some() || cfg.script.is_some() {
            return Err(Failure(
                "the embedding retrieval scorer needs a live backend".into(),
            ));
        }
        pipeline.with_embedder(Arc::new(HttpBackend::new(cfg.backend.clone())?))?
    } else {
        pipeline
    };
    Ok((pipeline, recorder))
}

fn persist(
    cfg: &PipelineConfig,
    run_id: &str,
    rec: &QuestionRecord,
    recorder: &RecordingBackend,
) -> Result<RunDir, Failure> {
    let dir = RunDir::create(&cfg.runs_dir, run_id)?;
    dir.write_records(std::slice::from_ref(rec))?;
    dir.write_transcript(&recorder.transcript())?;
    Ok(dir)
}

fn cmd_ask(
    cfg: &PipelineConfig,
    replay: Option<&Path>,
    question: &str,
    db: &str,
    execute: bool,
    run_id: Option<&str>,
) -> CmdResult {
    let (pipeline, recorder) = build_pipeline(cfg, replay)?;
    let rec = pipeline.run_question("q0000", question, db, StopAfter::Extraction);
    let run_id = run_id.map_or_else(pipeline::new_run_id, String::from);
    persist(cfg, &run_id, &rec, &recorder)?;
    if let Some(f) = &rec.failure {
        eprintln!("error: stage {f}");
        return Ok(1);
    }
    let sql = rec.sql.as_deref().unwrap_or_default();
    println!("{sql}");
    if execute {
        let path = sql_exec_eval::database_path(&cfg.db_root, db);
        match sql_exec_eval::execute_sql(&path, sql, &cfg.eval) {
            Ok(table) => println!("{}", table.render()),
            Err(e) => {
                eprintln!("error: stage {}: {e}", Stage::Execution);
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn cmd_bench(
    cfg: &PipelineConfig,
    replay: Option<&Path>,
    questions: &Path,
    run_id: Option<&str>,
) -> CmdResult {
    let items = pipeline::load_questions(questions)?;
    let (pipeline, recorder) = build_pipeline(cfg, replay)?;
    let run_id = run_id.map_or_else(pipeline::new_run_id, String::from);
    let outcome = pipeline::run_bench(&pipeline, &recorder, &items, &run_id)?;
    for rec in &outcome.records {
        if let Some(f) = &rec.failure {
            eprintln!("warning: {} failed at stage {f}", rec.question_id);
        }
    }
    print!(
        "{}",
        outcome
            .report
            .render_table(&cfg.method_label, &cfg.backend.model_name)
    );
    println!("run directory: {}", outcome.run_dir.root.display());
    Ok(0)
}

/// Human-readable linking decisions.
pub fn render_link(rec: &QuestionRecord, raw: &[(Stage, String)]) -> String {
    let mut out = String::new();
    let Some(linked) = &rec.linked else {
        return out;
    };
    let _ = writeln!(
        out,
        "table scores (linked when score > {}):",
        linked.threshold
    );
    for s in &linked.table_scores {
        let mark = match (linked.linked.contains_key(&s.table), linked.fallback) {
            (true, true) => "  linked (fallback: no table above threshold)",
            (true, false) => "  linked",
            (false, _) => "",
        };
        let _ = writeln!(out, "  {}: {}{mark}", s.table, s.score);
    }
    let _ = writeln!(out, "columns:");
    for (table, cols) in &linked.linked {
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        let note = if linked.unvoted.contains(table) {
            "  (no parsable vote, all columns kept)"
        } else {
            ""
        };
        let _ = writeln!(out, "  {table}: {}{note}", cols.join(", "));
    }
    if !raw.is_empty() {
        let _ = writeln!(out, "raw replies:");
        for (stage, reply) in raw {
            let _ = writeln!(out, "  [{stage}] {}", reply.replace('\n', "\n    "));
        }
    }
    out
}

fn cmd_link(
    cfg: &PipelineConfig,
    replay: Option<&Path>,
    question: &str,
    db: &str,
    verbose: bool,
) -> CmdResult {
    let (pipeline, recorder) = build_pipeline(cfg, replay)?;
    let rec = pipeline.run_question("q0000", question, db, StopAfter::Linking);
    if let Some(f) = &rec.failure {
        eprintln!("error: stage {f}");
        return Ok(1);
    }
    let raw: Vec<(Stage, String)> = if verbose {
        recorder
            .transcript()
            .entries
            .into_iter()
            .map(|e| (e.stage, e.reply))
            .collect()
    } else {
        Vec::new()
    };
    print!("{}", render_link(&rec, &raw));
    Ok(0)
}

fn cmd_eval(
    cfg: &PipelineConfig,
    predictions: &Path,
    gold: &Path,
    db_root: Option<&Path>,
    suite_root: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let preds = sql_exec_eval::read_predictions(predictions)?;
    let gold = pipeline::load_questions(gold)?;
    let cases = pipeline::eval_cases(&preds, &gold)?;
    let db_root = db_root.unwrap_or(&cfg.db_root);
    let suite_root = suite_root.or(cfg.suite_root.as_deref());
    let report = sql_exec_eval::evaluate(&cases, db_root, suite_root, &cfg.eval, cfg.workers)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let run = RunDir {
            root: dir.to_path_buf(),
        };
        run.write_report(&report, &cfg.method_label, &cfg.backend.model_name)?;
    }
    print!(
        "{}",
        report.render_table(&cfg.method_label, &cfg.backend.model_name)
    );
    Ok(0)
}

fn check_templates(dir: &Path, diags: &mut Vec<Diagnostic>) {
    for kind in TemplateKind::ALL {
        let path = dir.join(kind.file_name());
        if !path.is_file() {
            diags.push(Diagnostic::new(
                Severity::Error,
                format!("missing template {}", path.display()),
            ));
            continue;
        }
        match std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| PromptTemplate::parse(kind, &t).map_err(|e| e.to_string()))
        {
            Ok(_) => {}
            Err(e) => diags.push(Diagnostic::new(
                Severity::Error,
                format!("template {}: {e}", path.display()),
            )),
        }
    }
}

/// Every finding for a configuration. `ping` sends one live request.
pub fn validate_config(cfg: &PipelineConfig, replay: Option<&Path>, ping: bool) -> Vec<Diagnostic> {
    use Severity::*;
    let mut diags = Vec::new();
    let mut push = |s, m: String| diags.push(Diagnostic::new(s, m));

    match schema_catalog::load_benchmark_catalog(&cfg.catalog) {
        Ok(schemas) => {
            push(Info, format!("catalog: {} databases", schemas.len()));
            if cfg.db_root.is_dir() {
                for s in &schemas {
                    let p = sql_exec_eval::database_path(&cfg.db_root, &s.db_id);
                    if !p.is_file() {
                        push(Warning, format!("database file {} is missing", p.display()));
                    }
                }
            }
        }
        Err(e) => push(Error, format!("catalog {}: {e}", cfg.catalog.display())),
    }
    match ExampleStore::load(&cfg.examples) {
        Ok(store) => push(Info, format!("examples: {} pairs", store.len())),
        Err(e) => push(Error, format!("examples {}: {e}", cfg.examples.display())),
    }
    if !cfg.db_root.is_dir() {
        push(
            Error,
            format!("db_root {} is not a directory", cfg.db_root.display()),
        );
    }
    match &cfg.suite_root {
        Some(p) if !p.is_dir() => push(
            Error,
            format!("suite_root {} is not a directory", p.display()),
        ),
        Some(_) => {}
        None => push(Info, "no suite_root: TS will mirror EX".into()),
    }
    if cfg.workers == 0 {
        push(Error, "workers must be at least 1".into());
    }
    if let Err(e) = cfg.linking.validate() {
        push(Error, e.to_string());
    }
    if let Some(p) = &cfg.script {
        if let Err(e) = config::load_script(p) {
            push(Error, e.to_string());
        }
    }
    if let Some(p) = replay {
        if let Err(e) = Transcript::load(p) {
            push(Error, format!("replay transcript {}: {e}", p.display()));
        }
    }
    match &cfg.templates {
        Some(dir) => check_templates(dir, &mut diags),
        None => diags.push(Diagnostic::new(Info, "templates: built-in set")),
    }

    let live = replay.is_none() && cfg.script.is_none();
    if live {
        let key_var = cfg.backend.api_key_env.as_deref().filter(|v| !v.is_empty());
        let key_missing = key_var.is_some_and(|v| std::env::var_os(v).is_none());
        if let (true, Some(var)) = (key_missing, key_var) {
            diags.push(Diagnostic::new(
                Warning,
                format!(
                    "auth: environment variable {var} is unset; the backend will reject requests"
                ),
            ));
        }
        if ping && !key_missing {
            let result = HttpBackend::new(cfg.backend.clone())
                .and_then(|b| b.complete(&CallContext::new("ping", Stage::Generation), "ping"));
            match result {
                Ok(_) => diags.push(Diagnostic::new(Info, "backend answered ping")),
                Err(e @ BackendError::AuthFailed { .. }) => {
                    diags.push(Diagnostic::new(Warning, format!("auth: {e}")))
                }
                Err(e) => diags.push(Diagnostic::new(Error, format!("backend unreachable: {e}"))),
            }
        }
    }
    diags
}

fn cmd_validate(cli: &Cli, ping: bool) -> CmdResult {
    let cfg = match config_path(cli) {
        Some(p) => match PipelineConfig::load(&p) {
            Ok(c) => c,
            Err(e) => {
                println!("{}", Diagnostic::new(Severity::Error, e.to_string()));
                return Ok(1);
            }
        },
        None => PipelineConfig::default(),
    };
    let mut cfg = cfg;
    apply_overrides(&mut cfg, cli);
    let diags = validate_config(&cfg, cli.replay.as_deref(), ping);
    for d in &diags {
        println!("{d}");
    }
    let errors = diags
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .count();
    let warnings = diags
        .iter()
        .filter(|d| d.severity == Severity::Warning)
        .count();
    println!("{errors} errors, {warnings} warnings");
    Ok(if errors == 0 { 0 } else { 1 })
}
