//! Execution-based scoring: Execution Accuracy (EX) on the primary database
//! instance and Test Suite Accuracy (TS) across variant instances.
//!
//! Result comparison canonicalizes every numeric cell before comparing:
//! values that are integral (after rounding to 10 significant digits) compare
//! as exact integers, all other numbers compare after rounding to 6
//! significant digits. Equality of canonical keys is an equivalence relation,
//! so multiset comparison reduces to comparing sorted key rows.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::sql_scan;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ExecError {
    #[error("cannot open {path}: {message}")]
    Open { path: String, message: String },
    #[error("{0}")]
    Sql(String),
    #[error("query exceeded the {0:?} time limit")]
    Timeout(Duration),
    #[error("query returned more than {0} rows")]
    RowLimitExceeded(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("missing database file {0}")]
    MissingDatabase(PathBuf),
    #[error("missing test-suite directory {0}")]
    MissingSuite(PathBuf),
    #[error("case `{0}`: ts_pass without ex_pass")]
    InvariantViolation(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Blob(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum CellKey {
    Null,
    Int(i64),
    Approx(String),
    Text(String),
    Blob(Vec<u8>),
}

const EXACT_INT_LIMIT: f64 = 9.0e15;

fn round_significant(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let magnitude = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - magnitude);
    (v * scale).round() / scale
}

fn numeric_key(v: f64) -> CellKey {
    if !v.is_finite() {
        return CellKey::Approx(format!("{v}"));
    }
    let r = round_significant(v, 10);
    if r.fract() == 0.0 && r.abs() < EXACT_INT_LIMIT {
        return CellKey::Int(r as i64);
    }
    let v = if v == 0.0 { 0.0 } else { v };
    CellKey::Approx(format!("{v:.5e}"))
}

impl Cell {
    fn key(&self) -> CellKey {
        match self {
            Cell::Null => CellKey::Null,
            Cell::Integer(i) if (*i as f64).abs() < EXACT_INT_LIMIT => CellKey::Int(*i),
            Cell::Integer(i) => numeric_key(*i as f64),
            Cell::Real(r) => numeric_key(*r),
            Cell::Text(s) => CellKey::Text(s.clone()),
            Cell::Blob(b) => CellKey::Blob(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Arity; meaningful even when there are no rows.
    pub columns: usize,
    pub rows: Vec<Vec<Cell>>,
    /// True when row order is part of the result (top-level ORDER BY).
    pub ordered: bool,
}

impl ResultTable {
    pub fn new(columns: usize, rows: Vec<Vec<Cell>>, ordered: bool) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns));
        Self {
            columns,
            rows,
            ordered,
        }
    }

    fn key_rows(&self) -> Vec<Vec<CellKey>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(Cell::key).collect())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{}", cells.join(" | "));
        }
        let _ = write!(
            out,
            "({} row{})",
            self.rows.len(),
            if self.rows.len() == 1 { "" } else { "s" }
        );
        out
    }
}

/// Sequence equality when `gold` is ordered, multiset equality otherwise.
pub fn results_match(predicted: &ResultTable, gold: &ResultTable) -> bool {
    if predicted.columns != gold.columns || predicted.rows.len() != gold.rows.len() {
        return false;
    }
    let mut p = predicted.key_rows();
    let mut g = gold.key_rows();
    if !gold.ordered {
        p.sort_unstable();
        g.sort_unstable();
    }
    p == g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecLimits {
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub max_rows: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_rows: 100_000,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

fn to_cell(v: ValueRef<'_>) -> Cell {
    match v {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) => Cell::Integer(i),
        ValueRef::Real(r) => Cell::Real(r),
        ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
    }
}

pub fn open_read_only(db_path: &Path) -> Result<Connection, ExecError> {
    Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| ExecError::Open {
        path: db_path.display().to_string(),
        message: e.to_string(),
    })
}

/// Runs one statement against a read-only connection.
pub fn execute_on(
    conn: &Connection,
    sql: &str,
    limits: &ExecLimits,
) -> Result<ResultTable, ExecError> {
    let deadline = Instant::now() + limits.timeout;
    let timed_out = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&timed_out);
    conn.progress_handler(
        1000,
        Some(move || {
            if Instant::now() >= deadline {
                flag.store(true, Ordering::Relaxed);
                true
            } else {
                false
            }
        }),
    )
    .map_err(|e| ExecError::Sql(e.to_string()))?;
    let result = run_statement(conn, sql, limits);
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    match result {
        Err(_) if timed_out.load(Ordering::Relaxed) => Err(ExecError::Timeout(limits.timeout)),
        other => other,
    }
}

fn run_statement(
    conn: &Connection,
    sql: &str,
    limits: &ExecLimits,
) -> Result<ResultTable, ExecError> {
    let sql_err = |e: rusqlite::Error| ExecError::Sql(e.to_string());
    let mut stmt = conn.prepare(sql).map_err(sql_err)?;
    let columns = stmt.column_count();
    let mut rows = stmt.query([]).map_err(sql_err)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(sql_err)? {
        if out.len() == limits.max_rows {
            return Err(ExecError::RowLimitExceeded(limits.max_rows));
        }
        let mut cells = Vec::with_capacity(columns);
        for i in 0..columns {
            cells.push(to_cell(row.get_ref(i).map_err(sql_err)?));
        }
        out.push(cells);
    }
    Ok(ResultTable::new(
        columns,
        out,
        sql_scan::has_top_level_order_by(sql),
    ))
}

/// Opens `db_path` read-only and runs `sql` under the given limits.
pub fn execute_sql(
    db_path: &Path,
    sql: &str,
    limits: &ExecLimits,
) -> Result<ResultTable, ExecError> {
    let conn = open_read_only(db_path)?;
    execute_on(&conn, sql, limits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question_id: String,
    pub db_id: String,
    /// Empty when the pipeline produced no SQL.
    pub predicted_sql: String,
    pub gold_sql: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    None,
    ExecError,
    Mismatch,
    NoSql,
    /// Gold SQL failed to execute; the case is left out of both denominators.
    InvalidGold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub question_id: String,
    pub ex_pass: bool,
    pub ts_pass: bool,
    pub failure_kind: FailureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CaseOutcome {
    pub fn excluded(&self) -> bool {
        self.failure_kind == FailureKind::InvalidGold
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExOutcome {
    pub question_id: String,
    pub ex_pass: bool,
    pub failure_kind: FailureKind,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsOutcome {
    pub question_id: String,
    pub ts_pass: bool,
    /// Set when the db had a single instance and TS fell back to EX.
    pub degraded: bool,
    pub detail: Option<String>,
}

pub fn database_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

/// Variant instances of one database, sorted by file name.
pub fn suite_instances(suite_root: &Path, db_id: &str) -> Result<Vec<PathBuf>, EvalError> {
    let dir = suite_root.join(db_id);
    let entries = std::fs::read_dir(&dir).map_err(|_| EvalError::MissingSuite(dir.clone()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "sqlite"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::MissingSuite(dir));
    }
    Ok(paths)
}

enum Check {
    Pass,
    Fail(FailureKind, String),
    GoldBroken(String),
}

fn check_on(db: &Path, predicted: &str, gold: &str, limits: &ExecLimits) -> Check {
    if predicted.trim().is_empty() {
        return Check::Fail(FailureKind::NoSql, "no SQL predicted".into());
    }
    let conn = match open_read_only(db) {
        Ok(c) => c,
        Err(e) => return Check::GoldBroken(e.to_string()),
    };
    let gold_result = match execute_on(&conn, gold, limits) {
        Ok(r) => r,
        Err(e) => return Check::GoldBroken(e.to_string()),
    };
    match execute_on(&conn, predicted, limits) {
        Err(e) => Check::Fail(FailureKind::ExecError, e.to_string()),
        Ok(p) if results_match(&p, &gold_result) => Check::Pass,
        Ok(_) => Check::Fail(FailureKind::Mismatch, "results differ".into()),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))
}

/// EX per case against `db_root/<db_id>/<db_id>.sqlite`.
pub fn execution_accuracy(
    cases: &[EvalCase],
    db_root: &Path,
    limits: &ExecLimits,
    workers: usize,
) -> Result<Vec<ExOutcome>, EvalError> {
    let dbs: BTreeSet<&str> = cases.iter().map(|c| c.db_id.as_str()).collect();
    for db in dbs {
        let path = database_path(db_root, db);
        if !path.is_file() {
            return Err(EvalError::MissingDatabase(path));
        }
    }
    let pool = pool(workers)?;
    Ok(pool.install(|| {
        cases
            .par_iter()
            .map(|case| {
                let db = database_path(db_root, &case.db_id);
                let (ex_pass, failure_kind, detail) =
                    match check_on(&db, &case.predicted_sql, &case.gold_sql, limits) {
                        Check::Pass => (true, FailureKind::None, None),
                        Check::Fail(kind, msg) => (false, kind, Some(msg)),
                        Check::GoldBroken(msg) => {
                            log::warn!(
                                "{}: gold SQL failed, case excluded: {msg}",
                                case.question_id
                            );
                            (
                                false,
                                FailureKind::InvalidGold,
                                Some(format!("gold: {msg}")),
                            )
                        }
                    };
                ExOutcome {
                    question_id: case.question_id.clone(),
                    ex_pass,
                    failure_kind,
                    detail,
                }
            })
            .collect()
    }))
}

/// TS per case: the EX check must pass on every instance under
/// `suite_root/<db_id>/`. A single-instance suite degrades to EX.
pub fn test_suite_accuracy(
    cases: &[EvalCase],
    ex: &[ExOutcome],
    suite_root: &Path,
    limits: &ExecLimits,
    workers: usize,
) -> Result<Vec<TsOutcome>, EvalError> {
    let mut instances = std::collections::BTreeMap::new();
    for case in cases {
        if !instances.contains_key(&case.db_id) {
            instances.insert(
                case.db_id.clone(),
                suite_instances(suite_root, &case.db_id)?,
            );
        }
    }
    let pool = pool(workers)?;
    Ok(pool.install(|| {
        cases
            .par_iter()
            .zip(ex.par_iter())
            .map(|(case, ex)| {
                let variants = &instances[&case.db_id];
                let mut outcome = TsOutcome {
                    question_id: case.question_id.clone(),
                    ts_pass: ex.ex_pass,
                    degraded: variants.len() < 2,
                    detail: None,
                };
                if outcome.degraded || !ex.ex_pass {
                    return outcome;
                }
                for variant in variants {
                    match check_on(variant, &case.predicted_sql, &case.gold_sql, limits) {
                        Check::Pass => {}
                        Check::Fail(_, msg) => {
                            outcome.ts_pass = false;
                            outcome.detail = Some(format!("{}: {msg}", file_name(variant)));
                            break;
                        }
                        Check::GoldBroken(msg) => {
                            log::warn!(
                                "{}: gold SQL failed on {}, variant skipped: {msg}",
                                case.question_id,
                                variant.display()
                            );
                        }
                    }
                }
                outcome
            })
            .collect()
    }))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub excluded: usize,
    pub ex_passes: usize,
    pub ts_passes: usize,
    /// `None` when no case counts (rendered as "n/a").
    pub ex_percent: Option<f64>,
    pub ts_percent: Option<f64>,
    pub notices: Vec<String>,
    pub per_case: Vec<CaseOutcome>,
}

fn percent(passes: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| (1000.0 * passes as f64 / total as f64).round() / 10.0)
}

fn fmt_percent(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"))
}

/// Folds per-case outcomes into a report. Refuses any case with TS but not EX.
pub fn aggregate(
    per_case: Vec<CaseOutcome>,
    notices: Vec<String>,
) -> Result<EvalReport, EvalError> {
    if let Some(bad) = per_case.iter().find(|c| c.ts_pass && !c.ex_pass) {
        return Err(EvalError::InvariantViolation(bad.question_id.clone()));
    }
    let excluded = per_case.iter().filter(|c| c.excluded()).count();
    let counted = per_case.len() - excluded;
    let ex_passes = per_case.iter().filter(|c| c.ex_pass).count();
    let ts_passes = per_case.iter().filter(|c| c.ts_pass).count();
    let notices: BTreeSet<String> = notices.into_iter().collect();
    Ok(EvalReport {
        cases: counted,
        excluded,
        ex_passes,
        ts_passes,
        ex_percent: percent(ex_passes, counted),
        ts_percent: percent(ts_passes, counted),
        notices: notices.into_iter().collect(),
        per_case,
    })
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table in the `Methods / LLM / EX% / TS%` layout.
    pub fn render_table(&self, method: &str, llm: &str) -> String {
        let ex = fmt_percent(self.ex_percent);
        let ts = fmt_percent(self.ts_percent);
        let mw = method.len().max("Methods".len());
        let lw = llm.len().max("LLM".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<mw$}  {:<lw$}  {:>5}  {:>5}",
            "Methods", "LLM", "EX%", "TS%"
        );
        let _ = writeln!(out, "{:<mw$}  {:<lw$}  {:>5}  {:>5}", method, llm, ex, ts);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "cases: {} evaluated, {} excluded",
            self.cases, self.excluded
        );
        let count = |k: FailureKind| self.per_case.iter().filter(|c| c.failure_kind == k).count();
        let _ = writeln!(
            out,
            "failures: exec_error {}, mismatch {}, no_sql {}",
            count(FailureKind::ExecError),
            count(FailureKind::Mismatch),
            count(FailureKind::NoSql)
        );
        for notice in &self.notices {
            let _ = writeln!(out, "note: {notice}");
        }
        out
    }
}

/// Runs EX and, when a suite root is given, TS; otherwise TS mirrors EX and
/// the report carries a notice saying so.
pub fn evaluate(
    cases: &[EvalCase],
    db_root: &Path,
    suite_root: Option<&Path>,
    limits: &ExecLimits,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    let ex = execution_accuracy(cases, db_root, limits, workers)?;
    let mut notices = Vec::new();
    let ts: Vec<TsOutcome> = match suite_root {
        Some(root) => {
            let ts = test_suite_accuracy(cases, &ex, root, limits, workers)?;
            let degraded: BTreeSet<&str> = cases
                .iter()
                .zip(&ts)
                .filter(|(_, t)| t.degraded)
                .map(|(c, _)| c.db_id.as_str())
                .collect();
            for db in degraded {
                log::info!("{db}: single suite instance, TS reported as EX");
                notices.push(format!("{db}: single test-suite instance, TS equals EX"));
            }
            ts
        }
        None => {
            if !cases.is_empty() {
                notices.push("no test suite configured: TS column reports EX".to_string());
            }
            ex.iter()
                .map(|e| TsOutcome {
                    question_id: e.question_id.clone(),
                    ts_pass: e.ex_pass,
                    degraded: true,
                    detail: None,
                })
                .collect()
        }
    };
    let per_case = ex
        .into_iter()
        .zip(ts)
        .map(|(e, t)| {
            let (failure_kind, detail) = if e.ex_pass && !t.ts_pass {
                (FailureKind::Mismatch, t.detail)
            } else {
                (e.failure_kind, e.detail)
            };
            CaseOutcome {
                question_id: e.question_id,
                ex_pass: e.ex_pass,
                ts_pass: t.ts_pass,
                failure_kind,
                detail,
            }
        })
        .collect();
    aggregate(per_case, notices)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: String,
    pub db_id: String,
    pub predicted_sql: String,
}

pub fn write_predictions<W: Write>(
    records: &[PredictionRecord],
    mut out: W,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            path: path.display().to_string(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[Cell]], ordered: bool) -> ResultTable {
        let columns = rows.first().map_or(1, |r| r.len());
        ResultTable::new(columns, rows.iter().map(|r| r.to_vec()).collect(), ordered)
    }

    fn txt(s: &str) -> Cell {
        Cell::Text(s.into())
    }

    #[test]
    fn matching_rules() {
        let a = t(&[&[txt("a")], &[txt("b")]], false);
        let b = t(&[&[txt("b")], &[txt("a")]], false);
        assert!(results_match(&a, &a));
        assert!(results_match(&b, &a));
        let gold_ordered = t(&[&[txt("a")], &[txt("b")]], true);
        assert!(!results_match(&b, &gold_ordered));
        // Arity mismatch, even with no rows.
        assert!(!results_match(
            &ResultTable::new(1, vec![], false),
            &ResultTable::new(2, vec![], false)
        ));
        // Multiset, not set.
        let dup = t(&[&[txt("a")], &[txt("a")]], false);
        let one = t(&[&[txt("a")], &[txt("b")]], false);
        assert!(!results_match(&dup, &one));
    }

    #[test]
    fn numeric_canonicalization() {
        let one = |c: Cell| t(&[&[c]], false);
        assert!(results_match(&one(Cell::Integer(3)), &one(Cell::Real(3.0))));
        assert!(results_match(
            &one(Cell::Real(0.1 + 0.2)),
            &one(Cell::Real(0.3))
        ));
        assert!(results_match(
            &one(Cell::Real(2.5)),
            &one(Cell::Real(2.5 * (1.0 + 1e-9)))
        ));
        assert!(!results_match(
            &one(Cell::Real(2.5)),
            &one(Cell::Real(2.5 * (1.0 + 1e-3)))
        ));
        assert!(!results_match(
            &one(Cell::Integer(1_234_567)),
            &one(Cell::Integer(1_234_568))
        ));
        assert!(!results_match(&one(Cell::Null), &one(Cell::Integer(0))));
        assert!(!results_match(&one(txt("1")), &one(Cell::Integer(1))));
        assert!(results_match(&one(Cell::Real(-0.0)), &one(Cell::Real(0.0))));
    }

    #[test]
    fn executes_with_order_flag() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("p.sqlite");
        Connection::open(&db)
            .unwrap()
            .execute_batch("CREATE TABLE pets(id INTEGER PRIMARY KEY, name TEXT); INSERT INTO pets VALUES (1,'rex'),(2,'ace');")
            .unwrap();
        let lim = ExecLimits::default();
        let r = execute_sql(&db, "SELECT 1", &lim).unwrap();
        assert_eq!(r.rows, vec![vec![Cell::Integer(1)]]);
        assert!(!r.ordered);
        assert!(
            execute_sql(&db, "SELECT name FROM pets ORDER BY name", &lim)
                .unwrap()
                .ordered
        );
        assert!(
            !execute_sql(&db, "SELECT * FROM (SELECT id FROM pets ORDER BY id)", &lim)
                .unwrap()
                .ordered
        );
        assert!(matches!(
            execute_sql(&db, "SELECT nope FROM pets", &lim),
            Err(ExecError::Sql(_))
        ));
        let small = ExecLimits { max_rows: 1, ..lim };
        assert_eq!(
            execute_sql(&db, "SELECT * FROM pets", &small),
            Err(ExecError::RowLimitExceeded(1))
        );
        // Read-only connection refuses writes.
        assert!(execute_sql(&db, "DELETE FROM pets", &lim).is_err());
        assert_eq!(
            execute_sql(&db, "SELECT count(*) FROM pets", &lim)
                .unwrap()
                .rows[0][0],
            Cell::Integer(2)
        );
    }

    #[test]
    fn timeout_interrupts() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("t.sqlite");
        Connection::open(&db)
            .unwrap()
            .execute_batch("CREATE TABLE t(x);")
            .unwrap();
        let lim = ExecLimits {
            timeout: Duration::from_millis(50),
            max_rows: 10,
        };
        let slow =
            "WITH RECURSIVE c(n) AS (SELECT 1 UNION ALL SELECT n+1 FROM c) SELECT count(*) FROM c";
        assert!(matches!(
            execute_sql(&db, slow, &lim),
            Err(ExecError::Timeout(_))
        ));
    }

    fn outcome(id: &str, ex: bool, ts: bool) -> CaseOutcome {
        CaseOutcome {
            question_id: id.into(),
            ex_pass: ex,
            ts_pass: ts,
            failure_kind: if ex {
                FailureKind::None
            } else {
                FailureKind::Mismatch
            },
            detail: None,
        }
    }

    #[test]
    fn aggregate_arithmetic() {
        let empty = aggregate(vec![], vec![]).unwrap();
        assert_eq!(empty.cases, 0);
        assert!(empty.render_table("AP-SQL", "m").contains("n/a"));

        let mut cases: Vec<CaseOutcome> = (0..8)
            .map(|i| outcome(&format!("q{i}"), true, true))
            .collect();
        cases.push(outcome("q8", true, false));
        cases.push(outcome("q9", false, false));
        let r = aggregate(cases, vec![]).unwrap();
        assert_eq!(r.ex_percent, Some(90.0));
        assert_eq!(r.ts_percent, Some(80.0));
        assert!(r.render_table("AP-SQL", "m").contains(" 90.0   80.0"));

        assert!(matches!(
            aggregate(vec![outcome("bad", false, true)], vec![]),
            Err(EvalError::InvariantViolation(id)) if id == "bad"
        ));
    }

    #[test]
    fn invalid_gold_excluded_from_denominator() {
        let mut bad = outcome("g", false, false);
        bad.failure_kind = FailureKind::InvalidGold;
        let r = aggregate(vec![outcome("a", true, true), bad], vec![]).unwrap();
        assert_eq!((r.cases, r.excluded), (1, 1));
        assert_eq!(r.ex_percent, Some(100.0));
    }
}
