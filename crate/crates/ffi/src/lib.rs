//! C ABI over `apsql-core`.
//!
//! Every function returns an [`ApsqlStatus`]; on failure the message is
//! available from [`apsql_last_error`] on the same thread. Strings handed
//! out through `out` pointers are owned by the caller and released with
//! [`apsql_string_free`]. Handles are opaque and released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use apsql_core::config::PipelineConfig;
use apsql_core::example_store::lexical_similarity;
use apsql_core::pipeline::{self, Pipeline, StopAfter};
use apsql_core::prompt_engine::extract_sql;
use apsql_core::schema_catalog::{self, DatabaseSchema, SerializationStyle};
use apsql_core::sql_exec_eval;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApsqlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Catalog = 4,
    NotFound = 5,
    /// A pipeline stage failed; the message starts with the stage name.
    Stage = 6,
    NoSql = 7,
    Eval = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApsqlSchemaStyle {
    DdlLike = 0,
    CompactList = 1,
}

/// Loaded database catalog.
pub struct ApsqlCatalog {
    schemas: Vec<DatabaseSchema>,
}

/// Configured pipeline with its backend.
pub struct ApsqlPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(ApsqlStatus, String);

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> ApsqlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ApsqlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ApsqlStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(ApsqlStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            ApsqlStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn read_opt_path(p: *const c_char, what: &str) -> FfiResult<Option<PathBuf>> {
    if p.is_null() {
        Ok(None)
    } else {
        read_str(p, what).map(|s| Some(PathBuf::from(s)))
    }
}

fn check_out<T>(out: *mut T) -> FfiResult<()> {
    if out.is_null() {
        Err(Fail(
            ApsqlStatus::NullArgument,
            "output pointer is null".into(),
        ))
    } else {
        Ok(())
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) {
    let s = CString::new(s.replace('\0', " ")).expect("nul bytes removed");
    *out = s.into_raw();
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn apsql_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn apsql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn apsql_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a benchmark tables-metadata file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_catalog_load(
    path: *const c_char,
    out: *mut *mut ApsqlCatalog,
) -> ApsqlStatus {
    guard(|| {
        check_out(out)?;
        let path = read_str(path, "path")?;
        let schemas = schema_catalog::load_benchmark_catalog(Path::new(path))
            .map_err(|e| Fail(ApsqlStatus::Catalog, e.to_string()))?;
        *out = Box::into_raw(Box::new(ApsqlCatalog { schemas }));
        Ok(())
    })
}

/// Number of databases in the catalog; 0 for null.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apsql_catalog_len(catalog: *const ApsqlCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.schemas.len())
}

/// Serializes the schema of `db_id` as prompt text.
///
/// # Safety
/// `catalog` must be a live handle, `db_id` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_catalog_serialize(
    catalog: *const ApsqlCatalog,
    db_id: *const c_char,
    style: ApsqlSchemaStyle,
    out: *mut *mut c_char,
) -> ApsqlStatus {
    guard(|| {
        check_out(out)?;
        let catalog = catalog
            .as_ref()
            .ok_or_else(|| Fail(ApsqlStatus::NullArgument, "catalog is null".into()))?;
        let db_id = read_str(db_id, "db_id")?;
        let schema = catalog
            .schemas
            .iter()
            .find(|s| s.db_id == db_id)
            .ok_or_else(|| Fail(ApsqlStatus::NotFound, format!("unknown db_id `{db_id}`")))?;
        let style = match style {
            ApsqlSchemaStyle::DdlLike => SerializationStyle::DdlLike,
            ApsqlSchemaStyle::CompactList => SerializationStyle::CompactList,
        };
        write_string(out, schema.serialize(style));
        Ok(())
    })
}

/// # Safety
/// `catalog` must be null or a handle from [`apsql_catalog_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn apsql_catalog_free(catalog: *mut ApsqlCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Builds a pipeline from a TOML config. `replay` may be null; when set,
/// model calls are answered from that transcript.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `replay` null or one, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_pipeline_open(
    config_path: *const c_char,
    replay: *const c_char,
    out: *mut *mut ApsqlPipeline,
) -> ApsqlStatus {
    guard(|| {
        check_out(out)?;
        let config_path = read_str(config_path, "config_path")?;
        let replay = read_opt_path(replay, "replay")?;
        let cfg = PipelineConfig::load(Path::new(config_path))
            .map_err(|e| Fail(ApsqlStatus::Config, e.to_string()))?;
        let (inner, _recorder) = apsql_core::cli::build_pipeline(&cfg, replay.as_deref())
            .map_err(|e| Fail(ApsqlStatus::Config, e.0))?;
        *out = Box::into_raw(Box::new(ApsqlPipeline { inner }));
        Ok(())
    })
}

/// Answers one question. On success `out_sql` receives the SQL.
///
/// # Safety
/// `pipeline` must be a live handle, strings NUL-terminated, `out_sql` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_pipeline_ask(
    pipeline: *const ApsqlPipeline,
    question: *const c_char,
    db_id: *const c_char,
    out_sql: *mut *mut c_char,
) -> ApsqlStatus {
    guard(|| {
        check_out(out_sql)?;
        let p = pipeline
            .as_ref()
            .ok_or_else(|| Fail(ApsqlStatus::NullArgument, "pipeline is null".into()))?;
        let question = read_str(question, "question")?;
        let db_id = read_str(db_id, "db_id")?;
        let rec = p.inner.run_question(
            &pipeline::default_question_id(0),
            question,
            db_id,
            StopAfter::Extraction,
        );
        if let Some(f) = rec.failure {
            return Err(Fail(ApsqlStatus::Stage, f.to_string()));
        }
        write_string(out_sql, rec.sql.unwrap_or_default());
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be null or a handle from [`apsql_pipeline_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn apsql_pipeline_free(pipeline: *mut ApsqlPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Pulls the SQL statement out of a model reply.
///
/// # Safety
/// `reply` must be a NUL-terminated string and `out_sql` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_extract_sql(
    reply: *const c_char,
    out_sql: *mut *mut c_char,
) -> ApsqlStatus {
    guard(|| {
        check_out(out_sql)?;
        let reply = read_str(reply, "reply")?;
        let sql = extract_sql(reply).map_err(|e| Fail(ApsqlStatus::NoSql, e.to_string()))?;
        write_string(out_sql, sql);
        Ok(())
    })
}

/// Token-set Jaccard similarity of two texts, in [0, 1].
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_lexical_similarity(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> ApsqlStatus {
    guard(|| {
        check_out(out)?;
        *out = lexical_similarity(read_str(a, "a")?, read_str(b, "b")?);
        Ok(())
    })
}

/// Scores a predictions file (JSON lines) against a gold questions file and
/// returns the report as JSON. `suite_root` may be null.
///
/// # Safety
/// Paths must be NUL-terminated strings (`suite_root` may be null) and
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn apsql_evaluate(
    predictions: *const c_char,
    gold: *const c_char,
    db_root: *const c_char,
    suite_root: *const c_char,
    workers: usize,
    out_json: *mut *mut c_char,
) -> ApsqlStatus {
    guard(|| {
        check_out(out_json)?;
        let eval = |e: &dyn std::fmt::Display| Fail(ApsqlStatus::Eval, e.to_string());
        let predictions = read_str(predictions, "predictions")?;
        let gold = read_str(gold, "gold")?;
        let db_root = read_str(db_root, "db_root")?;
        let suite_root = read_opt_path(suite_root, "suite_root")?;
        let preds =
            sql_exec_eval::read_predictions(Path::new(predictions)).map_err(|e| eval(&e))?;
        let gold = pipeline::load_questions(Path::new(gold)).map_err(|e| eval(&e))?;
        let cases = pipeline::eval_cases(&preds, &gold).map_err(|e| eval(&e))?;
        let report = sql_exec_eval::evaluate(
            &cases,
            Path::new(db_root),
            suite_root.as_deref(),
            &Default::default(),
            workers.max(1),
        )
        .map_err(|e| eval(&e))?;
        write_string(out_json, report.to_json_pretty());
        Ok(())
    })
}
