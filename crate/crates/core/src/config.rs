//! Pipeline configuration, read from a TOML file. Relative paths resolve
//! against the directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::difficulty_router::RouterConfig;
use crate::example_store::RetrievalConfig;
use crate::llm_backend::{BackendConfig, Predicate, ScriptedBackend};
use crate::schema_catalog::SerializationStyle;
use crate::schema_filter::FilterConfig;
use crate::schema_linker::LinkingConfig;
use crate::sql_exec_eval::ExecLimits;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid script {path}: {reason}")]
    Script { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Benchmark tables-metadata file.
    pub catalog: PathBuf,
    /// Example library (training-split layout).
    pub examples: PathBuf,
    /// Template directory; the built-in templates are used when unset.
    pub templates: Option<PathBuf>,
    pub db_root: PathBuf,
    pub suite_root: Option<PathBuf>,
    pub runs_dir: PathBuf,
    pub workers: usize,
    pub schema_style: SerializationStyle,
    /// Few-shot exemplars kept per template.
    pub exemplars: usize,
    /// Label for the method column of the report table.
    pub method_label: String,
    /// Scripted-backend file; when set no live model is contacted.
    pub script: Option<PathBuf>,
    pub backend: BackendConfig,
    pub filter: FilterConfig,
    pub retrieval: RetrievalConfig,
    pub linking: LinkingConfig,
    pub router: RouterConfig,
    pub eval: ExecLimits,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            catalog: PathBuf::from("tables.json"),
            examples: PathBuf::from("train_spider.json"),
            templates: None,
            db_root: PathBuf::from("database"),
            suite_root: None,
            runs_dir: PathBuf::from("runs"),
            workers: 4,
            schema_style: SerializationStyle::DdlLike,
            exemplars: 2,
            method_label: "AP-SQL".into(),
            script: None,
            backend: BackendConfig::default(),
            filter: FilterConfig::default(),
            retrieval: RetrievalConfig::default(),
            linking: LinkingConfig::default(),
            router: RouterConfig::default(),
            eval: ExecLimits::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Toml {
                path: path.display().to_string(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.catalog);
        resolve(base, &mut self.examples);
        resolve(base, &mut self.db_root);
        resolve(base, &mut self.runs_dir);
        for p in [&mut self.templates, &mut self.suite_root, &mut self.script]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    contains: Vec<String>,
    reply: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    List { replies: Vec<String> },
    Rules { rules: Vec<RuleSpec> },
}

/// Loads a scripted backend from JSON: `{"replies": [...]}` hands replies
/// out in order, `{"rules": [{"contains": [...], "reply": "..."}]}` answers
/// with the first rule whose substrings all occur in the prompt.
pub fn load_script(path: &Path) -> Result<ScriptedBackend, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let script: ScriptFile = serde_json::from_str(&text).map_err(|e| ConfigError::Script {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(match script {
        ScriptFile::List { replies } => ScriptedBackend::from_list(replies),
        ScriptFile::Rules { rules } => ScriptedBackend::from_rules(
            rules
                .into_iter()
                .map(|r| (Predicate::ContainsAll(r.contains), r.reply))
                .collect(),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    pub fn new(severity: Severity, message: impl Into<String>) -> Self {
        Self {
            severity,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.severity, self.message)
    }
}
