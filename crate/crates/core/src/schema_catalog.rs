//! Database schemas: loading from benchmark metadata, introspecting SQLite
//! files, projecting to sub-schemas and rendering schemas as prompt text.
//!
//! Identifiers compare case-insensitively but keep their original spelling
//! on output.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed catalog file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed record for db `{db_id}`: field `{field}`: {reason}")]
    MalformedRecord {
        db_id: String,
        field: String,
        reason: String,
    },
    #[error("db `{db_id}`: `{field}` references column index {index}, out of range")]
    DanglingIndex {
        db_id: String,
        field: String,
        index: i64,
    },
    #[error("invalid schema `{db_id}`: {reason}")]
    Invalid { db_id: String, reason: String },
    #[error("cannot open database {path}: {message}")]
    Database { path: String, message: String },
    #[error("database {path} has no user tables")]
    NoTables { path: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{table}.{column}`")]
    UnknownColumn { table: String, column: String },
}

/// Coarse column type, following the benchmark's own vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColType {
    Text,
    Number,
    Time,
    Boolean,
    Other,
}

impl ColType {
    /// Maps a declared SQL type to a coarse type by substring rules, checked
    /// in this order on the lowercased declaration:
    ///
    /// | substring                                   | type    |
    /// |---------------------------------------------|---------|
    /// | `bool`                                      | boolean |
    /// | `date`, `time`, `year`                      | time    |
    /// | `int`, `real`, `floa`, `doub`, `num`, `dec` | number  |
    /// | `char`, `clob`, `text`, `string`            | text    |
    /// | anything else (including empty)             | other   |
    pub fn from_declared(declared: &str) -> Self {
        let d = declared.to_ascii_lowercase();
        let has = |subs: &[&str]| subs.iter().any(|s| d.contains(s));
        if has(&["bool"]) {
            ColType::Boolean
        } else if has(&["date", "time", "year"]) {
            ColType::Time
        } else if has(&["int", "real", "floa", "doub", "num", "dec"]) {
            ColType::Number
        } else if has(&["char", "clob", "text", "string"]) {
            ColType::Text
        } else {
            ColType::Other
        }
    }

    /// Parses the benchmark metadata spelling (`"others"` for [`ColType::Other`]).
    pub fn from_benchmark(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "text" => ColType::Text,
            "number" => ColType::Number,
            "time" => ColType::Time,
            "boolean" => ColType::Boolean,
            _ => ColType::Other,
        }
    }

    pub fn benchmark_name(self) -> &'static str {
        match self {
            ColType::Text => "text",
            ColType::Number => "number",
            ColType::Time => "time",
            ColType::Boolean => "boolean",
            ColType::Other => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub table_index: usize,
    pub col_type: ColType,
    pub is_primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            column: column.into(),
        }
    }

    fn same_as(&self, other: &ColumnRef) -> bool {
        self.table.eq_ignore_ascii_case(&other.table)
            && self.column.eq_ignore_ascii_case(&other.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub from_column: ColumnRef,
    pub to_column: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKeyDef>,
}

/// Table name to kept column names. Lookups are case-insensitive.
pub type Selection = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerializationStyle {
    #[default]
    DdlLike,
    CompactList,
}

impl DatabaseSchema {
    /// Builds a schema and checks every structural invariant.
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKeyDef>,
    ) -> Result<Self, CatalogError> {
        let schema = Self {
            db_id: db_id.into(),
            tables,
            foreign_keys,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let invalid = |reason: String| CatalogError::Invalid {
            db_id: self.db_id.clone(),
            reason,
        };
        if self.db_id.trim().is_empty() {
            return Err(invalid("empty db_id".into()));
        }
        let mut table_names = HashSet::new();
        for (ti, table) in self.tables.iter().enumerate() {
            if table.name.is_empty() {
                return Err(invalid(format!("table #{ti} has an empty name")));
            }
            if !table_names.insert(table.name.to_lowercase()) {
                return Err(invalid(format!("duplicate table `{}`", table.name)));
            }
            if table.columns.is_empty() {
                return Err(invalid(format!("table `{}` has no columns", table.name)));
            }
            let mut col_names = HashSet::new();
            for col in &table.columns {
                if col.name.is_empty() {
                    return Err(invalid(format!(
                        "table `{}` has an unnamed column",
                        table.name
                    )));
                }
                if !col_names.insert(col.name.to_lowercase()) {
                    return Err(invalid(format!(
                        "duplicate column `{}.{}`",
                        table.name, col.name
                    )));
                }
                if col.table_index != ti {
                    return Err(invalid(format!(
                        "column `{}.{}` has table_index {} (expected {ti})",
                        table.name, col.name, col.table_index
                    )));
                }
            }
        }
        for fk in &self.foreign_keys {
            for end in [&fk.from_column, &fk.to_column] {
                if self.resolve(end).is_none() {
                    return Err(invalid(format!(
                        "foreign key endpoint `{}.{}` does not exist",
                        end.table, end.column
                    )));
                }
            }
            if fk.from_column.same_as(&fk.to_column) {
                return Err(invalid(format!(
                    "foreign key `{}.{}` references itself",
                    fk.from_column.table, fk.from_column.column
                )));
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn table_position(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    fn resolve(&self, r: &ColumnRef) -> Option<&ColumnDef> {
        self.table(&r.table)?.column(&r.column)
    }

    /// Selection covering every table and column.
    pub fn full_selection(&self) -> Selection {
        self.tables
            .iter()
            .map(|t| (t.name.clone(), t.column_names().map(String::from).collect()))
            .collect()
    }

    /// Restricts the schema to the kept tables and columns. Schema order is
    /// preserved and foreign keys survive only when both endpoints do.
    pub fn project(&self, keep: &Selection) -> Result<DatabaseSchema, CatalogError> {
        // Normalize the selection to lowercase for case-insensitive lookup.
        let mut wanted: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for (table_name, cols) in keep {
            let table = self
                .table(table_name)
                .ok_or_else(|| CatalogError::UnknownTable(table_name.clone()))?;
            let entry = wanted.entry(table.name.to_lowercase()).or_default();
            for col in cols {
                if table.column(col).is_none() {
                    return Err(CatalogError::UnknownColumn {
                        table: table.name.clone(),
                        column: col.clone(),
                    });
                }
                entry.insert(col.to_lowercase());
            }
        }

        let mut tables = Vec::new();
        for table in &self.tables {
            let Some(cols) = wanted.get(&table.name.to_lowercase()) else {
                continue;
            };
            let new_index = tables.len();
            let columns: Vec<ColumnDef> = table
                .columns
                .iter()
                .filter(|c| cols.contains(&c.name.to_lowercase()))
                .map(|c| ColumnDef {
                    table_index: new_index,
                    ..c.clone()
                })
                .collect();
            if columns.is_empty() {
                return Err(CatalogError::Invalid {
                    db_id: self.db_id.clone(),
                    reason: format!("projection keeps no columns of `{}`", table.name),
                });
            }
            tables.push(TableDef {
                name: table.name.clone(),
                columns,
            });
        }

        let mut projected = DatabaseSchema {
            db_id: self.db_id.clone(),
            tables,
            foreign_keys: Vec::new(),
        };
        projected.foreign_keys = self
            .foreign_keys
            .iter()
            .filter(|fk| {
                projected.resolve(&fk.from_column).is_some()
                    && projected.resolve(&fk.to_column).is_some()
            })
            .cloned()
            .collect();
        projected.validate()?;
        Ok(projected)
    }

    /// True when every table and column of `self` also exists in `other`.
    pub fn is_subschema_of(&self, other: &DatabaseSchema) -> bool {
        self.tables.iter().all(|t| {
            other
                .table(&t.name)
                .is_some_and(|ot| t.columns.iter().all(|c| ot.column(&c.name).is_some()))
        })
    }

    pub fn serialize(&self, style: SerializationStyle) -> String {
        match style {
            SerializationStyle::DdlLike => self.serialize_ddl(),
            SerializationStyle::CompactList => self.serialize_compact(),
        }
    }

    fn serialize_compact(&self) -> String {
        let mut lines: Vec<String> = self
            .tables
            .iter()
            .map(|t| {
                format!(
                    "{}({})",
                    t.name,
                    t.column_names().collect::<Vec<_>>().join(", ")
                )
            })
            .collect();
        for fk in &self.foreign_keys {
            lines.push(format!(
                "{}.{} = {}.{}",
                fk.from_column.table,
                fk.from_column.column,
                fk.to_column.table,
                fk.to_column.column
            ));
        }
        lines.join("\n")
    }

    fn serialize_ddl(&self) -> String {
        let mut out = String::new();
        for (i, table) in self.tables.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let mut lines: Vec<String> = table
                .columns
                .iter()
                .map(|c| {
                    let mut line = format!("  {} {}", c.name, c.col_type.benchmark_name());
                    if c.is_primary_key {
                        line.push_str(" PRIMARY KEY");
                    }
                    line
                })
                .collect();
            for fk in self
                .foreign_keys
                .iter()
                .filter(|fk| fk.from_column.table.eq_ignore_ascii_case(&table.name))
            {
                lines.push(format!(
                    "  FOREIGN KEY ({}) REFERENCES {}({})",
                    fk.from_column.column, fk.to_column.table, fk.to_column.column
                ));
            }
            let _ = write!(
                out,
                "CREATE TABLE {} (\n{}\n);",
                table.name,
                lines.join(",\n")
            );
        }
        out
    }
}

pub fn serialize_schema(schema: &DatabaseSchema, style: SerializationStyle) -> String {
    schema.serialize(style)
}

pub fn project_schema(
    schema: &DatabaseSchema,
    keep: &Selection,
) -> Result<DatabaseSchema, CatalogError> {
    schema.project(keep)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PrimaryKeyEntry {
    Single(i64),
    Composite(Vec<i64>),
}

#[derive(Deserialize)]
struct RawCatalogEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<PrimaryKeyEntry>,
    #[serde(default)]
    foreign_keys: Vec<(i64, i64)>,
}

/// Loads every database of a benchmark tables-metadata file.
pub fn load_benchmark_catalog(path: &Path) -> Result<Vec<DatabaseSchema>, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark_catalog(&text)
}

pub fn parse_benchmark_catalog(text: &str) -> Result<Vec<DatabaseSchema>, CatalogError> {
    let records: Vec<Value> = serde_json::from_str(text)?;
    records.iter().map(schema_from_record).collect()
}

fn schema_from_record(record: &Value) -> Result<DatabaseSchema, CatalogError> {
    let db_id = record
        .get("db_id")
        .and_then(Value::as_str)
        .unwrap_or("<unknown>")
        .to_string();
    let fields = [
        "db_id",
        "table_names_original",
        "column_names_original",
        "column_types",
        "primary_keys",
        "foreign_keys",
    ];
    for field in fields {
        if let Err(reason) = check_field(field, record.get(field)) {
            return Err(CatalogError::MalformedRecord {
                db_id,
                field: field.to_string(),
                reason,
            });
        }
    }
    let raw: RawCatalogEntry =
        serde_json::from_value(record.clone()).map_err(|e| CatalogError::MalformedRecord {
            db_id: db_id.clone(),
            field: "<record>".to_string(),
            reason: e.to_string(),
        })?;

    let malformed = |field: &str, reason: String| CatalogError::MalformedRecord {
        db_id: raw.db_id.clone(),
        field: field.to_string(),
        reason,
    };
    let dangling = |field: &str, index: i64| CatalogError::DanglingIndex {
        db_id: raw.db_id.clone(),
        field: field.to_string(),
        index,
    };

    if raw.column_types.len() != raw.column_names_original.len() {
        return Err(malformed(
            "column_types",
            format!(
                "{} types for {} columns",
                raw.column_types.len(),
                raw.column_names_original.len()
            ),
        ));
    }

    let mut tables: Vec<TableDef> = raw
        .table_names_original
        .iter()
        .map(|name| TableDef {
            name: name.clone(),
            columns: Vec::new(),
        })
        .collect();
    // Global column index -> (table, position within table); None for "*".
    let mut slots: Vec<Option<(usize, usize)>> =
        Vec::with_capacity(raw.column_names_original.len());
    for ((table_index, name), ty) in raw.column_names_original.iter().zip(&raw.column_types) {
        if *table_index < 0 {
            slots.push(None);
            continue;
        }
        let ti = *table_index as usize;
        let Some(table) = tables.get_mut(ti) else {
            return Err(malformed(
                "column_names_original",
                format!("column `{name}` has table index {table_index}, out of range"),
            ));
        };
        slots.push(Some((ti, table.columns.len())));
        table.columns.push(ColumnDef {
            name: name.clone(),
            table_index: ti,
            col_type: ColType::from_benchmark(ty),
            is_primary_key: false,
        });
    }

    let lookup = |field: &str, index: i64| -> Result<(usize, usize), CatalogError> {
        usize::try_from(index)
            .ok()
            .and_then(|i| slots.get(i).copied().flatten())
            .ok_or_else(|| dangling(field, index))
    };

    for pk in &raw.primary_keys {
        let indices = match pk {
            PrimaryKeyEntry::Single(i) => vec![*i],
            PrimaryKeyEntry::Composite(v) => v.clone(),
        };
        for index in indices {
            let (ti, ci) = lookup("primary_keys", index)?;
            tables[ti].columns[ci].is_primary_key = true;
        }
    }

    let mut foreign_keys: Vec<ForeignKeyDef> = Vec::new();
    for (from, to) in &raw.foreign_keys {
        let (ft, fc) = lookup("foreign_keys", *from)?;
        let (tt, tc) = lookup("foreign_keys", *to)?;
        let fk = ForeignKeyDef {
            from_column: ColumnRef::new(&tables[ft].name, &tables[ft].columns[fc].name),
            to_column: ColumnRef::new(&tables[tt].name, &tables[tt].columns[tc].name),
        };
        if !foreign_keys.contains(&fk) {
            foreign_keys.push(fk);
        }
    }

    DatabaseSchema::new(raw.db_id.clone(), tables, foreign_keys)
}

fn check_field(field: &str, value: Option<&Value>) -> Result<(), String> {
    let optional = matches!(field, "primary_keys" | "foreign_keys");
    let Some(value) = value else {
        return if optional {
            Ok(())
        } else {
            Err("missing".into())
        };
    };
    let ok = match field {
        "db_id" => value.as_str().is_some_and(|s| !s.trim().is_empty()),
        "table_names_original" | "column_types" => value
            .as_array()
            .is_some_and(|a| a.iter().all(Value::is_string)),
        "column_names_original" => value.as_array().is_some_and(|a| {
            a.iter().all(|pair| {
                pair.as_array()
                    .is_some_and(|p| p.len() == 2 && p[0].is_i64() && p[1].is_string())
            })
        }),
        "foreign_keys" => value.as_array().is_some_and(|a| {
            a.iter().all(|pair| {
                pair.as_array()
                    .is_some_and(|p| p.len() == 2 && p.iter().all(Value::is_i64))
            })
        }),
        _ => value.is_array(),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("unexpected value {value}"))
    }
}

/// Renders schemas back into the benchmark tables-metadata layout.
pub fn to_benchmark_json(schemas: &[DatabaseSchema]) -> Value {
    let records: Vec<Value> = schemas
        .iter()
        .map(|s| {
            let mut columns = vec![serde_json::json!([-1, "*"])];
            let mut types = vec![Value::from("text")];
            let mut primary_keys = Vec::new();
            for (ti, table) in s.tables.iter().enumerate() {
                for col in &table.columns {
                    if col.is_primary_key {
                        primary_keys.push(columns.len());
                    }
                    columns.push(serde_json::json!([ti, col.name]));
                    types.push(Value::from(col.col_type.benchmark_name()));
                }
            }
            let global = |r: &ColumnRef| -> usize {
                let mut idx = 1;
                for table in &s.tables {
                    if table.name.eq_ignore_ascii_case(&r.table) {
                        let pos = table
                            .columns
                            .iter()
                            .position(|c| c.name.eq_ignore_ascii_case(&r.column))
                            .expect("validated foreign key endpoint");
                        return idx + pos;
                    }
                    idx += table.columns.len();
                }
                unreachable!("validated foreign key endpoint")
            };
            let foreign_keys: Vec<Value> = s
                .foreign_keys
                .iter()
                .map(|fk| serde_json::json!([global(&fk.from_column), global(&fk.to_column)]))
                .collect();
            serde_json::json!({
                "db_id": s.db_id,
                "table_names_original": s.tables.iter().map(|t| &t.name).collect::<Vec<_>>(),
                "column_names_original": columns,
                "column_types": types,
                "primary_keys": primary_keys,
                "foreign_keys": foreign_keys,
            })
        })
        .collect();
    Value::Array(records)
}

/// Reads the live catalog of an SQLite file. The db_id is the file stem.
pub fn introspect_database(path: &Path) -> Result<DatabaseSchema, CatalogError> {
    let db_err = |e: rusqlite::Error| CatalogError::Database {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if !path.is_file() {
        return Err(CatalogError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(db_err)?;

    let table_names: Vec<String> = {
        let mut stmt = conn
            .prepare(
                "SELECT name FROM sqlite_master \
                 WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
            )
            .map_err(db_err)?;
        let rows = stmt.query_map([], |r| r.get(0)).map_err(db_err)?;
        rows.collect::<Result<_, _>>().map_err(db_err)?
    };
    if table_names.is_empty() {
        return Err(CatalogError::NoTables {
            path: path.display().to_string(),
        });
    }

    let mut tables = Vec::with_capacity(table_names.len());
    for (ti, name) in table_names.iter().enumerate() {
        let mut stmt = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(db_err)?;
        let columns = stmt
            .query_map([name], |r| {
                let col_name: String = r.get(0)?;
                let declared: String = r.get::<_, Option<String>>(1)?.unwrap_or_default();
                let pk: i64 = r.get(2)?;
                Ok(ColumnDef {
                    name: col_name,
                    table_index: ti,
                    col_type: ColType::from_declared(&declared),
                    is_primary_key: pk > 0,
                })
            })
            .map_err(db_err)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(db_err)?;
        tables.push(TableDef {
            name: name.clone(),
            columns,
        });
    }

    let mut foreign_keys = Vec::new();
    for table in &tables {
        let mut stmt = conn
            .prepare("SELECT \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?1)")
            .map_err(db_err)?;
        let rows = stmt
            .query_map([&table.name], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?,
                ))
            })
            .map_err(db_err)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(db_err)?;
        for (target, from, to) in rows {
            let Some(target_table) = tables.iter().find(|t| t.name.eq_ignore_ascii_case(&target))
            else {
                log::warn!(
                    "{}: foreign key to missing table `{target}` skipped",
                    path.display()
                );
                continue;
            };
            // A missing target column means "the target's primary key".
            let to = to.or_else(|| {
                target_table
                    .columns
                    .iter()
                    .find(|c| c.is_primary_key)
                    .map(|c| c.name.clone())
            });
            let (Some(to), Some(from_col)) = (to, table.column(&from)) else {
                log::warn!(
                    "{}: unresolvable foreign key on `{}` skipped",
                    path.display(),
                    table.name
                );
                continue;
            };
            let Some(to_col) = target_table.column(&to) else {
                log::warn!("{}: foreign key to `{target}.{to}` skipped", path.display());
                continue;
            };
            let fk = ForeignKeyDef {
                from_column: ColumnRef::new(&table.name, &from_col.name),
                to_column: ColumnRef::new(&target_table.name, &to_col.name),
            };
            if !fk.from_column.same_as(&fk.to_column) && !foreign_keys.contains(&fk) {
                foreign_keys.push(fk);
            }
        }
    }

    let db_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatabaseSchema::new(db_id, tables, foreign_keys)
}
