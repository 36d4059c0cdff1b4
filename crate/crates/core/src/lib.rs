//! Text-to-SQL orchestration over a pluggable language model, plus an
//! execution-based evaluation harness.
//!
//! The stages run in order: [`schema_filter`] trims the database schema,
//! [`example_store`] retrieves similar solved questions, [`schema_linker`]
//! scores tables and votes on columns, [`difficulty_router`] picks a
//! reasoning template, [`prompt_engine`] renders the prompt and extracts SQL
//! from the reply. [`sql_exec_eval`] scores predictions by execution.

pub mod cli;
pub mod config;
pub mod difficulty_router;
pub mod example_store;
pub mod llm_backend;
pub mod pipeline;
pub mod prompt_engine;
pub mod schema_catalog;
pub mod schema_filter;
pub mod schema_linker;
pub mod sql_exec_eval;
pub mod sql_scan;
