//! Knowledge elicitation over tabular datasets.
//!
//! An expert uploads a table, answers questions picked from a mix of
//! generated and predefined prompts, and annotates the data directly.
//! Everything they say accumulates in an event-sourced session that can be
//! exported or turned into a report.

pub mod domain;
pub mod export;
pub mod ingest;
pub mod interview;
pub mod prompts;
pub mod provider;
pub mod questions;
pub mod session;
pub mod store;
pub mod validation;
