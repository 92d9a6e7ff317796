//! Labeled functions, the line-record file format, the synthetic generator,
//! and seeded train/validation/test splits.

mod generator;
mod split;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generator::{default_pattern_library, synthesize_corpus, GeneratorSpec, PatternTemplate};
pub use split::{split_corpus, CorpusSplit, SplitRatios};

use crate::error::{Error, Result};
use crate::tokenizer::segment_statements;

/// One labeled function. `label_z[j]` marks statement `j` as vulnerable and
/// `label_y` is set exactly when some statement is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceFunction {
    pub id: String,
    pub code: String,
    pub statements: Vec<String>,
    pub label_y: bool,
    pub label_z: Vec<bool>,
    pub tags: Vec<String>,
}

impl SourceFunction {
    /// Segments `code` and attaches per-statement labels.
    pub fn new(
        id: impl Into<String>,
        code: impl Into<String>,
        statement_labels: &[u8],
        tags: Vec<String>,
    ) -> Result<Self> {
        let code = code.into();
        let statements = segment_statements(&code)?;
        if statements.len() != statement_labels.len() {
            return Err(Error::Load(format!(
                "{} statement labels for {} statements",
                statement_labels.len(),
                statements.len()
            )));
        }
        let mut label_z = Vec::with_capacity(statement_labels.len());
        for &l in statement_labels {
            match l {
                0 => label_z.push(false),
                1 => label_z.push(true),
                other => return Err(Error::Load(format!("statement label {other} is not 0/1"))),
            }
        }
        Ok(SourceFunction {
            id: id.into(),
            code,
            label_y: label_z.iter().any(|&z| z),
            statements,
            label_z,
            tags,
        })
    }

    pub fn statement_count(&self) -> usize {
        self.statements.len()
    }
}

/// Ascending indices of the vulnerable statements; empty for benign
/// functions.
pub fn extract_scope(func: &SourceFunction) -> Vec<usize> {
    func.label_z
        .iter()
        .enumerate()
        .filter_map(|(j, &z)| z.then_some(j))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: Option<String>,
    code: Option<String>,
    statement_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tags: Vec<String>,
}

/// Result of reading a record file: the valid functions plus one
/// [`Error::Record`] per rejected line.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub functions: Vec<SourceFunction>,
    pub errors: Vec<Error>,
}

fn parse_record(line: &str) -> std::result::Result<SourceFunction, String> {
    let rec: RecordLine = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let id = rec.id.ok_or("missing field \"id\"")?;
    let code = rec.code.ok_or("missing field \"code\"")?;
    let labels = rec.statement_labels.ok_or("missing field \"statement_labels\"")?;
    SourceFunction::new(id, code, &labels, rec.tags).map_err(|e| e.to_string())
}

/// Reads one JSON object per line with keys `id`, `code`,
/// `statement_labels` (and optional `tags`). Blank lines are skipped.
pub fn load_records(path: &Path) -> Result<LoadedCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut functions = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(f) => functions.push(f),
            Err(message) => errors.push(Error::Record {
                line: i + 1,
                message,
            }),
        }
    }
    for e in &errors {
        log::warn!("{}: {e}", path.display());
    }
    if functions.is_empty() {
        return Err(Error::Load(format!(
            "{}: no valid records ({} rejected)",
            path.display(),
            errors.len()
        )));
    }
    Ok(LoadedCorpus { functions, errors })
}

pub fn record_line(func: &SourceFunction) -> String {
    let rec = RecordLine {
        id: Some(func.id.clone()),
        code: Some(func.code.clone()),
        statement_labels: Some(func.label_z.iter().map(|&z| z as u8).collect()),
        tags: func.tags.clone(),
    };
    serde_json::to_string(&rec).expect("record serialises")
}

pub fn write_records(path: &Path, functions: &[SourceFunction]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for f in functions {
        writeln!(out, "{}", record_line(f)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
