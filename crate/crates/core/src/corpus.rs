//! Poem datasets: loading (JSONL and CSV), validation and corpus statistics.
//!
//! Records follow the interchange schema
//! `{"id", "title", "poem", "reference_summary"?, "image_path"?, "source"?}`.
//! Poem text is kept exactly as read, including line breaks.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("duplicate poem id `{0}`")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
    #[error("unknown dataset format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoemSource {
    Poemsum,
    Minipo,
    #[default]
    Custom,
}

impl PoemSource {
    fn is_custom(&self) -> bool {
        matches!(self, PoemSource::Custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Poem {
    pub id: String,
    pub title: String,
    #[serde(rename = "poem")]
    pub text: String,
    #[serde(default, skip_serializing_if = "PoemSource::is_custom")]
    pub source: PoemSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl Poem {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            source: PoemSource::Custom,
            reference_summary: None,
            image_path: None,
        }
    }

    pub fn with_reference(mut self, summary: impl Into<String>) -> Self {
        self.reference_summary = Some(summary.into());
        self
    }

    pub fn with_source(mut self, source: PoemSource) -> Self {
        self.source = source;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub poems: Vec<Poem>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, poems: Vec<Poem>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for poem in &poems {
            if !seen.insert(poem.id.as_str()) {
                return Err(CorpusError::DuplicateId(poem.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            poems,
        })
    }

    pub fn len(&self) -> usize {
        self.poems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poems.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Poem> {
        self.poems.iter().find(|p| p.id == id)
    }

    /// Writes the dataset in canonical JSONL form, one record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for poem in &self.poems {
            serde_json::to_writer(&mut out, poem)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guesses the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    match format {
        DatasetFormat::Jsonl => read_jsonl(&name, BufReader::new(file)),
        DatasetFormat::Csv => read_csv(&name, file),
    }
}

const REQUIRED_FIELDS: [&str; 3] = ["id", "title", "poem"];

pub fn read_jsonl<R: BufRead>(name: &str, reader: R) -> Result<Dataset, CorpusError> {
    let mut poems = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Format {
                line: line_no,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Format {
            line: line_no,
            message: "record is not a JSON object".to_string(),
        })?;
        for field in REQUIRED_FIELDS {
            if !obj.contains_key(field) {
                return Err(CorpusError::MissingField {
                    line: line_no,
                    field,
                });
            }
        }
        let poem: Poem = serde_json::from_value(value).map_err(|e| CorpusError::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        poems.push(poem);
    }
    Dataset::new(name, poems)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    title: String,
    poem: String,
    #[serde(default)]
    reference_summary: Option<String>,
    #[serde(default)]
    image_path: Option<String>,
    #[serde(default)]
    source: Option<PoemSource>,
}

pub fn read_csv<R: Read>(name: &str, reader: R) -> Result<Dataset, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Format {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for field in REQUIRED_FIELDS {
        if !headers.iter().any(|h| h.trim() == field) {
            return Err(CorpusError::MissingField { line: 1, field });
        }
    }
    let mut poems = Vec::new();
    for result in rdr.deserialize::<CsvRow>() {
        let row = result.map_err(|e| CorpusError::Format {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        poems.push(Poem {
            id: row.id,
            title: row.title,
            text: row.poem,
            source: row.source.unwrap_or(PoemSource::Minipo),
            reference_summary: row.reference_summary.filter(|s| !s.is_empty()),
            image_path: row.image_path.filter(|s| !s.is_empty()),
        });
    }
    Dataset::new(name, poems)
}

/// Number of non-empty Unicode-whitespace-separated segments.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub poem_count: usize,
    pub max_poem_words: usize,
    pub avg_poem_words: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_summary_words: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_summary_words: Option<f64>,
}

pub fn dataset_stats(d: &Dataset) -> Result<DatasetStats, CorpusError> {
    if d.is_empty() {
        return Err(CorpusError::Empty);
    }
    let poem_words: Vec<usize> = d.poems.iter().map(|p| word_count(&p.text)).collect();
    let summary_words: Vec<usize> = d
        .poems
        .iter()
        .filter_map(|p| p.reference_summary.as_deref().map(word_count))
        .collect();
    let (max_summary_words, avg_summary_words) = if summary_words.is_empty() {
        (None, None)
    } else {
        (
            summary_words.iter().copied().max(),
            Some(mean_of(&summary_words)),
        )
    };
    Ok(DatasetStats {
        poem_count: d.len(),
        max_poem_words: poem_words.iter().copied().max().unwrap_or(0),
        avg_poem_words: mean_of(&poem_words),
        max_summary_words,
        avg_summary_words,
    })
}

fn mean_of(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    total as f64 / counts.len() as f64
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34}{}", "Number of Poems", self.poem_count)?;
        writeln!(f, "{:<34}{}", "Max. Poem Length (in words)", self.max_poem_words)?;
        writeln!(f, "{:<34}{:.2}", "Avg. Poem Length (in words)", self.avg_poem_words)?;
        match (self.max_summary_words, self.avg_summary_words) {
            (Some(max), Some(avg)) => {
                writeln!(f, "{:<34}{}", "Max. Summary Length (in words)", max)?;
                write!(f, "{:<34}{:.2}", "Avg. Summary Length (in words)", avg)
            }
            _ => {
                writeln!(f, "{:<34}-", "Max. Summary Length (in words)")?;
                write!(f, "{:<34}-", "Avg. Summary Length (in words)")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub poem_id: String,
    pub rule: String,
    pub severity: Severity,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{level}: [{}] {}", self.poem_id, self.rule)
    }
}

/// Checks every Poem and Dataset invariant; an empty result means the dataset is clean.
pub fn validate_dataset(d: &Dataset) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |id: &str, rule: &str, severity| {
        findings.push(Finding {
            poem_id: id.to_string(),
            rule: rule.to_string(),
            severity,
        })
    };
    for poem in &d.poems {
        if poem.id.trim().is_empty() {
            push(&poem.id, "empty id", Severity::Error);
        }
        if !seen.insert(poem.id.as_str()) {
            push(&poem.id, "duplicate id", Severity::Error);
        }
        if poem.text.trim().is_empty() {
            push(&poem.id, "empty text", Severity::Error);
        }
        match poem.reference_summary.as_deref() {
            Some(s) if s.trim().is_empty() => {
                push(&poem.id, "empty reference summary", Severity::Warning)
            }
            None if poem.source == PoemSource::Poemsum => {
                push(&poem.id, "missing reference summary", Severity::Warning)
            }
            _ => {}
        }
        if let Some(p) = poem.image_path.as_deref() {
            let path = Path::new(p);
            if path.is_absolute() || path.components().any(|c| c.as_os_str() == "..") {
                push(&poem.id, "image path must be relative", Severity::Error);
            }
        }
    }
    findings
}

pub fn has_errors(findings: &[Finding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Error)
}
