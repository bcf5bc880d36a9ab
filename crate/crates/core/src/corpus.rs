//! Corpus loading and document construction.
//!
//! A corpus file is newline-delimited JSON, one [`ModuleRecord`] per line.
//! Each record is rendered into a [`Document`]: a metadata header written as
//! Verilog line comments, a blank separator line, then the untouched source.
//!
//! ```text
//! // Module: rca4
//! // Description: 4-bit ripple carry adder
//! // Ports:
//! //   input [3:0] a
//! //   output [4:0] sum
//! // Comments:
//! //   carry chain is unrolled
//!
//! module rca4(...); ... endmodule
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_BATCH_SIZE: usize = 256;

const MODULE_PREFIX: &str = "// Module: ";
const DESCRIPTION_PREFIX: &str = "// Description: ";
const PORTS_LINE: &str = "// Ports:";
const COMMENTS_LINE: &str = "// Comments:";
const ITEM_PREFIX: &str = "//   ";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: invalid JSON: {message}")]
    Json { record: usize, message: String },
    #[error("record {record}: field `{field}`: {reason}")]
    Malformed {
        record: usize,
        field: String,
        reason: String,
    },
    #[error("duplicate id `{id}` at records {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("document header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortDirection {
    Input,
    Output,
    Inout,
}

impl PortDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            PortDirection::Input => "input",
            PortDirection::Output => "output",
            PortDirection::Inout => "inout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "input" => Some(PortDirection::Input),
            "output" => Some(PortDirection::Output),
            "inout" => Some(PortDirection::Inout),
            _ => None,
        }
    }
}

impl fmt::Display for PortDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortDecl {
    pub name: String,
    pub direction: PortDirection,
    /// `"1"` for a scalar, `"[hi:lo]"` for a vector.
    pub width: String,
}

impl PortDecl {
    pub fn new(direction: PortDirection, width: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            direction,
            width: width.into(),
        }
    }
}

/// One entry of the pre-verified HDL corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub id: String,
    pub name: String,
    pub description: String,
    pub ports: Vec<PortDecl>,
    pub comments: Vec<String>,
    pub code: String,
}

/// Checks a width descriptor: the literal `1` or `[hi:lo]` with `hi >= lo >= 0`.
pub fn is_valid_width(width: &str) -> bool {
    if width == "1" {
        return true;
    }
    let Some(inner) = width.strip_prefix('[').and_then(|w| w.strip_suffix(']')) else {
        return false;
    };
    let Some((hi, lo)) = inner.split_once(':') else {
        return false;
    };
    match (hi.parse::<u64>(), lo.parse::<u64>()) {
        (Ok(hi), Ok(lo)) => hi >= lo,
        _ => false,
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

fn has_line_break(s: &str) -> bool {
    s.contains('\n') || s.contains('\r')
}

impl ModuleRecord {
    /// Validates the record invariants. `record` is the 1-based position used in errors.
    pub fn validate(&self, record: usize) -> Result<(), CorpusError> {
        let bad = |field: &str, reason: &str| CorpusError::Malformed {
            record,
            field: field.to_string(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() || has_line_break(&self.id) {
            return Err(bad("id", "must be a non-empty single-line string"));
        }
        if !is_identifier(&self.name) {
            return Err(bad("name", "must be a non-empty identifier"));
        }
        if has_line_break(&self.description) {
            return Err(bad("description", "must be a single line"));
        }
        if self.code.trim().is_empty() {
            return Err(bad("code", "must be non-empty"));
        }
        for (i, port) in self.ports.iter().enumerate() {
            if !is_identifier(&port.name) {
                return Err(bad(&format!("ports[{i}].name"), "must be a non-empty identifier"));
            }
            if !is_valid_width(&port.width) {
                return Err(bad(
                    &format!("ports[{i}].width"),
                    &format!("`{}` is neither `1` nor `[hi:lo]` with hi >= lo >= 0", port.width),
                ));
            }
        }
        Ok(())
    }
}

fn take_string(obj: &Map<String, Value>, record: usize, field: &str) -> Result<String, CorpusError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(CorpusError::Malformed {
            record,
            field: field.to_string(),
            reason: "expected a string".into(),
        }),
        None => Err(CorpusError::Malformed {
            record,
            field: field.to_string(),
            reason: "missing".into(),
        }),
    }
}

fn take_array<'a>(
    obj: &'a Map<String, Value>,
    record: usize,
    field: &str,
) -> Result<&'a [Value], CorpusError> {
    match obj.get(field) {
        Some(Value::Array(items)) => Ok(items),
        Some(_) => Err(CorpusError::Malformed {
            record,
            field: field.to_string(),
            reason: "expected an array".into(),
        }),
        None => Err(CorpusError::Malformed {
            record,
            field: field.to_string(),
            reason: "missing".into(),
        }),
    }
}

fn parse_port(value: &Value, record: usize, i: usize) -> Result<PortDecl, CorpusError> {
    let field = format!("ports[{i}]");
    let Value::Object(obj) = value else {
        return Err(CorpusError::Malformed {
            record,
            field,
            reason: "expected an object".into(),
        });
    };
    let name =
        take_string(obj, record, "name").map_err(|e| rename_field(e, &format!("{field}.name")))?;
    let direction_raw = take_string(obj, record, "direction")
        .map_err(|e| rename_field(e, &format!("{field}.direction")))?;
    let direction = PortDirection::parse(&direction_raw).ok_or_else(|| CorpusError::Malformed {
        record,
        field: format!("{field}.direction"),
        reason: format!("`{direction_raw}` is not one of input, output, inout"),
    })?;
    let width =
        take_string(obj, record, "width").map_err(|e| rename_field(e, &format!("{field}.width")))?;
    Ok(PortDecl {
        name,
        direction,
        width,
    })
}

fn rename_field(err: CorpusError, new_field: &str) -> CorpusError {
    match err {
        CorpusError::Malformed { record, reason, .. } => CorpusError::Malformed {
            record,
            field: new_field.to_string(),
            reason,
        },
        other => other,
    }
}

/// Parses one corpus line into a record without checking invariants.
fn parse_record(line: &str, record: usize) -> Result<ModuleRecord, CorpusError> {
    let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Json {
        record,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(CorpusError::Json {
            record,
            message: "expected a JSON object".into(),
        });
    };
    let id = take_string(&obj, record, "id")?;
    let name = take_string(&obj, record, "name")?;
    let description = take_string(&obj, record, "description")?;
    let ports = take_array(&obj, record, "ports")?
        .iter()
        .enumerate()
        .map(|(i, p)| parse_port(p, record, i))
        .collect::<Result<Vec<_>, _>>()?;
    let comments = match obj.get("comments") {
        None | Some(Value::Null) => Vec::new(),
        Some(_) => take_array(&obj, record, "comments")?
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Value::String(s) => Ok(s.clone()),
                _ => Err(CorpusError::Malformed {
                    record,
                    field: format!("comments[{i}]"),
                    reason: "expected a string".into(),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    let code = take_string(&obj, record, "code")?;
    Ok(ModuleRecord {
        id,
        name,
        description,
        ports,
        comments,
        code,
    })
}

/// Parses a corpus from any reader. Blank lines are skipped; records are
/// numbered from 1 in file order.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<ModuleRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::from("<corpus>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let position = records.len() + 1;
        let rec = parse_record(&line, position)?;
        rec.validate(position)?;
        if let Some(&first) = seen.get(&rec.id) {
            return Err(CorpusError::DuplicateId {
                id: rec.id,
                first,
                second: position,
            });
        }
        seen.insert(rec.id.clone(), position);
        records.push(rec);
    }
    Ok(records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<ModuleRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Embeddable rendering of one module: metadata header followed by the code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Length of the header in characters, separator line included.
    pub header_length: usize,
}

impl Document {
    fn header_bytes(&self) -> usize {
        self.text
            .char_indices()
            .nth(self.header_length)
            .map_or(self.text.len(), |(i, _)| i)
    }

    pub fn header(&self) -> &str {
        &self.text[..self.header_bytes()]
    }

    pub fn code(&self) -> &str {
        &self.text[self.header_bytes()..]
    }

    /// Module name recovered from the header, if present.
    pub fn module_name(&self) -> Option<&str> {
        self.text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix(MODULE_PREFIX))
    }
}

fn render_header(record: &ModuleRecord) -> String {
    let mut lines: Vec<String> = vec![format!("{MODULE_PREFIX}{}", record.name)];
    if !record.description.is_empty() {
        lines.push(format!("{DESCRIPTION_PREFIX}{}", record.description));
    }
    if !record.ports.is_empty() {
        lines.push(PORTS_LINE.to_string());
        for p in &record.ports {
            lines.push(format!("{ITEM_PREFIX}{} {} {}", p.direction, p.width, p.name));
        }
    }
    if !record.comments.is_empty() {
        lines.push(COMMENTS_LINE.to_string());
        for comment in &record.comments {
            // multi-line block comments become one header line per source line
            for line in comment.lines() {
                lines.push(format!("{ITEM_PREFIX}{line}"));
            }
        }
    }
    let mut header = lines.join("\n");
    header.push_str("\n\n");
    header
}

pub fn build_document(record: &ModuleRecord) -> Document {
    let header = render_header(record);
    let header_length = header.chars().count();
    let mut text = header;
    text.push_str(&record.code);
    Document {
        id: record.id.clone(),
        text,
        header_length,
    }
}

pub fn build_documents(records: &[ModuleRecord]) -> Vec<Document> {
    records.iter().map(build_document).collect()
}

/// Metadata recovered from a rendered document header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedHeader {
    pub name: String,
    pub description: String,
    pub ports: Vec<PortDecl>,
    pub comment_lines: Vec<String>,
}

#[derive(PartialEq)]
enum Section {
    None,
    Ports,
    Comments,
}

pub fn parse_header(text: &str) -> Result<ParsedHeader, CorpusError> {
    let mut lines = text.split('\n');
    let first = lines.next().unwrap_or_default();
    let name = first
        .strip_prefix(MODULE_PREFIX)
        .ok_or_else(|| CorpusError::Header("first line is not a module line".into()))?;
    let mut parsed = ParsedHeader {
        name: name.to_string(),
        ..Default::default()
    };
    let mut section = Section::None;
    for line in lines {
        if line.is_empty() {
            return Ok(parsed);
        }
        if let Some(desc) = line.strip_prefix(DESCRIPTION_PREFIX) {
            parsed.description = desc.to_string();
            section = Section::None;
        } else if line == PORTS_LINE {
            section = Section::Ports;
        } else if line == COMMENTS_LINE {
            section = Section::Comments;
        } else if let Some(item) = line.strip_prefix(ITEM_PREFIX) {
            match section {
                Section::Ports => {
                    let mut parts = item.splitn(3, ' ');
                    let (Some(dir), Some(width), Some(name)) = (parts.next(), parts.next(), parts.next())
                    else {
                        return Err(CorpusError::Header(format!("bad port line `{line}`")));
                    };
                    let direction = PortDirection::parse(dir)
                        .ok_or_else(|| CorpusError::Header(format!("bad port direction `{dir}`")))?;
                    parsed.ports.push(PortDecl::new(direction, width, name));
                }
                Section::Comments => parsed.comment_lines.push(item.to_string()),
                Section::None => {
                    return Err(CorpusError::Header(format!("item outside a section: `{line}`")))
                }
            }
        } else {
            return Err(CorpusError::Header(format!("unexpected header line `{line}`")));
        }
    }
    Err(CorpusError::Header("missing blank separator line".into()))
}

/// Splits `docs` into consecutive batches of `batch_size`; only the last may be short.
pub fn batch_documents<T>(docs: &[T], batch_size: usize) -> Result<Vec<&[T]>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::ZeroBatchSize);
    }
    Ok(docs.chunks(batch_size).collect())
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            record: docs.len() + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}
