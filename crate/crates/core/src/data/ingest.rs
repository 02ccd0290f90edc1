//! Streaming CSV / JSON-lines readers producing [`RawSeries`].

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestFormat {
    Csv,
    JsonLines,
}

impl FromStr for IngestFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(IngestFormat::Csv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(IngestFormat::JsonLines),
            other => Err(Error::config(format!("unknown ingest format {other:?}"))),
        }
    }
}

impl IngestFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(IngestFormat::Csv),
            "jsonl" | "ndjson" => Some(IngestFormat::JsonLines),
            _ => None,
        }
    }
}

/// Column / field mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    /// CSV value column; JSON-lines array field (falls back to "values").
    pub value_field: String,
    /// Consecutive CSV rows sharing an id form one series. Without it the
    /// whole file is one series.
    pub id_field: Option<String>,
    pub domain_field: Option<String>,
    pub default_domain: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            value_field: "value".into(),
            id_field: Some("id".into()),
            domain_field: Some("domain".into()),
            default_domain: "default".into(),
        }
    }
}

/// Non-numeric text parses to NaN.
pub fn parse_cell(s: &str) -> f64 {
    s.trim().parse::<f64>().unwrap_or(f64::NAN)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into())
}

pub type SeriesStream = Box<dyn Iterator<Item = Result<RawSeries>>>;

pub fn ingest(path: &Path, format: IngestFormat, options: &IngestOptions) -> Result<SeriesStream> {
    match format {
        IngestFormat::Csv => Ok(Box::new(CsvSeries::open(path, options)?)),
        IngestFormat::JsonLines => Ok(Box::new(JsonLinesSeries::open(path, options)?)),
    }
}

/// Every file under `dir` (non-recursive, sorted by name) whose extension
/// matches a supported format.
pub fn ingest_dir(dir: &Path, options: &IngestOptions) -> Result<SeriesStream> {
    let mut files: Vec<(PathBuf, IngestFormat)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| IngestFormat::from_path(&p).map(|f| (p, f)))
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    if files.is_empty() {
        return Err(Error::NoSeries(format!("no .csv or .jsonl files in {}", dir.display())));
    }
    let options = options.clone();
    Ok(Box::new(files.into_iter().flat_map(move |(p, f)| {
        match ingest(&p, f, &options) {
            Ok(s) => s,
            Err(e) => Box::new(std::iter::once(Err(e))) as SeriesStream,
        }
    })))
}

struct CsvSeries {
    path: PathBuf,
    reader: csv::Reader<File>,
    value_col: usize,
    id_col: Option<usize>,
    domain_col: Option<usize>,
    default_id: String,
    default_domain: String,
    pending: Option<(String, String, f64)>,
    record: csv::StringRecord,
    row: usize,
    done: bool,
}

impl CsvSeries {
    fn open(path: &Path, options: &IngestOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(false)
            .from_path(path)
            .map_err(|e| ingest_err(path, 0, e))?;
        let headers = reader.headers().map_err(|e| ingest_err(path, 0, e))?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let value_col = find(&options.value_field).ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            row: 0,
            message: format!("missing value column {:?}", options.value_field),
        })?;
        Ok(CsvSeries {
            path: path.to_path_buf(),
            reader,
            value_col,
            id_col: options.id_field.as_deref().and_then(find),
            domain_col: options.domain_field.as_deref().and_then(find),
            default_id: stem(path),
            default_domain: options.default_domain.clone(),
            pending: None,
            record: csv::StringRecord::new(),
            row: 0,
            done: false,
        })
    }

    fn next_row(&mut self) -> Result<Option<(String, String, f64)>> {
        match self.reader.read_record(&mut self.record) {
            Ok(false) => Ok(None),
            Ok(true) => {
                self.row += 1;
                let r = &self.record;
                let id = self.id_col.map_or_else(|| self.default_id.clone(), |c| r[c].to_string());
                let domain = self
                    .domain_col
                    .map_or_else(|| self.default_domain.clone(), |c| r[c].to_string());
                Ok(Some((id, domain, parse_cell(&r[self.value_col]))))
            }
            Err(e) => Err(ingest_err(&self.path, self.row + 1, e)),
        }
    }
}

fn ingest_err(path: &Path, row: usize, e: impl std::fmt::Display) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

impl Iterator for CsvSeries {
    type Item = Result<RawSeries>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (id, domain, first) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_row() {
                Ok(Some(p)) => p,
                Ok(None) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            },
        };
        let mut values = vec![first];
        loop {
            match self.next_row() {
                Ok(Some((rid, _, v))) if rid == id => values.push(v),
                Ok(Some(next)) => {
                    self.pending = Some(next);
                    break;
                }
                Ok(None) => {
                    self.done = true;
                    break;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        Some(Ok(RawSeries { id, domain, values }))
    }
}

struct JsonLinesSeries {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    options: IngestOptions,
    stem: String,
    row: usize,
}

impl JsonLinesSeries {
    fn open(path: &Path, options: &IngestOptions) -> Result<Self> {
        Ok(JsonLinesSeries {
            path: path.to_path_buf(),
            lines: BufReader::new(File::open(path)?).lines(),
            options: options.clone(),
            stem: stem(path),
            row: 0,
        })
    }

    fn parse(&self, line: &str) -> Result<RawSeries> {
        let err = |m: String| ingest_err(&self.path, self.row, m);
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| err("line is not a JSON object".into()))?;
        // "values" is the conventional array field name
        let values = obj
            .get(&self.options.value_field)
            .or_else(|| obj.get("values"))
            .and_then(|x| x.as_array())
            .ok_or_else(|| err(format!("missing array field {:?}", self.options.value_field)))?
            .iter()
            .map(|x| match x {
                serde_json::Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
                serde_json::Value::String(s) => parse_cell(s),
                _ => f64::NAN,
            })
            .collect();
        let text = |field: &Option<String>| {
            field.as_deref().and_then(|f| obj.get(f)).map(|x| match x {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        };
        Ok(RawSeries {
            id: text(&self.options.id_field).unwrap_or_else(|| format!("{}:{}", self.stem, self.row)),
            domain: text(&self.options.domain_field)
                .unwrap_or_else(|| self.options.default_domain.clone()),
            values,
        })
    }
}

impl Iterator for JsonLinesSeries {
    type Item = Result<RawSeries>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.row += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}
