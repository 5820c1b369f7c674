use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Split, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// As written in the manifest; relative paths are resolved against the
    /// manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Self { root: root.into(), class_names: CLASS_NAMES.map(String::from).to_vec(), records }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Records per class within `split`.
    pub fn counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for r in self.split(split) {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn summary(&self) -> String {
        let fmt = |s: Split| {
            self.class_names
                .iter()
                .zip(self.counts(s))
                .map(|(n, c)| format!("{n}={c}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("train: {}; test: {}", fmt(Split::Train), fmt(Split::Test))
    }

    /// Writes `path,label,split` with class names as labels.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let io = |e| csv_io(path, e);
        w.write_record(["path", "label", "split"]).map_err(io)?;
        for r in &self.records {
            w.write_record([r.path.as_str(), self.class_names[r.label].as_str(), r.split.as_str()]).map_err(io)?;
        }
        w.flush().map_err(|e| DataError::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    DataError::io(path, std::io::Error::other(e))
}

fn parse_label(s: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(s))
        .or_else(|| s.parse::<usize>().ok().filter(|&i| i < CLASS_NAMES.len()))
}

/// Reads a `path,label,split` CSV. Labels are class names (any case) or
/// class indices. Every referenced image must exist.
pub fn load_manifest(file: &Path) -> Result<DatasetManifest, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::io(file, io),
            other => DataError::Manifest { path: file.into(), line: 1, msg: format!("{other:?}") },
        })?;
    let err = |line: u64, msg: String| DataError::Manifest { path: file.into(), line, msg };
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(err(1, format!("expected header path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let (path, label, split) = (&row[0], &row[1], &row[2]);
        let label = parse_label(label).ok_or_else(|| err(line, format!("unknown label {label:?}")))?;
        let split = match split.to_ascii_lowercase().as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(err(line, format!("unknown split {split:?}"))),
        };
        if path.is_empty() {
            return Err(err(line, "empty path".into()));
        }
        if !seen.insert(path.to_string()) {
            return Err(err(line, format!("duplicate path {path}")));
        }
        if !root.join(path).is_file() {
            return Err(err(line, format!("missing file {path}")));
        }
        records.push(Record { path: path.to_string(), label, split });
    }
    Ok(DatasetManifest::new(root, records))
}
