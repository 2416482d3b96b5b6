//! Line-delimited JSON: knowledge records, triplets, tasks, logs, reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use keds_core::store::KnowledgeRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one object per line. Lines end in `\n`.
pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        JsonlWriter { inner }
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.inner, value)?;
        self.inner.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(Error::io(path))?;
        Ok(JsonlWriter::new(BufWriter::new(file)))
    }
}

pub fn save<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for item in items {
        w.write(item).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Parses every non-blank line, reporting failures with their 1-based line.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.into(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Metadata sidecar rows must be valid and numbered `0..n` in order.
pub fn load_records(path: &Path) -> Result<Vec<KnowledgeRecord>> {
    let records: Vec<KnowledgeRecord> = load(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.id != i {
            return Err(Error::Usage(format!(
                "{}: record on line {} has id {}, expected {i}",
                path.display(),
                i + 1,
                r.id
            )));
        }
        r.validate()?;
    }
    Ok(records)
}
