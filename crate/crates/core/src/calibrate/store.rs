use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{Judgment, Preference};
use crate::error::{Error, Result};

/// Append-only judgment log, one JSON record per line.
///
/// A store handle is meant to be owned by a single writer; concurrent
/// callers serialize through it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgmentStore {
    path: PathBuf,
}

impl JudgmentStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(JudgmentStore { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Appends a judgment. A second non-skip judgment for the same
/// `(pair_id, annotator)` is rejected with the line of the existing record.
pub fn append_judgment(store: &JudgmentStore, j: &Judgment) -> Result<()> {
    if j.pair_id.is_empty() || j.annotator.is_empty() {
        return Err(Error::invalid("judgment needs a pair_id and an annotator"));
    }
    if j.preferred != Preference::Skip {
        for (line, existing) in load_judgments(store)?.iter().enumerate() {
            if existing.preferred != Preference::Skip
                && existing.pair_id == j.pair_id
                && existing.annotator == j.annotator
            {
                return Err(Error::DuplicateJudgment {
                    pair_id: j.pair_id.clone(),
                    annotator: j.annotator.clone(),
                    line: line + 1,
                });
            }
        }
    }
    let mut line = serde_json::to_string(j)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(&store.path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

pub fn load_judgments(store: &JudgmentStore) -> Result<Vec<Judgment>> {
    let f = match File::open(&store.path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: store.path.clone(),
            line: i + 1,
            message: format!("corrupt judgment record: {e}"),
        })?);
    }
    Ok(out)
}
