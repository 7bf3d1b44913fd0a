//! Append-only memory for the decision loop.
//!
//! Three stores, one per kind: environment snapshots, bid records, and
//! daily reflections. Entries are never mutated; retrieval is a recency
//! window over the current day plus, for reflections, the most recent
//! prior day. Nothing from the future of the querying step is ever
//! returned.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::EnvStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Env,
    Bid,
    Ref,
}

impl std::fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryKind::Env => "env",
            MemoryKind::Bid => "bid",
            MemoryKind::Ref => "ref",
        })
    }
}

/// Outcome counters copied into a bid record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub impressions: usize,
    pub wins: u64,
    pub cost: u64,
    pub clicks: u64,
}

/// What was decided at one step and what it bought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidRecord {
    pub lambda: f64,
    pub adjustment: f64,
    pub reason: String,
    pub outcome: StepOutcome,
}

/// One end-of-day takeaway about a single memory kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub about: MemoryKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MemoryPayload {
    Env(EnvStatus),
    Bid(BidRecord),
    Ref(Reflection),
}

impl MemoryPayload {
    pub fn kind(&self) -> MemoryKind {
        match self {
            MemoryPayload::Env(_) => MemoryKind::Env,
            MemoryPayload::Bid(_) => MemoryKind::Bid,
            MemoryPayload::Ref(_) => MemoryKind::Ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub seq: u64,
    pub kind: MemoryKind,
    pub day: usize,
    /// Step the entry belongs to; reflections span a day and carry none.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
    pub payload: MemoryPayload,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("store holds {store} entries, got {entry}")]
    KindMismatch { store: MemoryKind, entry: MemoryKind },
    #[error("{path}:{line}: corrupt memory line: {msg}")]
    CorruptLine { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How much history a retrieval pulls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalScope {
    /// Same-day lookback, in steps.
    pub window: usize,
    /// For the reflection store only: also return the most recent prior
    /// day's entries.
    pub include_yesterday_reflection: bool,
    /// Hard cap; the oldest entries are dropped first.
    pub max_entries: usize,
}

impl Default for RetrievalScope {
    fn default() -> Self {
        RetrievalScope { window: 6, include_yesterday_reflection: true, max_entries: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    kind: MemoryKind,
    entries: Vec<MemoryEntry>,
    next_seq: u64,
}

impl MemoryStore {
    pub fn new(kind: MemoryKind) -> Self {
        MemoryStore { kind, entries: Vec::new(), next_seq: 1 }
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Appends one entry, assigning the next sequence number (from 1).
    pub fn append(
        &mut self,
        day: usize,
        step: Option<usize>,
        payload: MemoryPayload,
    ) -> Result<&MemoryEntry, MemoryError> {
        if payload.kind() != self.kind {
            return Err(MemoryError::KindMismatch { store: self.kind, entry: payload.kind() });
        }
        let entry = MemoryEntry { seq: self.next_seq, kind: self.kind, day, step, payload };
        self.next_seq += 1;
        self.entries.push(entry);
        Ok(self.entries.last().unwrap())
    }

    pub fn entries_for_day(&self, day: usize) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(move |e| e.day == day)
    }

    /// Entries visible when deciding `step` of `day`, oldest first.
    ///
    /// The same-day part covers steps `[step - window, step)`. For the
    /// reflection store, `include_yesterday_reflection` prepends every
    /// entry of the most recent earlier day. Nothing at or after the
    /// querying step is returned.
    pub fn retrieve(&self, scope: &RetrievalScope, day: usize, step: usize) -> Vec<&MemoryEntry> {
        let lo = step.saturating_sub(scope.window);
        let mut out: Vec<&MemoryEntry> = Vec::new();
        if self.kind == MemoryKind::Ref && scope.include_yesterday_reflection {
            if let Some(prev) = self
                .entries
                .iter()
                .filter(|e| e.day < day)
                .map(|e| e.day)
                .max()
            {
                out.extend(self.entries.iter().filter(|e| e.day == prev));
            }
        }
        out.extend(self.entries.iter().filter(|e| {
            e.day == day && matches!(e.step, Some(s) if s >= lo && s < step)
        }));
        if out.len() > scope.max_entries {
            out.drain(..out.len() - scope.max_entries);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let io = |source| MemoryError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| io(std::io::Error::other(e)))?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(kind: MemoryKind, path: &Path) -> Result<Self, MemoryError> {
        let io = |source| MemoryError::Io { path: path.to_path_buf(), source };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut store = MemoryStore::new(kind);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry =
                serde_json::from_str(&line).map_err(|e| MemoryError::CorruptLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if entry.kind != kind || entry.payload.kind() != kind {
                return Err(MemoryError::CorruptLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("entry kind {} in {} store", entry.kind, kind),
                });
            }
            store.next_seq = store.next_seq.max(entry.seq + 1);
            store.entries.push(entry);
        }
        Ok(store)
    }
}

/// The three stores an agent keeps, with directory persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub env: MemoryStore,
    pub bid: MemoryStore,
    pub reflections: MemoryStore,
}

fn store_file(dir: &Path, kind: MemoryKind) -> PathBuf {
    dir.join(format!("memory_{kind}.jsonl"))
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryBank {
    pub fn new() -> Self {
        MemoryBank {
            env: MemoryStore::new(MemoryKind::Env),
            bid: MemoryStore::new(MemoryKind::Bid),
            reflections: MemoryStore::new(MemoryKind::Ref),
        }
    }

    pub fn store(&self, kind: MemoryKind) -> &MemoryStore {
        match kind {
            MemoryKind::Env => &self.env,
            MemoryKind::Bid => &self.bid,
            MemoryKind::Ref => &self.reflections,
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), MemoryError> {
        for kind in [MemoryKind::Env, MemoryKind::Bid, MemoryKind::Ref] {
            self.store(kind).save(&store_file(dir, kind))?;
        }
        Ok(())
    }

    /// Loads the three stores; a missing file is an empty store.
    pub fn load_dir(dir: &Path) -> Result<Self, MemoryError> {
        let mut bank = MemoryBank::new();
        for kind in [MemoryKind::Env, MemoryKind::Bid, MemoryKind::Ref] {
            let path = store_file(dir, kind);
            if path.exists() {
                let store = MemoryStore::load(kind, &path)?;
                match kind {
                    MemoryKind::Env => bank.env = store,
                    MemoryKind::Bid => bank.bid = store,
                    MemoryKind::Ref => bank.reflections = store,
                }
            }
        }
        Ok(bank)
    }
}
