//! Keyed persistence for reviews, extractions and summaries.
//!
//! [`FileStore`] keeps everything in memory and appends each write to a
//! JSON-lines journal, fsynced before the write becomes visible. Replay
//! ignores a torn final line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExtractionResult, RefreshState, Review, SummaryRecord};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("review {0} already exists")]
    DuplicateReview(String),
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("store {path} is corrupt at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Storage contract used by the orchestrator and the API.
pub trait Store: Send + Sync {
    /// Fails on a duplicate `review_id`.
    fn put_review(&self, review: &Review) -> Result<(), StoreError>;
    /// Reviews of a product in insertion order.
    fn get_reviews(&self, product_id: &str) -> Vec<Review>;
    fn review_count(&self, product_id: &str) -> u32;
    fn put_extraction(&self, result: &ExtractionResult) -> Result<(), StoreError>;
    fn get_extraction(&self, review_id: &str) -> Option<ExtractionResult>;
    fn get_summary(&self, product_id: &str) -> Option<SummaryRecord>;
    /// Stores the summary and its refresh baseline as one write.
    fn commit_summary(&self, record: &SummaryRecord, baseline: u32) -> Result<(), StoreError>;
    fn get_refresh_state(&self, product_id: &str) -> RefreshState;
    fn list_products(&self) -> Vec<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Review(Review),
    Extraction(ExtractionResult),
    Summary { record: SummaryRecord, baseline: u32 },
}

#[derive(Debug, Default)]
struct State {
    reviews: BTreeMap<String, Vec<Review>>,
    review_ids: HashSet<String>,
    extractions: HashMap<String, ExtractionResult>,
    summaries: BTreeMap<String, (SummaryRecord, u32)>,
}

impl State {
    fn check(&self, entry: &Entry) -> Result<(), StoreError> {
        match entry {
            Entry::Review(r) if self.review_ids.contains(&r.review_id) => {
                Err(StoreError::DuplicateReview(r.review_id.clone()))
            }
            _ => Ok(()),
        }
    }

    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::Review(r) => {
                self.review_ids.insert(r.review_id.clone());
                self.reviews.entry(r.product_id.clone()).or_default().push(r);
            }
            Entry::Extraction(e) => {
                self.extractions.insert(e.review_id.clone(), e);
            }
            Entry::Summary { record, baseline } => {
                self.summaries
                    .insert(record.product_id.clone(), (record, baseline));
            }
        }
    }

    fn refresh_state(&self, product_id: &str) -> RefreshState {
        RefreshState {
            product_id: product_id.to_string(),
            current_review_count: self.reviews.get(product_id).map_or(0, |v| v.len() as u32),
            count_at_last_summary: self.summaries.get(product_id).map(|(_, b)| *b),
        }
    }
}

/// Shared read side of both stores.
struct Inner {
    state: RwLock<State>,
}

impl Inner {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }
}

macro_rules! read_side {
    () => {
        fn get_reviews(&self, product_id: &str) -> Vec<Review> {
            self.inner
                .read()
                .reviews
                .get(product_id)
                .cloned()
                .unwrap_or_default()
        }

        fn review_count(&self, product_id: &str) -> u32 {
            self.inner.read().refresh_state(product_id).current_review_count
        }

        fn get_extraction(&self, review_id: &str) -> Option<ExtractionResult> {
            self.inner.read().extractions.get(review_id).cloned()
        }

        fn get_summary(&self, product_id: &str) -> Option<SummaryRecord> {
            self.inner.read().summaries.get(product_id).map(|(r, _)| r.clone())
        }

        fn get_refresh_state(&self, product_id: &str) -> RefreshState {
            self.inner.read().refresh_state(product_id)
        }

        fn list_products(&self) -> Vec<String> {
            self.inner.read().reviews.keys().cloned().collect()
        }

        fn put_review(&self, review: &Review) -> Result<(), StoreError> {
            self.write_entry(Entry::Review(review.clone()))
        }

        fn put_extraction(&self, result: &ExtractionResult) -> Result<(), StoreError> {
            self.write_entry(Entry::Extraction(result.clone()))
        }

        fn commit_summary(&self, record: &SummaryRecord, baseline: u32) -> Result<(), StoreError> {
            self.write_entry(Entry::Summary {
                record: record.clone(),
                baseline,
            })
        }
    };
}

/// Volatile store.
pub struct MemoryStore {
    inner: Inner,
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore {
            inner: Inner {
                state: RwLock::new(State::default()),
            },
        }
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn write_entry(&self, entry: Entry) -> Result<(), StoreError> {
        let mut state = self.inner.write();
        state.check(&entry)?;
        state.apply(entry);
        Ok(())
    }
}

impl Store for MemoryStore {
    read_side!();
}

/// Journal-backed durable store.
pub struct FileStore {
    inner: Inner,
    path: PathBuf,
    journal: Mutex<File>,
}

impl FileStore {
    /// Opens the journal at `path`, creating it if absent, and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut state = State::default();
        let mut valid_len: u64 = 0;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path).map_err(io_err)?);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io_err)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                match serde_json::from_str::<Entry>(line.trim_end()) {
                    Ok(entry) if complete => {
                        if state.check(&entry).is_ok() {
                            state.apply(entry);
                        }
                        valid_len += n as u64;
                    }
                    _ if line.trim().is_empty() && complete => valid_len += n as u64,
                    Err(e) if complete => {
                        // Only the final line may be torn.
                        let mut rest = String::new();
                        reader.read_line(&mut rest).map_err(io_err)?;
                        if !rest.is_empty() {
                            return Err(StoreError::Corrupt {
                                path,
                                line: lineno,
                                reason: e.to_string(),
                            });
                        }
                        tracing::warn!(path = %path.display(), line = lineno, "dropping torn journal record");
                        break;
                    }
                    _ => {
                        tracing::warn!(path = %path.display(), line = lineno, "dropping torn journal record");
                        break;
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        file.set_len(valid_len).map_err(io_err)?;
        Ok(FileStore {
            inner: Inner {
                state: RwLock::new(state),
            },
            path,
            journal: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_entry(&self, entry: Entry) -> Result<(), StoreError> {
        let mut state = self.inner.write();
        state.check(&entry)?;
        let mut line = serde_json::to_string(&entry).expect("store entries serialize");
        line.push('\n');
        let mut journal = self.journal.lock().unwrap_or_else(|e| e.into_inner());
        journal
            .write_all(line.as_bytes())
            .and_then(|_| journal.sync_data())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })?;
        state.apply(entry);
        Ok(())
    }
}

impl Store for FileStore {
    read_side!();
}
