//! Stage 2: aspect vocabulary consolidation.
//!
//! Frequent aspects keep their own name; rare ones are mapped to canonical
//! forms chosen by the model. Mappings are cached so an aspect is sent to the
//! model at most once over the lifetime of a map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, Payload, TemplateId, TemplateSet};
use crate::model::{normalize_aspect, AspectMention, ConsolidationMap, ExtractionResult};

/// Aspects per consolidation request.
pub const DEFAULT_BATCH_SIZE: usize = 100;

/// Threshold measured on the full production corpus. Desk-scale corpora
/// yield their own percentile value; pin this one via `pinned_threshold`
/// to reproduce production behaviour.
pub const PRODUCTION_THRESHOLD: u64 = 30;

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error("frequency table is empty; no threshold can be defined")]
    EmptyTable,
    #[error("percentile {0} must be in (0, 1]")]
    InvalidPercentile(f64),
    #[error("mapping store {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Occurrences of each normalized raw aspect across `results`.
pub fn build_frequency_table<'a, I>(results: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a ExtractionResult>,
{
    let mut table = BTreeMap::new();
    for result in results {
        for mention in &result.mentions {
            *table.entry(mention.aspect.clone()).or_insert(0) += 1;
        }
    }
    table
}

/// Nearest-rank percentile over the per-aspect frequencies: the value at
/// 1-indexed rank `ceil(percentile * n)` of the ascending sort.
pub fn compute_threshold(
    table: &BTreeMap<String, u64>,
    percentile: f64,
) -> Result<u64, ConsolidationError> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(ConsolidationError::InvalidPercentile(percentile));
    }
    if table.is_empty() {
        return Err(ConsolidationError::EmptyTable);
    }
    let mut freqs: Vec<u64> = table.values().copied().collect();
    freqs.sort_unstable();
    // Integer ceiling on a micro-unit scale; f64 products like 0.95 * n can
    // land just above an integer and push the rank up by one.
    const SCALE: u128 = 1_000_000;
    let p = (percentile * SCALE as f64).round() as u128;
    let n = freqs.len() as u128;
    let rank = (p * n).div_ceil(SCALE).clamp(1, n);
    Ok(freqs[rank as usize - 1])
}

/// Follows `start` through `entries` to a fixed point. Cycles resolve to
/// their lexicographically smallest member.
fn find_root(entries: &BTreeMap<String, String>, start: &str) -> String {
    let mut path: Vec<&str> = vec![start];
    let mut current = start;
    loop {
        match entries.get(current) {
            Some(next) if next != current => {
                if let Some(pos) = path.iter().position(|p| *p == next) {
                    return path[pos..].iter().min().unwrap().to_string();
                }
                path.push(next);
                current = next;
            }
            _ => return current.to_string(),
        }
    }
}

/// Collapses every chain so each entry points straight at a fixed point.
fn compress(map: &mut ConsolidationMap) {
    let roots: Vec<(String, String)> = map
        .entries
        .keys()
        .map(|k| (k.clone(), find_root(&map.entries, k)))
        .collect();
    for (_, root) in &roots {
        map.entries.insert(root.clone(), root.clone());
    }
    for (key, root) in roots {
        map.entries.insert(key, root);
    }
}

/// Records `raw -> canonical`, registering the canonical form as a fixed
/// point. Returns the keys whose entry changed.
fn record_mapping(map: &mut ConsolidationMap, raw: &str, canonical: &str) -> Vec<String> {
    let canonical = normalize_aspect(canonical).unwrap_or_else(|| raw.to_string());
    let mut changed = Vec::new();
    let target = if canonical == raw {
        raw.to_string()
    } else {
        if !map.entries.contains_key(&canonical) {
            map.entries.insert(canonical.clone(), canonical.clone());
            changed.push(canonical.clone());
        }
        find_root(&map.entries, &canonical)
    };
    if map.entries.get(raw) != Some(&target) {
        map.entries.insert(raw.to_string(), target);
        changed.push(raw.to_string());
    }
    changed
}

/// Mentions rewritten to canonical form. Mentions that collide within one
/// review merge: equal sentiments are kept, differing ones become mixed.
/// Aspects missing from `map` are left unchanged.
pub fn apply_mapping(results: &[ExtractionResult], map: &ConsolidationMap) -> Vec<ExtractionResult> {
    results
        .iter()
        .map(|r| apply_one(r, |a| map.get(a).unwrap_or(a).to_string()))
        .collect()
}

fn apply_one(result: &ExtractionResult, canonical: impl Fn(&str) -> String) -> ExtractionResult {
    let mut mentions: Vec<AspectMention> = Vec::with_capacity(result.mentions.len());
    for m in &result.mentions {
        let aspect = canonical(&m.aspect);
        match mentions.iter_mut().find(|x| x.aspect == aspect) {
            Some(existing) => existing.sentiment = existing.sentiment.merge(m.sentiment),
            None => mentions.push(AspectMention {
                aspect,
                sentiment: m.sentiment,
            }),
        }
    }
    ExtractionResult {
        mentions,
        ..result.clone()
    }
}

/// Talks to the model on behalf of a [`ConsolidationMap`].
#[derive(Clone)]
pub struct Consolidator {
    gateway: Arc<Gateway>,
    templates: Arc<TemplateSet>,
    batch_size: usize,
}

impl Consolidator {
    pub fn new(gateway: Arc<Gateway>, templates: Arc<TemplateSet>) -> Self {
        Consolidator {
            gateway,
            templates,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Renders the aspect list block, one `- aspect` line per aspect.
    pub fn render_prompt(&self, aspects: &[String]) -> Result<String, GatewayError> {
        let list = aspects
            .iter()
            .map(|a| format!("- {a}"))
            .collect::<Vec<_>>()
            .join("\n");
        self.templates.render(
            TemplateId::AspectConsolidation,
            &BTreeMap::from([("aspects", list)]),
        )
    }

    /// One model call for `aspects` (at most `batch_size` of them).
    fn request(&self, aspects: &[String]) -> Result<BTreeMap<String, String>, GatewayError> {
        let prompt = self.render_prompt(aspects)?;
        let (payload, _) = self
            .gateway
            .complete_structured(TemplateId::AspectConsolidation, prompt)?;
        let Payload::Mappings(pairs) = payload else {
            unreachable!("consolidation template parses to mappings");
        };
        Ok(pairs
            .into_iter()
            .filter_map(|(raw, canonical)| Some((normalize_aspect(&raw)?, canonical)))
            .collect())
    }

    /// Applies one request's outcome to `map`. Aspects the model failed on
    /// or skipped map to themselves and are flagged as pending.
    fn absorb(
        map: &mut ConsolidationMap,
        asked: &[String],
        response: Result<BTreeMap<String, String>, GatewayError>,
    ) -> Vec<String> {
        let mut changed = Vec::new();
        match response {
            Ok(mapping) => {
                for raw in asked {
                    match mapping.get(raw) {
                        Some(canonical) => {
                            map.pending.remove(raw);
                            changed.extend(record_mapping(map, raw, canonical));
                        }
                        None => {
                            map.pending.insert(raw.clone());
                            changed.extend(record_mapping(map, raw, raw));
                        }
                    }
                }
            }
            Err(err) => {
                tracing::warn!(%err, aspects = asked.len(), "consolidation request failed; using identity");
                for raw in asked {
                    map.pending.insert(raw.clone());
                    changed.extend(record_mapping(map, raw, raw));
                }
            }
        }
        changed
    }

    /// Fits `map` on a batch's frequency table.
    ///
    /// Aspects at or above `map.threshold` map to themselves. Rare aspects
    /// that are not cached yet (plus any pending ones) are consolidated by
    /// the model in requests of at most `batch_size` aspects.
    pub fn consolidate_batch(
        &self,
        table: &BTreeMap<String, u64>,
        mut map: ConsolidationMap,
    ) -> ConsolidationMap {
        for (aspect, count) in table {
            *map.frequency.entry(aspect.clone()).or_insert(0) += count;
        }
        let mut to_ask: BTreeSet<String> = map.pending.clone();
        for (aspect, count) in table {
            if *count >= map.threshold {
                map.entries.insert(aspect.clone(), aspect.clone());
                map.pending.remove(aspect);
                to_ask.remove(aspect);
            } else if !map.entries.contains_key(aspect) {
                to_ask.insert(aspect.clone());
            }
        }
        let to_ask: Vec<String> = to_ask.into_iter().collect();
        for chunk in to_ask.chunks(self.batch_size) {
            let response = self.request(chunk);
            Self::absorb(&mut map, chunk, response);
        }
        // Frequent aspects are fixed points regardless of what the model said.
        for (aspect, count) in table {
            if *count >= map.threshold {
                map.entries.insert(aspect.clone(), aspect.clone());
            }
        }
        compress(&mut map);
        map.version += 1;
        map
    }

    /// Canonical form of `aspect`; cached entries cost no model call.
    pub fn resolve(&self, aspect: &str, map: &mut ConsolidationMap) -> String {
        self.resolve_many([aspect], map);
        map.get(aspect).unwrap_or(aspect).to_string()
    }

    /// Ensures every aspect has an entry, asking the model only for unseen
    /// ones. Returns the keys whose entries changed.
    pub fn resolve_many<'a, I>(&self, aspects: I, map: &mut ConsolidationMap) -> Vec<String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let unseen: Vec<String> = aspects
            .into_iter()
            .filter(|a| !map.entries.contains_key(*a))
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut changed = Vec::new();
        for chunk in unseen.chunks(self.batch_size) {
            let response = self.request(chunk);
            changed.extend(Self::absorb(map, chunk, response));
        }
        changed
    }
}

/// Append-only `raw<TAB>canonical<TAB>version` mapping log.
pub struct MappingLog {
    path: PathBuf,
    file: File,
}

impl MappingLog {
    /// Opens (or creates) the log and loads its entries; the last record for
    /// a raw aspect wins. The file is compacted on load.
    pub fn open(path: &Path) -> Result<(MappingLog, ConsolidationMap), ConsolidationError> {
        let io_err = |source| ConsolidationError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut map = ConsolidationMap::default();
        match File::open(path) {
            Ok(file) => {
                for (lineno, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(io_err)?;
                    let fields: Vec<&str> = line.split('\t').collect();
                    let parsed = match fields[..] {
                        [raw, canonical, version] => version
                            .parse::<u64>()
                            .ok()
                            .zip(normalize_aspect(raw))
                            .zip(normalize_aspect(canonical)),
                        _ => None,
                    };
                    match parsed {
                        Some(((version, raw), canonical)) => {
                            map.version = map.version.max(version);
                            map.entries.insert(raw, canonical);
                        }
                        None if line.trim().is_empty() => {}
                        None => tracing::warn!(
                            path = %path.display(),
                            line = lineno + 1,
                            "skipping malformed mapping record"
                        ),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(e)),
        }
        let targets: Vec<String> = map.entries.values().cloned().collect();
        for t in targets {
            map.entries.entry(t.clone()).or_insert(t);
        }
        compress(&mut map);
        let mut log = MappingLog {
            path: path.to_path_buf(),
            file: OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err)?,
        };
        log.rewrite(&map)?;
        Ok((log, map))
    }

    fn io_err(&self, source: std::io::Error) -> ConsolidationError {
        ConsolidationError::Io {
            path: self.path.clone(),
            source,
        }
    }

    pub fn append<'a, I>(&mut self, records: I, version: u64) -> Result<(), ConsolidationError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut buf = String::new();
        for (raw, canonical) in records {
            buf.push_str(&format!("{raw}\t{canonical}\t{version}\n"));
        }
        if buf.is_empty() {
            return Ok(());
        }
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| self.io_err(e))
    }

    /// Replaces the file with one record per entry.
    pub fn rewrite(&mut self, map: &ConsolidationMap) -> Result<(), ConsolidationError> {
        let tmp = self.path.with_extension("tmp");
        let mut body = String::new();
        for (raw, canonical) in &map.entries {
            body.push_str(&format!("{raw}\t{canonical}\t{}\n", map.version));
        }
        std::fs::write(&tmp, body)
            .and_then(|_| std::fs::rename(&tmp, &self.path))
            .map_err(|e| self.io_err(e))?;
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| self.io_err(e))?;
        Ok(())
    }
}

/// Shared, optionally persistent mapping cache.
///
/// Lookups of cached aspects take a read lock only. Insertion of unseen
/// aspects goes through a single writer, so concurrent resolves of the same
/// new aspect still cost one model call.
pub struct MappingCache {
    map: RwLock<ConsolidationMap>,
    writer: Mutex<Option<MappingLog>>,
    consolidator: Consolidator,
}

impl MappingCache {
    pub fn new(consolidator: Consolidator, map: ConsolidationMap) -> Self {
        MappingCache {
            map: RwLock::new(map),
            writer: Mutex::new(None),
            consolidator,
        }
    }

    /// Loads the cache from a mapping log at `path`.
    pub fn open(
        consolidator: Consolidator,
        path: &Path,
        threshold: u64,
    ) -> Result<Self, ConsolidationError> {
        let (log, mut map) = MappingLog::open(path)?;
        map.threshold = threshold;
        Ok(MappingCache {
            map: RwLock::new(map),
            writer: Mutex::new(Some(log)),
            consolidator,
        })
    }

    pub fn snapshot(&self) -> ConsolidationMap {
        self.map.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn lookup(&self, aspect: &str) -> Option<String> {
        self.map
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(aspect)
            .map(str::to_string)
    }

    pub fn resolve(&self, aspect: &str) -> Result<String, ConsolidationError> {
        if let Some(c) = self.lookup(aspect) {
            return Ok(c);
        }
        self.resolve_all([aspect])?;
        Ok(self.lookup(aspect).unwrap_or_else(|| aspect.to_string()))
    }

    /// Resolves every unseen aspect, batching model calls.
    pub fn resolve_all<'a, I>(&self, aspects: I) -> Result<(), ConsolidationError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let candidates: BTreeSet<&str> = {
            let map = self.map.read().unwrap_or_else(|e| e.into_inner());
            aspects
                .into_iter()
                .filter(|a| !map.entries.contains_key(*a))
                .collect()
        };
        if candidates.is_empty() {
            return Ok(());
        }
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        // Work on a private copy of just the relevant state so readers are
        // not blocked during model calls.
        let mut scratch = {
            let map = self.map.read().unwrap_or_else(|e| e.into_inner());
            let unseen: Vec<&str> = candidates
                .iter()
                .copied()
                .filter(|a| !map.entries.contains_key(*a))
                .collect();
            if unseen.is_empty() {
                return Ok(());
            }
            (unseen, map.clone())
        };
        let (unseen, ref mut working) = scratch;
        let changed = self.consolidator.resolve_many(unseen, working);
        let records: Vec<(String, String)> = changed
            .iter()
            .filter_map(|k| working.entries.get(k).map(|c| (k.clone(), c.clone())))
            .collect();
        if let Some(log) = writer.as_mut() {
            log.append(
                records.iter().map(|(r, c)| (r.as_str(), c.as_str())),
                working.version,
            )?;
        }
        let mut map = self.map.write().unwrap_or_else(|e| e.into_inner());
        for (raw, canonical) in records {
            map.entries.insert(raw, canonical);
        }
        map.pending.extend(working.pending.iter().cloned());
        Ok(())
    }

    /// Fits the cache on a frequency table and persists the result.
    pub fn consolidate_batch(&self, table: &BTreeMap<String, u64>) -> Result<(), ConsolidationError> {
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot();
        let updated = self.consolidator.consolidate_batch(table, current);
        if let Some(log) = writer.as_mut() {
            log.rewrite(&updated)?;
        }
        *self.map.write().unwrap_or_else(|e| e.into_inner()) = updated;
        Ok(())
    }

    pub fn set_threshold(&self, threshold: u64) {
        self.map.write().unwrap_or_else(|e| e.into_inner()).threshold = threshold;
    }

    /// Canonicalizes `results`, resolving unseen aspects on demand.
    pub fn apply(&self, results: &[ExtractionResult]) -> Result<Vec<ExtractionResult>, ConsolidationError> {
        self.resolve_all(
            results
                .iter()
                .flat_map(|r| r.mentions.iter().map(|m| m.aspect.as_str())),
        )?;
        let map = self.map.read().unwrap_or_else(|e| e.into_inner());
        Ok(apply_mapping(results, &map))
    }

    /// Canonicalizes with cached entries only; never calls the model.
    pub fn apply_cached(&self, results: &[ExtractionResult]) -> Vec<ExtractionResult> {
        let map = self.map.read().unwrap_or_else(|e| e.into_inner());
        apply_mapping(results, &map)
    }
}
