//! Released-table formats and corpus statistics.
//!
//! Reviews table columns: `review_id, product_id, review_text, aspects`, with
//! optional `created_at, verified_purchaser, language`. `aspects` holds a
//! JSON array of `{aspect, sentiment}` objects; the key names are set by
//! [`AspectSchema`]. Summaries table columns: `product_id, product_class,
//! summary`. Files ending in `.jsonl` or `.ndjson` hold one JSON object per
//! line with the same fields; anything else is read as CSV.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::exec::{fold_merge, Execution};
use crate::model::{normalize_aspect, ExtractionResult, Review, Sentiment};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Key names inside the aspects JSON field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectSchema {
    pub column: String,
    pub aspect_key: String,
    pub sentiment_key: String,
}

impl Default for AspectSchema {
    fn default() -> Self {
        AspectSchema {
            column: "aspects".into(),
            aspect_key: "aspect".into(),
            sentiment_key: "sentiment".into(),
        }
    }
}

/// One aspect mention exactly as it appears in a table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMention {
    pub aspect: String,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewRow {
    pub review: Review,
    pub mentions: Vec<TableMention>,
}

impl ReviewRow {
    /// The row's mentions as a normalized extraction result.
    pub fn extraction(&self, model_id: &str) -> ExtractionResult {
        ExtractionResult::new(
            self.review.review_id.clone(),
            self.mentions.iter().map(|m| (m.aspect.as_str(), m.sentiment)),
            model_id,
            self.review.created_at,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub product_id: String,
    pub product_class: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejected {
    /// 1-indexed data row (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub rejects: Vec<Rejected>,
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson")
    )
}

/// Raw rows as column-name maps, independent of file format.
type RawRow = Result<HashMap<String, Value>, String>;

fn read_rows(path: &Path, required: &[&str]) -> Result<Vec<RawRow>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    if is_jsonl(path) {
        let mut rows = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(match serde_json::from_str::<Map<String, Value>>(&line) {
                Ok(map) => Ok(map.into_iter().collect()),
                Err(e) => Err(format!("invalid JSON: {e}")),
            });
        }
        return Ok(rows);
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for col in required {
        if !headers.iter().any(|h| h == col) {
            return Err(DatasetError::Schema {
                path: path.to_path_buf(),
                message: format!("missing required column {col:?}"),
            });
        }
    }
    Ok(reader
        .records()
        .map(|record| match record {
            Ok(rec) if rec.len() != headers.len() => Err(format!(
                "expected {} fields, found {}",
                headers.len(),
                rec.len()
            )),
            Ok(rec) => Ok(headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.clone(), Value::String(v.to_string())))
                .collect()),
            Err(e) => Err(e.to_string()),
        })
        .collect())
}

fn text_field(row: &HashMap<String, Value>, key: &str) -> Result<Option<String>, String> {
    match row.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(format!("{key} must be a string, found {other}")),
    }
}

fn required_text(row: &HashMap<String, Value>, key: &str) -> Result<String, String> {
    text_field(row, key)?.ok_or_else(|| format!("missing {key}"))
}

fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(DateTime::<Utc>::UNIX_EPOCH);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc())
        .map_err(|_| format!("unparseable created_at {raw:?}"))
}

fn parse_mentions(value: Option<&Value>, schema: &AspectSchema) -> Result<Vec<TableMention>, String> {
    let parsed;
    let items = match value {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::String(s)) if s.trim().is_empty() => return Ok(Vec::new()),
        Some(Value::String(s)) => {
            parsed = serde_json::from_str::<Value>(s).map_err(|e| format!("aspects field: {e}"))?;
            &parsed
        }
        Some(v) => v,
    };
    let Value::Array(items) = items else {
        return Err("aspects field must be a JSON array".into());
    };
    items
        .iter()
        .map(|item| {
            let aspect = item
                .get(&schema.aspect_key)
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| format!("aspect entry without {:?}", schema.aspect_key))?;
            let sentiment = item
                .get(&schema.sentiment_key)
                .and_then(Value::as_str)
                .ok_or_else(|| format!("aspect entry without {:?}", schema.sentiment_key))?
                .parse::<Sentiment>()
                .map_err(|e| e.to_string())?;
            Ok(TableMention {
                aspect: aspect.to_string(),
                sentiment,
            })
        })
        .collect()
}

fn parse_review_row(row: &HashMap<String, Value>, schema: &AspectSchema) -> Result<ReviewRow, String> {
    let created_at = parse_timestamp(&text_field(row, "created_at")?.unwrap_or_default())?;
    let mut review = Review::new(
        required_text(row, "review_id")?,
        required_text(row, "product_id")?,
        required_text(row, "review_text")?,
        created_at,
    )
    .map_err(|e| e.to_string())?;
    review.verified_purchaser = match row.get("verified_purchaser") {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "" => None,
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            other => return Err(format!("verified_purchaser {other:?} is not a boolean")),
        },
        Some(other) => return Err(format!("verified_purchaser {other} is not a boolean")),
    };
    review.language = text_field(row, "language")?.filter(|l| !l.trim().is_empty());
    let mentions = parse_mentions(row.get(&schema.column), schema)?;
    Ok(ReviewRow { review, mentions })
}

/// Loads a reviews table. Bad rows and repeated review ids are rejected,
/// not fatal.
pub fn load_reviews_table(path: &Path, schema: &AspectSchema) -> Result<Loaded<ReviewRow>, DatasetError> {
    let required = ["review_id", "product_id", "review_text", schema.column.as_str()];
    let mut loaded = Loaded {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (i, row) in read_rows(path, &required)?.into_iter().enumerate() {
        match row.and_then(|r| parse_review_row(&r, schema)) {
            Ok(rec) if !seen.insert(rec.review.review_id.clone()) => loaded.rejects.push(Rejected {
                row: i + 1,
                reason: format!("duplicate review_id {}", rec.review.review_id),
            }),
            Ok(rec) => loaded.records.push(rec),
            Err(reason) => loaded.rejects.push(Rejected { row: i + 1, reason }),
        }
    }
    Ok(loaded)
}

/// Loads a summaries table; a repeated product id rejects the later row.
pub fn load_summaries_table(path: &Path) -> Result<Loaded<SummaryRow>, DatasetError> {
    let mut loaded = Loaded {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    let mut seen = HashSet::new();
    let rows = read_rows(path, &["product_id", "product_class", "summary"])?;
    for (i, row) in rows.into_iter().enumerate() {
        let parsed = row.and_then(|r| {
            let rec = SummaryRow {
                product_id: required_text(&r, "product_id")?,
                product_class: required_text(&r, "product_class")?,
                summary: required_text(&r, "summary")?,
            };
            if rec.product_id.trim().is_empty() {
                return Err("empty product_id".to_string());
            }
            Ok(rec)
        });
        match parsed {
            Ok(rec) if !seen.insert(rec.product_id.clone()) => loaded.rejects.push(Rejected {
                row: i + 1,
                reason: format!("duplicate product_id {}", rec.product_id),
            }),
            Ok(rec) => loaded.records.push(rec),
            Err(reason) => loaded.rejects.push(Rejected { row: i + 1, reason }),
        }
    }
    Ok(loaded)
}

fn mentions_json(mentions: &[TableMention], schema: &AspectSchema) -> Value {
    Value::Array(
        mentions
            .iter()
            .map(|m| {
                let mut obj = Map::new();
                obj.insert(schema.aspect_key.clone(), Value::String(m.aspect.clone()));
                obj.insert(schema.sentiment_key.clone(), Value::String(m.sentiment.as_str().into()));
                Value::Object(obj)
            })
            .collect(),
    )
}

fn write_file(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<(), String>) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write(&mut file).map_err(|message| DatasetError::Schema {
        path: path.to_path_buf(),
        message,
    })?;
    file.flush().map_err(io_err)
}

pub fn write_reviews_table(path: &Path, rows: &[ReviewRow], schema: &AspectSchema) -> Result<(), DatasetError> {
    let jsonl = is_jsonl(path);
    write_file(path, |out| {
        let fields = |r: &ReviewRow| {
            [
                r.review.review_id.clone(),
                r.review.product_id.clone(),
                r.review.text.clone(),
                mentions_json(&r.mentions, schema).to_string(),
                r.review.created_at.to_rfc3339(),
                r.review.verified_purchaser.map(|b| b.to_string()).unwrap_or_default(),
                r.review.language.clone().unwrap_or_default(),
            ]
        };
        if jsonl {
            for r in rows {
                let mut obj = Map::new();
                obj.insert("review_id".into(), r.review.review_id.clone().into());
                obj.insert("product_id".into(), r.review.product_id.clone().into());
                obj.insert("review_text".into(), r.review.text.clone().into());
                obj.insert(schema.column.clone(), mentions_json(&r.mentions, schema));
                obj.insert("created_at".into(), r.review.created_at.to_rfc3339().into());
                if let Some(v) = r.review.verified_purchaser {
                    obj.insert("verified_purchaser".into(), v.into());
                }
                if let Some(l) = &r.review.language {
                    obj.insert("language".into(), l.clone().into());
                }
                writeln!(out, "{}", Value::Object(obj)).map_err(|e| e.to_string())?;
            }
            return Ok(());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "review_id",
            "product_id",
            "review_text",
            schema.column.as_str(),
            "created_at",
            "verified_purchaser",
            "language",
        ])
        .map_err(|e| e.to_string())?;
        for r in rows {
            w.write_record(fields(r)).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })
}

pub fn write_summaries_table(path: &Path, rows: &[SummaryRow]) -> Result<(), DatasetError> {
    let jsonl = is_jsonl(path);
    write_file(path, |out| {
        if jsonl {
            for r in rows {
                writeln!(out, "{}", serde_json::to_string(r).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
            }
            return Ok(());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["product_id", "product_class", "summary"])
            .map_err(|e| e.to_string())?;
        for r in rows {
            w.write_record([&r.product_id, &r.product_class, &r.summary])
                .map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })
}

/// Mention totals of one aspect, indexed by [`Sentiment::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AspectTally {
    pub count: u64,
    pub by_sentiment: [u64; 3],
}

/// Order-independent corpus aggregate. Aspects are grouped by their
/// normalized form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub aspects: BTreeMap<String, AspectTally>,
    pub review_count: u64,
    /// Sum of review lengths in Unicode scalar values.
    pub total_chars: u64,
    pub reviews_per_product: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectRow {
    pub aspect: String,
    pub count: u64,
    pub positive_pct: f64,
    pub negative_pct: f64,
    pub mixed_pct: f64,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        return 0.0;
    }
    (part as f64 * 10_000.0 / whole as f64).round() / 100.0
}

impl CorpusStats {
    fn add(mut self, row: &ReviewRow) -> Self {
        self.review_count += 1;
        self.total_chars += row.review.text.chars().count() as u64;
        *self
            .reviews_per_product
            .entry(row.review.product_id.clone())
            .or_insert(0) += 1;
        for m in &row.mentions {
            let Some(aspect) = normalize_aspect(&m.aspect) else {
                continue;
            };
            let tally = self.aspects.entry(aspect).or_default();
            tally.count += 1;
            tally.by_sentiment[m.sentiment.index()] += 1;
        }
        self
    }

    fn merge(mut self, other: CorpusStats) -> Self {
        self.review_count += other.review_count;
        self.total_chars += other.total_chars;
        for (p, n) in other.reviews_per_product {
            *self.reviews_per_product.entry(p).or_insert(0) += n;
        }
        for (a, t) in other.aspects {
            let mine = self.aspects.entry(a).or_default();
            mine.count += t.count;
            for i in 0..3 {
                mine.by_sentiment[i] += t.by_sentiment[i];
            }
        }
        self
    }

    pub fn distinct_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn product_count(&self) -> usize {
        self.reviews_per_product.len()
    }

    pub fn mean_review_length(&self) -> f64 {
        if self.review_count == 0 {
            0.0
        } else {
            self.total_chars as f64 / self.review_count as f64
        }
    }

    pub fn mean_reviews_per_product(&self) -> f64 {
        if self.reviews_per_product.is_empty() {
            0.0
        } else {
            self.review_count as f64 / self.reviews_per_product.len() as f64
        }
    }

    /// The `k` most mentioned aspects, by count then name, with sentiment
    /// shares rounded to two decimals.
    pub fn top(&self, k: usize) -> Vec<AspectRow> {
        let mut rows: Vec<(&String, &AspectTally)> = self.aspects.iter().collect();
        rows.sort_by(|a, b| b.1.count.cmp(&a.1.count).then_with(|| a.0.cmp(b.0)));
        rows.into_iter()
            .take(k)
            .map(|(aspect, t)| AspectRow {
                aspect: aspect.clone(),
                count: t.count,
                positive_pct: pct(t.by_sentiment[0], t.count),
                negative_pct: pct(t.by_sentiment[1], t.count),
                mixed_pct: pct(t.by_sentiment[2], t.count),
            })
            .collect()
    }

    /// Tab-separated top-`k` table followed by corpus averages.
    pub fn report(&self, k: usize) -> String {
        let mut out = String::from("Aspect\tCount\tPos.\tNeg.\tMix.\n");
        for r in self.top(k) {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                r.aspect, r.count, r.positive_pct, r.negative_pct, r.mixed_pct
            );
        }
        let _ = write!(
            out,
            "\nReviews\t{}\nProducts\t{}\nDistinct aspects\t{}\nMean review length\t{:.2}\nMean reviews per product\t{:.2}\n",
            self.review_count,
            self.product_count(),
            self.distinct_aspects(),
            self.mean_review_length(),
            self.mean_reviews_per_product()
        );
        out
    }
}

pub fn compute_corpus_stats(rows: &[ReviewRow], exec: Execution) -> CorpusStats {
    fold_merge(rows, exec, CorpusStats::default, CorpusStats::add, CorpusStats::merge)
}
