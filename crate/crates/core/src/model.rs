//! Shared domain types.
//!
//! Everything here is an immutable value object. Mutation of persisted state
//! happens only through [`crate::store::Store`] implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum number of aspect mentions kept per review.
pub const MAX_MENTIONS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("review text is empty")]
    EmptyReviewText,
    #[error("review_id is empty")]
    EmptyReviewId,
    #[error("product_id is empty")]
    EmptyProductId,
    #[error("unknown sentiment `{0}`")]
    UnknownSentiment(String),
    #[error("unknown error label `{0}`")]
    UnknownLabel(String),
    #[error("annotation label set is empty")]
    EmptyLabelSet,
    #[error("NO_ERRORS cannot be combined with other labels")]
    NoErrorsNotExclusive,
}

/// Lowercases, trims and collapses internal whitespace runs to one space.
///
/// Returns `None` when nothing is left, which callers treat as a rejected
/// mention.
pub fn normalize_aspect(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// One customer review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub product_id: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified_purchaser: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl Review {
    pub fn new(
        review_id: impl Into<String>,
        product_id: impl Into<String>,
        text: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let review = Review {
            review_id: review_id.into(),
            product_id: product_id.into(),
            text: text.into(),
            created_at,
            verified_purchaser: None,
            language: None,
        };
        review.validate()?;
        Ok(review)
    }

    pub fn verified(mut self, verified: bool) -> Self {
        self.verified_purchaser = Some(verified);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.review_id.trim().is_empty() {
            return Err(ModelError::EmptyReviewId);
        }
        if self.product_id.trim().is_empty() {
            return Err(ModelError::EmptyProductId);
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyReviewText);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sentiment {
    Positive,
    Negative,
    Mixed,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Mixed => "mixed",
        }
    }

    /// Position in [`Sentiment::ALL`]; handy for fixed-size count arrays.
    pub fn index(self) -> usize {
        match self {
            Sentiment::Positive => 0,
            Sentiment::Negative => 1,
            Sentiment::Mixed => 2,
        }
    }

    /// Equal sentiments stay, differing ones become mixed.
    pub fn merge(self, other: Sentiment) -> Sentiment {
        if self == other {
            self
        } else {
            Sentiment::Mixed
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(Sentiment::Positive),
            "negative" | "neg" => Ok(Sentiment::Negative),
            "mixed" | "mix" => Ok(Sentiment::Mixed),
            _ => Err(ModelError::UnknownSentiment(s.to_string())),
        }
    }
}

impl Serialize for Sentiment {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Sentiment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectMention {
    pub aspect: String,
    pub sentiment: Sentiment,
}

impl AspectMention {
    /// Normalizes `raw`; `None` if the aspect is empty after normalization.
    pub fn new(raw: &str, sentiment: Sentiment) -> Option<Self> {
        normalize_aspect(raw).map(|aspect| AspectMention { aspect, sentiment })
    }
}

/// Normalizes, drops empty aspects, keeps the first occurrence of each
/// aspect and truncates to [`MAX_MENTIONS`].
pub fn clean_mentions<'a, I>(raw: I) -> Vec<AspectMention>
where
    I: IntoIterator<Item = (&'a str, Sentiment)>,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (aspect, sentiment) in raw {
        let Some(mention) = AspectMention::new(aspect, sentiment) else {
            continue;
        };
        if seen.insert(mention.aspect.clone()) {
            out.push(mention);
            if out.len() == MAX_MENTIONS {
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub review_id: String,
    pub mentions: Vec<AspectMention>,
    pub model_id: String,
    pub extracted_at: DateTime<Utc>,
}

impl ExtractionResult {
    pub fn new<'a, I>(
        review_id: impl Into<String>,
        raw_mentions: I,
        model_id: impl Into<String>,
        extracted_at: DateTime<Utc>,
    ) -> Self
    where
        I: IntoIterator<Item = (&'a str, Sentiment)>,
    {
        ExtractionResult {
            review_id: review_id.into(),
            mentions: clean_mentions(raw_mentions),
            model_id: model_id.into(),
            extracted_at,
        }
    }

    pub fn mentions_pair(&self, aspect: &str, sentiment: Option<Sentiment>) -> bool {
        self.mentions
            .iter()
            .any(|m| m.aspect == aspect && sentiment.is_none_or(|s| s == m.sentiment))
    }
}

/// Raw aspect → canonical aspect, with the fitting batch's frequencies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidationMap {
    pub entries: BTreeMap<String, String>,
    pub frequency: BTreeMap<String, u64>,
    pub threshold: u64,
    pub version: u64,
    /// Aspects whose consolidation call failed; they map to themselves until
    /// a later batch succeeds.
    #[serde(default)]
    pub pending: BTreeSet<String>,
}

impl ConsolidationMap {
    pub fn with_threshold(threshold: u64) -> Self {
        ConsolidationMap {
            threshold,
            ..Default::default()
        }
    }

    pub fn get(&self, aspect: &str) -> Option<&str> {
        self.entries.get(aspect).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct canonical aspects.
    pub fn canonical_set(&self) -> BTreeSet<&str> {
        self.entries.values().map(String::as_str).collect()
    }

    /// Every canonical aspect maps to itself.
    pub fn is_fixed_point_closed(&self) -> bool {
        self.entries
            .values()
            .all(|c| self.entries.get(c).is_some_and(|cc| cc == c))
    }
}

/// Per-product counts of reviews mentioning each (canonical aspect, sentiment).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProductAspectProfile {
    pub product_id: String,
    pub pair_counts: BTreeMap<(String, Sentiment), u32>,
    pub review_count: u32,
}

impl ProductAspectProfile {
    pub fn is_empty(&self) -> bool {
        self.pair_counts.is_empty()
    }

    /// Per-aspect counts indexed by [`Sentiment::index`].
    pub fn aspect_counts(&self) -> BTreeMap<&str, [u32; 3]> {
        let mut out: BTreeMap<&str, [u32; 3]> = BTreeMap::new();
        for ((aspect, sentiment), count) in &self.pair_counts {
            out.entry(aspect.as_str()).or_default()[sentiment.index()] += count;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentCounts {
    pub positive: u32,
    pub negative: u32,
    pub mixed: u32,
}

impl SentimentCounts {
    pub fn from_array(counts: [u32; 3]) -> Self {
        SentimentCounts {
            positive: counts[0],
            negative: counts[1],
            mixed: counts[2],
        }
    }

    pub fn get(&self, sentiment: Sentiment) -> u32 {
        match sentiment {
            Sentiment::Positive => self.positive,
            Sentiment::Negative => self.negative,
            Sentiment::Mixed => self.mixed,
        }
    }

    pub fn total(&self) -> u32 {
        self.positive + self.negative + self.mixed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedAspect {
    pub aspect: String,
    pub counts: SentimentCounts,
}

impl RankedAspect {
    pub fn total(&self) -> u32 {
        self.counts.total()
    }
}

/// Reviews supporting one (aspect, sentiment) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub aspect: String,
    pub sentiment: Sentiment,
    /// Number of the product's reviews mentioning the pair.
    pub count: u32,
    /// Reviews chosen for this pair, sorted by review_id.
    pub review_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub product_id: String,
    pub selected_aspects: Vec<RankedAspect>,
    pub buckets: Vec<Bucket>,
    pub selected_review_ids: Vec<String>,
    pub seed: u64,
}

impl SelectionResult {
    pub fn is_empty(&self) -> bool {
        self.selected_aspects.is_empty() || self.selected_review_ids.is_empty()
    }
}

/// Soft character-count target for generated summaries.
pub const TARGET_LENGTH: (usize, usize) = (300, 500);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub product_id: String,
    pub summary_text: String,
    pub target_length: (usize, usize),
    pub aspects_used: Vec<RankedAspect>,
    pub review_count_at_generation: u32,
    pub generated_at: DateTime<Utc>,
    pub model_id: String,
    pub length_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshState {
    pub product_id: String,
    pub current_review_count: u32,
    pub count_at_last_summary: Option<u32>,
}

impl RefreshState {
    pub fn new(product_id: impl Into<String>) -> Self {
        RefreshState {
            product_id: product_id.into(),
            current_review_count: 0,
            count_at_last_summary: None,
        }
    }

    pub fn has_summary(&self) -> bool {
        self.count_at_last_summary.is_some()
    }
}

/// The six-category human-evaluation error taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorLabel {
    NoErrors,
    ExaggerationUnderstatement,
    MinorMisrepresentation,
    MajorMisrepresentation,
    MinorOmission,
    MajorOmission,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 6] = [
        ErrorLabel::NoErrors,
        ErrorLabel::ExaggerationUnderstatement,
        ErrorLabel::MinorMisrepresentation,
        ErrorLabel::MajorMisrepresentation,
        ErrorLabel::MinorOmission,
        ErrorLabel::MajorOmission,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorLabel::NoErrors => "NO_ERRORS",
            ErrorLabel::ExaggerationUnderstatement => "EXAGGERATION_UNDERSTATEMENT",
            ErrorLabel::MinorMisrepresentation => "MINOR_MISREPRESENTATION",
            ErrorLabel::MajorMisrepresentation => "MAJOR_MISREPRESENTATION",
            ErrorLabel::MinorOmission => "MINOR_OMISSION",
            ErrorLabel::MajorOmission => "MAJOR_OMISSION",
        }
    }

    pub fn is_major(self) -> bool {
        matches!(
            self,
            ErrorLabel::ExaggerationUnderstatement
                | ErrorLabel::MajorMisrepresentation
                | ErrorLabel::MajorOmission
        )
    }

    pub fn is_minor(self) -> bool {
        matches!(
            self,
            ErrorLabel::MinorMisrepresentation | ErrorLabel::MinorOmission
        )
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorLabel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_uppercase();
        ErrorLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == key)
            .ok_or_else(|| ModelError::UnknownLabel(s.trim().to_string()))
    }
}

impl Serialize for ErrorLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ErrorLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A validated, non-empty set of error labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct LabelSet(BTreeSet<ErrorLabel>);

impl LabelSet {
    pub fn new<I: IntoIterator<Item = ErrorLabel>>(labels: I) -> Result<Self, ModelError> {
        let set: BTreeSet<ErrorLabel> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(ModelError::EmptyLabelSet);
        }
        if set.contains(&ErrorLabel::NoErrors) && set.len() > 1 {
            return Err(ModelError::NoErrorsNotExclusive);
        }
        Ok(LabelSet(set))
    }

    pub fn no_errors() -> Self {
        LabelSet(BTreeSet::from([ErrorLabel::NoErrors]))
    }

    pub fn contains(&self, label: ErrorLabel) -> bool {
        self.0.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = ErrorLabel> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Semicolon-separated label names, in a stable order.
    pub fn to_field(&self) -> String {
        self.0
            .iter()
            .map(|l| l.as_str())
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl FromStr for LabelSet {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let labels = s
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<ErrorLabel>, _>>()?;
        LabelSet::new(labels)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<ErrorLabel>::deserialize(deserializer)?;
        LabelSet::new(labels).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub product_id: String,
    pub annotator_id: String,
    pub labels: LabelSet,
    pub reason: String,
}
