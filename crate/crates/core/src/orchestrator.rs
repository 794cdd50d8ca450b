//! Per-product pipeline driver and summary trigger rules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{build_frequency_table, compute_threshold, MappingCache};
use crate::exec::{map_ordered, Execution, SharedClock};
use crate::extraction::Extractor;
use crate::model::{
    normalize_aspect, ExtractionResult, RankedAspect, RefreshState, Review, Sentiment,
    SummaryRecord,
};
use crate::selection::{
    build_profile, product_seed, select_reviews, top_aspects, SelectionParams, Weighting,
    WeightingMode, DEFAULT_HALF_LIFE_DAYS,
};
use crate::store::{Store, StoreError};
use crate::summarization::Summarizer;

/// Reviews per page of [`Orchestrator::filter_reviews`].
pub const PAGE_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerKind {
    None,
    InitialSummary,
    Refresh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub kind: TriggerKind,
    pub reason: String,
}

impl TriggerDecision {
    pub fn fires(&self) -> bool {
        self.kind != TriggerKind::None
    }
}

/// When summaries are created and refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerPolicy {
    pub min_reviews: u32,
    /// Refresh growth fraction in basis points, so thresholds are exact
    /// integer ceilings.
    pub refresh_bp: u32,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        TriggerPolicy {
            min_reviews: 10,
            refresh_bp: 1000,
        }
    }
}

impl TriggerPolicy {
    pub fn new(min_reviews: u32, refresh_fraction: f64) -> Self {
        TriggerPolicy {
            min_reviews,
            refresh_bp: (refresh_fraction * 10_000.0).round().max(0.0) as u32,
        }
    }

    /// New reviews needed after a summary at `baseline` to trigger a refresh.
    pub fn refresh_delta(&self, baseline: u32) -> u32 {
        (u64::from(baseline) * u64::from(self.refresh_bp)).div_ceil(10_000) as u32
    }
}

/// Counts one ingested review into `state` and decides whether the product
/// needs a first summary or a refresh.
pub fn on_review_ingested(state: &RefreshState, policy: &TriggerPolicy) -> (RefreshState, TriggerDecision) {
    let mut next = state.clone();
    next.current_review_count += 1;
    let count = next.current_review_count;
    let decision = match next.count_at_last_summary {
        None if count >= policy.min_reviews => TriggerDecision {
            kind: TriggerKind::InitialSummary,
            reason: format!("{count} reviews reached the minimum of {}", policy.min_reviews),
        },
        None => TriggerDecision {
            kind: TriggerKind::None,
            reason: format!("{count} of {} reviews needed for a first summary", policy.min_reviews),
        },
        Some(baseline) => {
            let needed = policy.refresh_delta(baseline);
            let grown = count.saturating_sub(baseline);
            if grown >= needed {
                TriggerDecision {
                    kind: TriggerKind::Refresh,
                    reason: format!("{grown} new reviews since the summary at {baseline} (needs {needed})"),
                }
            } else {
                TriggerDecision {
                    kind: TriggerKind::None,
                    reason: format!("{grown} of {needed} new reviews needed for a refresh"),
                }
            }
        }
    };
    (next, decision)
}

/// Tunables of [`Orchestrator`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub policy: TriggerPolicy,
    pub cap: usize,
    pub top_k: usize,
    pub seed: u64,
    pub sampling_mode: WeightingMode,
    pub half_life_days: f64,
    pub percentile: f64,
    /// Used instead of the percentile when set.
    pub pinned_threshold: Option<u64>,
    pub extraction_parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            policy: TriggerPolicy::default(),
            cap: 200,
            top_k: 5,
            seed: 42,
            sampling_mode: WeightingMode::Uniform,
            half_life_days: DEFAULT_HALF_LIFE_DAYS,
            percentile: 0.95,
            pinned_threshold: None,
            extraction_parallelism: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Precondition,
    Extraction,
    Consolidation,
    Selection,
    Summarization,
    Persistence,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Precondition => "precondition",
            Stage::Extraction => "extraction",
            Stage::Consolidation => "consolidation",
            Stage::Selection => "selection",
            Stage::Summarization => "summarization",
            Stage::Persistence => "persistence",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("pipeline for {product_id} failed at {stage}: {message}")]
pub struct PipelineError {
    pub product_id: String,
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    fn new(product_id: &str, stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError {
            product_id: product_id.to_string(),
            stage,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid review: {0}")]
    Invalid(#[from] crate::model::ModelError),
    #[error("review product {got} does not match {expected}")]
    ProductMismatch { expected: String, got: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("page numbers start at 1")]
    InvalidPage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReviewPage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub reviews: Vec<Review>,
}

/// Outcome of one product in [`Orchestrator::batch_run`].
#[derive(Debug)]
pub struct BatchItem {
    pub product_id: String,
    pub outcome: Result<SummaryRecord, PipelineError>,
}

type LockMap = Mutex<HashMap<String, Arc<Mutex<()>>>>;

fn product_lock(map: &LockMap, product_id: &str) -> Arc<Mutex<()>> {
    map.lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(product_id.to_string())
        .or_default()
        .clone()
}

pub struct Orchestrator {
    store: Arc<dyn Store>,
    extractor: Extractor,
    mappings: Arc<MappingCache>,
    summarizer: Summarizer,
    clock: SharedClock,
    config: PipelineConfig,
    ingest_locks: LockMap,
    run_locks: LockMap,
}

impl Orchestrator {
    pub fn new(
        store: Arc<dyn Store>,
        extractor: Extractor,
        mappings: Arc<MappingCache>,
        summarizer: Summarizer,
        clock: SharedClock,
        config: PipelineConfig,
    ) -> Self {
        Orchestrator {
            store,
            extractor,
            mappings,
            summarizer,
            clock,
            config,
            ingest_locks: Mutex::default(),
            run_locks: Mutex::default(),
        }
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.store
    }

    pub fn mappings(&self) -> &Arc<MappingCache> {
        &self.mappings
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Persists `review` and evaluates the trigger rules. The review is
    /// durable before the decision is returned.
    pub fn ingest(&self, review: &Review) -> Result<TriggerDecision, IngestError> {
        review.validate()?;
        let lock = product_lock(&self.ingest_locks, &review.product_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let before = self.store.get_refresh_state(&review.product_id);
        self.store.put_review(review)?;
        let (_, decision) = on_review_ingested(&before, &self.config.policy);
        Ok(decision)
    }

    /// True while a pipeline run for `product_id` holds its run lock.
    pub fn is_running(&self, product_id: &str) -> bool {
        product_lock(&self.run_locks, product_id).try_lock().is_err()
    }

    /// Runs the pipeline unless a run for the product is already in flight.
    pub fn try_run_pipeline(&self, product_id: &str) -> Option<Result<SummaryRecord, PipelineError>> {
        let lock = product_lock(&self.run_locks, product_id);
        let guard = lock.try_lock().ok()?;
        let out = self.run_locked(product_id);
        drop(guard);
        Some(out)
    }

    /// Runs all four stages for one product and commits the summary together
    /// with its refresh baseline. A failure leaves both untouched.
    pub fn run_pipeline(&self, product_id: &str) -> Result<SummaryRecord, PipelineError> {
        let lock = product_lock(&self.run_locks, product_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        self.run_locked(product_id)
    }

    fn run_locked(&self, product_id: &str) -> Result<SummaryRecord, PipelineError> {
        let reviews = self.store.get_reviews(product_id);
        let baseline = reviews.len() as u32;
        if baseline < self.config.policy.min_reviews {
            return Err(PipelineError::new(
                product_id,
                Stage::Precondition,
                format!(
                    "{baseline} stored reviews, at least {} required",
                    self.config.policy.min_reviews
                ),
            ));
        }
        let results = self.ensure_extractions(product_id, &reviews)?;
        let consolidated = self
            .mappings
            .apply(&results)
            .map_err(|e| PipelineError::new(product_id, Stage::Consolidation, e))?;
        let profile = build_profile(product_id, &consolidated);
        if profile.is_empty() {
            return Err(PipelineError::new(product_id, Stage::Selection, "no aspects mentioned"));
        }
        let params = self.selection_params();
        let selection = select_reviews(
            &profile,
            &consolidated,
            &reviews,
            &params,
            product_seed(self.config.seed, product_id),
        );
        if selection.is_empty() {
            return Err(PipelineError::new(product_id, Stage::Selection, "empty selection"));
        }
        let record = self
            .summarizer
            .generate_summary(&selection, &reviews, baseline)
            .map_err(|e| PipelineError::new(product_id, Stage::Summarization, e))?;
        self.store
            .commit_summary(&record, baseline)
            .map_err(|e| PipelineError::new(product_id, Stage::Persistence, e))?;
        tracing::info!(product_id, baseline, chars = record.summary_text.chars().count(), "summary committed");
        Ok(record)
    }

    fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            cap: self.config.cap,
            top_k: self.config.top_k,
            weighting: Weighting {
                mode: self.config.sampling_mode,
                half_life_days: self.config.half_life_days,
                reference_time: self.clock.now(),
            },
        }
    }

    /// Extractions for `reviews` in order, extracting only uncached ones.
    /// Reviews that fail extraction are skipped for this run.
    fn ensure_extractions(
        &self,
        product_id: &str,
        reviews: &[Review],
    ) -> Result<Vec<ExtractionResult>, PipelineError> {
        let missing: Vec<Review> = reviews
            .iter()
            .filter(|r| self.store.get_extraction(&r.review_id).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            let batch = self
                .extractor
                .extract_batch(&missing, self.config.extraction_parallelism);
            for result in &batch.results {
                self.store
                    .put_extraction(result)
                    .map_err(|e| PipelineError::new(product_id, Stage::Persistence, e))?;
            }
            if batch.results.is_empty() && missing.len() == reviews.len() {
                let first = batch
                    .failures
                    .first()
                    .map(|f| f.error.to_string())
                    .unwrap_or_default();
                return Err(PipelineError::new(product_id, Stage::Extraction, first));
            }
        }
        Ok(reviews
            .iter()
            .filter_map(|r| self.store.get_extraction(&r.review_id))
            .collect())
    }

    /// Extracts every product, fits the mapping on the global frequency
    /// table, then summarizes each product with enough reviews.
    pub fn batch_run(&self, products: Option<&[String]>) -> Result<Vec<BatchItem>, PipelineError> {
        let products: Vec<String> = match products {
            Some(p) => p.to_vec(),
            None => self.store.list_products(),
        };
        let mut all_results = Vec::new();
        for product_id in &products {
            let reviews = self.store.get_reviews(product_id);
            if reviews.is_empty() {
                continue;
            }
            match self.ensure_extractions(product_id, &reviews) {
                Ok(r) => all_results.extend(r),
                Err(e) if e.stage == Stage::Extraction => tracing::warn!(%e, "skipping product"),
                Err(e) => return Err(e),
            }
        }
        let table = build_frequency_table(&all_results);
        if !table.is_empty() {
            let threshold = match self.config.pinned_threshold {
                Some(t) => t,
                None => compute_threshold(&table, self.config.percentile)
                    .map_err(|e| PipelineError::new("*", Stage::Consolidation, e))?,
            };
            self.mappings.set_threshold(threshold);
            self.mappings
                .consolidate_batch(&table)
                .map_err(|e| PipelineError::new("*", Stage::Consolidation, e))?;
        }
        let eligible: Vec<String> = products
            .into_iter()
            .filter(|p| self.store.review_count(p) >= self.config.policy.min_reviews)
            .collect();
        let outcomes = map_ordered(&eligible, Execution::default(), |p| self.run_pipeline(p));
        Ok(eligible
            .into_iter()
            .zip(outcomes)
            .map(|(product_id, outcome)| BatchItem { product_id, outcome })
            .collect())
    }

    /// Consolidated extractions of a product's reviews, using cached
    /// mappings only.
    fn consolidated(&self, reviews: &[Review]) -> Vec<ExtractionResult> {
        let results: Vec<ExtractionResult> = reviews
            .iter()
            .filter_map(|r| self.store.get_extraction(&r.review_id))
            .collect();
        self.mappings.apply_cached(&results)
    }

    /// Top aspects with sentiment counts; `None` without extracted aspects.
    pub fn product_aspects(&self, product_id: &str) -> Option<Vec<RankedAspect>> {
        let reviews = self.store.get_reviews(product_id);
        let profile = build_profile(product_id, &self.consolidated(&reviews));
        (!profile.is_empty()).then(|| top_aspects(&profile, self.config.top_k))
    }

    /// Reviews whose consolidated mentions match the filter, newest first.
    /// `page` starts at 1.
    pub fn filter_reviews(
        &self,
        product_id: &str,
        aspect: Option<&str>,
        sentiment: Option<Sentiment>,
        page: usize,
    ) -> Result<ReviewPage, QueryError> {
        if page == 0 {
            return Err(QueryError::InvalidPage);
        }
        let reviews = self.store.get_reviews(product_id);
        let mut matching: Vec<Review> = if aspect.is_none() && sentiment.is_none() {
            reviews
        } else {
            let aspect = aspect.and_then(normalize_aspect);
            let mentions: BTreeMap<String, ExtractionResult> = self
                .consolidated(&reviews)
                .into_iter()
                .map(|r| (r.review_id.clone(), r))
                .collect();
            reviews
                .into_iter()
                .filter(|r| {
                    mentions.get(&r.review_id).is_some_and(|e| {
                        e.mentions.iter().any(|m| {
                            aspect.as_deref().is_none_or(|a| a == m.aspect)
                                && sentiment.is_none_or(|s| s == m.sentiment)
                        })
                    })
                })
                .collect()
        };
        matching.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| a.review_id.cmp(&b.review_id))
        });
        let total = matching.len();
        let reviews = matching
            .into_iter()
            .skip((page - 1) * PAGE_SIZE)
            .take(PAGE_SIZE)
            .collect();
        Ok(ReviewPage {
            page,
            page_size: PAGE_SIZE,
            total,
            reviews,
        })
    }
}
