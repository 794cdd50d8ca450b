//! Stage 4: aspect-guided prompt construction and length-checked generation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::exec::SharedClock;
use crate::gateway::{Gateway, GatewayError, TemplateId, TemplateSet};
use crate::model::{Review, SelectionResult, SummaryRecord, TARGET_LENGTH};

/// Accepted summary length in Unicode scalar values, inclusive.
pub const HARD_LENGTH: (usize, usize) = (250, 600);
/// Regenerations after the first out-of-range output.
pub const LENGTH_RETRIES: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SummarizationError {
    #[error("selection for product {0} is empty")]
    EmptySelection(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn char_count(text: &str) -> usize {
    text.chars().count()
}

pub fn length_ok(text: &str) -> bool {
    (HARD_LENGTH.0..=HARD_LENGTH.1).contains(&char_count(text))
}

/// The aspect sections block: one header per bucket, then its reviews.
///
/// Buckets keep selection order (aspect rank, then sentiment); reviews are
/// sorted by id and each appears once, under the first bucket holding it.
pub fn aspect_sections(selection: &SelectionResult, reviews: &[Review]) -> String {
    let by_id: HashMap<&str, &Review> = reviews.iter().map(|r| (r.review_id.as_str(), r)).collect();
    let selected: BTreeSet<&str> = selection
        .selected_review_ids
        .iter()
        .map(String::as_str)
        .collect();
    let mut placed: BTreeSet<&str> = BTreeSet::new();
    let mut out = String::new();
    for bucket in &selection.buckets {
        out.push_str(&format!(
            "### {} | {} | {} reviews\n",
            bucket.aspect, bucket.sentiment, bucket.count
        ));
        let mut ids: Vec<&str> = bucket.review_ids.iter().map(String::as_str).collect();
        ids.sort_unstable();
        for id in ids {
            if !selected.contains(id) || !placed.insert(id) {
                continue;
            }
            if let Some(review) = by_id.get(id) {
                let text = review.text.split_whitespace().collect::<Vec<_>>().join(" ");
                out.push_str(&format!("- [{id}] {text}\n"));
            }
        }
    }
    out
}

/// Renders the summarization prompt for a non-empty selection.
pub fn build_summary_prompt(
    templates: &TemplateSet,
    selection: &SelectionResult,
    reviews: &[Review],
) -> Result<String, SummarizationError> {
    if selection.is_empty() {
        return Err(SummarizationError::EmptySelection(selection.product_id.clone()));
    }
    let aspect_list = selection
        .selected_aspects
        .iter()
        .map(|a| a.aspect.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let bindings = BTreeMap::from([
        ("aspect_list", aspect_list),
        ("aspect_sections", aspect_sections(selection, reviews)),
    ]);
    Ok(templates.render(TemplateId::Summarization, &bindings)?)
}

#[derive(Clone)]
pub struct Summarizer {
    gateway: Arc<Gateway>,
    templates: Arc<TemplateSet>,
    clock: SharedClock,
}

impl Summarizer {
    pub fn new(gateway: Arc<Gateway>, templates: Arc<TemplateSet>, clock: SharedClock) -> Self {
        Summarizer {
            gateway,
            templates,
            clock,
        }
    }

    /// Generates a summary, regenerating up to [`LENGTH_RETRIES`] times while
    /// the output falls outside [`HARD_LENGTH`]. A final out-of-range output
    /// is kept with `length_ok = false`.
    pub fn generate_summary(
        &self,
        selection: &SelectionResult,
        reviews: &[Review],
        review_count: u32,
    ) -> Result<SummaryRecord, SummarizationError> {
        let prompt = build_summary_prompt(&self.templates, selection, reviews)?;
        let mut attempt = 0;
        let (text, model_id) = loop {
            let outcome = self
                .gateway
                .complete(&self.gateway.call(TemplateId::Summarization, prompt.clone()))?;
            let text = outcome.raw_text.trim().to_string();
            if length_ok(&text) || attempt == LENGTH_RETRIES {
                break (text, outcome.backend_id);
            }
            tracing::debug!(
                product_id = %selection.product_id,
                chars = char_count(&text),
                "summary outside length bounds; regenerating"
            );
            attempt += 1;
        };
        Ok(SummaryRecord {
            product_id: selection.product_id.clone(),
            length_ok: length_ok(&text),
            summary_text: text,
            target_length: TARGET_LENGTH,
            aspects_used: selection.selected_aspects.clone(),
            review_count_at_generation: review_count,
            generated_at: self.clock.now(),
            model_id,
        })
    }
}
