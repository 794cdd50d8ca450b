//! Stage 1: per-review aspect–sentiment extraction.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::exec::{map_ordered, Execution, SharedClock};
use crate::gateway::{Gateway, GatewayError, Payload, TemplateId, TemplateSet};
use crate::model::{ExtractionResult, Review};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("review {0} has no text")]
    EmptyReview(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionFailure {
    pub review_id: String,
    pub error: ExtractionError,
}

/// Results in input order (failed reviews omitted) plus the failures.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchExtraction {
    pub results: Vec<ExtractionResult>,
    pub failures: Vec<ExtractionFailure>,
}

#[derive(Clone)]
pub struct Extractor {
    gateway: Arc<Gateway>,
    templates: Arc<TemplateSet>,
    clock: SharedClock,
}

impl Extractor {
    pub fn new(gateway: Arc<Gateway>, templates: Arc<TemplateSet>, clock: SharedClock) -> Self {
        Extractor {
            gateway,
            templates,
            clock,
        }
    }

    /// Extracts up to five normalized, deduplicated mentions from one review.
    ///
    /// A malformed model reply gets one full retry before the review is
    /// reported as failed.
    pub fn extract_aspects(&self, review: &Review) -> Result<ExtractionResult, ExtractionError> {
        if review.text.trim().is_empty() {
            return Err(ExtractionError::EmptyReview(review.review_id.clone()));
        }
        let bindings = BTreeMap::from([("review_text", review.text.clone())]);
        let prompt = self
            .templates
            .render(TemplateId::AspectExtraction, &bindings)?;
        let mut retried = false;
        loop {
            match self
                .gateway
                .complete_structured(TemplateId::AspectExtraction, prompt.clone())
            {
                Ok((Payload::Mentions(mentions), outcome)) => {
                    return Ok(ExtractionResult::new(
                        review.review_id.clone(),
                        mentions.iter().map(|(a, s)| (a.as_str(), *s)),
                        outcome.backend_id,
                        self.clock.now(),
                    ));
                }
                Ok(_) => unreachable!("extraction template parses to mentions"),
                Err(GatewayError::MalformedOutput { .. }) if !retried => retried = true,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Extracts every review; per-review failures never abort the batch.
    /// Output order matches input order for any `parallelism`.
    pub fn extract_batch(&self, reviews: &[Review], parallelism: usize) -> BatchExtraction {
        let outcomes = map_ordered(reviews, Execution::with_threads(parallelism), |review| {
            self.extract_aspects(review)
        });
        let mut batch = BatchExtraction::default();
        for (review, outcome) in reviews.iter().zip(outcomes) {
            match outcome {
                Ok(result) => batch.results.push(result),
                Err(error) => {
                    tracing::warn!(review_id = %review.review_id, %error, "extraction failed");
                    batch.failures.push(ExtractionFailure {
                        review_id: review.review_id.clone(),
                        error,
                    });
                }
            }
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::FixedClock;
    use crate::gateway::{CountingBackend, GatewayConfig, MockBackend};
    use crate::model::{AspectMention, Sentiment};
    use chrono::{TimeZone, Utc};

    fn extractor(mock: MockBackend) -> (Extractor, Arc<CountingBackend<MockBackend>>) {
        let backend = Arc::new(CountingBackend::new(mock));
        let gateway = Arc::new(Gateway::new(backend.clone(), GatewayConfig::default()));
        let clock = Arc::new(FixedClock(Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap()));
        (
            Extractor::new(gateway, Arc::new(TemplateSet::builtin()), clock),
            backend,
        )
    }

    fn review(id: &str, text: &str) -> Review {
        Review::new(id, "p1", text, Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()).unwrap()
    }

    #[test]
    fn extracts_mock_pairs() {
        let (ex, _) = extractor(MockBackend::default());
        let result = ex
            .extract_aspects(&review("r1", "Beautiful color but assembly took forever"))
            .unwrap();
        assert_eq!(
            result.mentions,
            vec![
                AspectMention::new("color", Sentiment::Positive).unwrap(),
                AspectMention::new("assembly", Sentiment::Negative).unwrap(),
            ]
        );
        assert_eq!(result.model_id, "mock");
        let none = ex.extract_aspects(&review("r2", "It arrived on Tuesday.")).unwrap();
        assert!(none.mentions.is_empty());
    }

    #[test]
    fn malformed_output_retried_once_then_reported() {
        let (ex, counter) = extractor(MockBackend::default().with_poison("##"));
        let mut reviews: Vec<Review> = (0..100)
            .map(|i| review(&format!("r{i:03}"), "Great quality, sturdy frame"))
            .collect();
        reviews[37] = review("r037", "## nonsense");
        let batch = ex.extract_batch(&reviews, 8);
        assert_eq!(batch.results.len(), 99);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].review_id, "r037");
        assert!(matches!(
            batch.failures[0].error,
            ExtractionError::Gateway(GatewayError::MalformedOutput { .. })
        ));
        assert_eq!(counter.count(TemplateId::AspectExtraction), 101);
    }

    #[test]
    fn batch_order_and_parallelism_invariance() {
        let (ex, _) = extractor(MockBackend::default());
        let texts = [
            "Love the color",
            "hard assembly",
            "So comfortable but expensive",
            "nothing to say",
            "Shipping was slow, packaging damaged",
        ];
        let reviews: Vec<Review> = (0..100)
            .map(|i| review(&format!("r{i:03}"), texts[i % texts.len()]))
            .collect();
        let seq = ex.extract_batch(&reviews, 1);
        assert_eq!(seq.results.len(), 100);
        let ids: Vec<_> = seq.results.iter().map(|r| r.review_id.clone()).collect();
        let expected: Vec<_> = reviews.iter().map(|r| r.review_id.clone()).collect();
        assert_eq!(ids, expected);
        for p in [2, 8, 32] {
            assert_eq!(ex.extract_batch(&reviews, p), seq);
        }
        assert!(ex.extract_batch(&[], 4).results.is_empty());
    }
}
