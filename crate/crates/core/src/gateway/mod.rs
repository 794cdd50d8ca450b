//! Uniform contract for every LLM call the pipeline makes.
//!
//! A [`Gateway`] wraps a [`Backend`] with prompt validation, bounded
//! concurrency, retries with exponential backoff, and structured-output
//! parsing. Backends only move text; they know nothing about schemas.

mod http;
mod mock;
mod parse;
mod template;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use http::{HttpBackend, API_KEY_ENV};
pub use mock::{MockBackend, MockRules};
pub use parse::{parse_structured, OutputSchema, Payload};
pub use template::{PromptTemplate, TemplateId, TemplateSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("template {template} has no binding for `{name}`")]
    MissingBinding { template: TemplateId, name: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last_error}")]
    ExhaustedRetries { attempts: u32, last_error: String },
    #[error("timed out on all {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("malformed model output: {reason}")]
    MalformedOutput { reason: String },
}

/// Failure of a single dispatch, as reported by a backend.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("unauthorized: {0}")]
    Auth(String),
}

/// Something that turns a rendered prompt into raw model text.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn dispatch(
        &self,
        template: TemplateId,
        prompt: &str,
        timeout: Duration,
    ) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub max_attempts: u32,
    pub timeout: Duration,
    /// Delay before the second attempt; doubles on each later attempt.
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_attempts: 3,
            timeout: Duration::from_secs(60),
            backoff_base: Duration::from_secs(1),
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmCall {
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    /// First attempt number to use, starting at 1.
    pub attempt: u32,
    pub max_attempts: u32,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmOutcome {
    pub raw_text: String,
    /// Present iff the raw text parsed against the template's output schema.
    pub parsed: Option<Payload>,
    pub backend_id: String,
    pub latency: Duration,
    pub attempts: u32,
}

/// Counting semaphore bounding in-flight dispatches.
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.cv.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: GatewayConfig,
    limiter: Limiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Self {
        let limiter = Limiter::new(config.max_in_flight);
        Gateway {
            backend,
            config,
            limiter,
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// A call with this gateway's default attempt budget and timeout.
    pub fn call(&self, template_id: TemplateId, rendered_prompt: String) -> LlmCall {
        LlmCall {
            template_id,
            rendered_prompt,
            attempt: 1,
            max_attempts: self.config.max_attempts,
            timeout: self.config.timeout,
        }
    }

    /// Dispatches `call`, retrying transport failures, rate limits and
    /// timeouts until `max_attempts` dispatches have been made.
    pub fn complete(&self, call: &LlmCall) -> Result<LlmOutcome, GatewayError> {
        if call.rendered_prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        if call.attempt == 0 || call.attempt > call.max_attempts {
            return Err(GatewayError::Config(format!(
                "attempt {} outside 1..={}",
                call.attempt, call.max_attempts
            )));
        }
        let started = Instant::now();
        let mut dispatched = 0;
        let mut only_timeouts = true;
        let mut last_error = String::new();
        for attempt in call.attempt..=call.max_attempts {
            if attempt > call.attempt {
                let exp = (attempt - call.attempt - 1).min(16);
                std::thread::sleep(self.config.backoff_base.saturating_mul(1 << exp));
            }
            let result = {
                let _permit = self.limiter.acquire();
                dispatched += 1;
                self.backend
                    .dispatch(call.template_id, &call.rendered_prompt, call.timeout)
            };
            match result {
                Ok(raw_text) => {
                    let parsed =
                        parse_structured(&raw_text, call.template_id.output_schema()).ok();
                    return Ok(LlmOutcome {
                        raw_text,
                        parsed,
                        backend_id: self.backend.id().to_string(),
                        latency: started.elapsed(),
                        attempts: dispatched,
                    });
                }
                Err(BackendError::Auth(msg)) => return Err(GatewayError::AuthFailure(msg)),
                Err(err) => {
                    tracing::debug!(template = %call.template_id, attempt, %err, "llm dispatch failed");
                    only_timeouts &= err == BackendError::Timeout;
                    last_error = err.to_string();
                }
            }
        }
        if only_timeouts {
            Err(GatewayError::Timeout {
                attempts: dispatched,
            })
        } else {
            Err(GatewayError::ExhaustedRetries {
                attempts: dispatched,
                last_error,
            })
        }
    }

    /// [`Gateway::complete`] followed by schema validation; a parse failure
    /// becomes [`GatewayError::MalformedOutput`].
    pub fn complete_structured(
        &self,
        template_id: TemplateId,
        rendered_prompt: String,
    ) -> Result<(Payload, LlmOutcome), GatewayError> {
        let outcome = self.complete(&self.call(template_id, rendered_prompt))?;
        match &outcome.parsed {
            Some(payload) => Ok((payload.clone(), outcome)),
            None => Err(parse_structured(&outcome.raw_text, template_id.output_schema())
                .expect_err("parsed is None only when parsing fails")),
        }
    }
}

/// Wraps a backend and counts dispatches per template.
pub struct CountingBackend<B> {
    inner: B,
    counts: [AtomicUsize; 3],
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            counts: Default::default(),
        }
    }

    pub fn count(&self, template: TemplateId) -> usize {
        self.counts[template as usize].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        TemplateId::ALL.into_iter().map(|t| self.count(t)).sum()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dispatch(
        &self,
        template: TemplateId,
        prompt: &str,
        timeout: Duration,
    ) -> Result<String, BackendError> {
        self.counts[template as usize].fetch_add(1, Ordering::SeqCst);
        self.inner.dispatch(template, prompt, timeout)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn dispatch(
        &self,
        template: TemplateId,
        prompt: &str,
        timeout: Duration,
    ) -> Result<String, BackendError> {
        (**self).dispatch(template, prompt, timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns scripted results in order, then repeats the last one.
    struct Scripted {
        script: Mutex<Vec<Result<String, BackendError>>>,
    }

    impl Scripted {
        fn new(mut script: Vec<Result<String, BackendError>>) -> Self {
            script.reverse();
            Scripted {
                script: Mutex::new(script),
            }
        }
    }

    impl Backend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }

        fn dispatch(&self, _: TemplateId, _: &str, _: Duration) -> Result<String, BackendError> {
            let mut script = self.script.lock().unwrap();
            if script.len() > 1 {
                script.pop().unwrap()
            } else {
                script[0].clone()
            }
        }
    }

    fn gateway(script: Vec<Result<String, BackendError>>) -> (Gateway, Arc<CountingBackend<Scripted>>) {
        let backend = Arc::new(CountingBackend::new(Scripted::new(script)));
        let config = GatewayConfig {
            backoff_base: Duration::ZERO,
            ..Default::default()
        };
        (Gateway::new(backend.clone(), config), backend)
    }

    #[test]
    fn retries_transport_errors_then_succeeds() {
        let (gw, counter) = gateway(vec![
            Err(BackendError::Transport("reset".into())),
            Err(BackendError::RateLimited),
            Ok("fine".into()),
        ]);
        let outcome = gw
            .complete(&gw.call(TemplateId::Summarization, "hello".into()))
            .unwrap();
        assert_eq!(outcome.raw_text, "fine");
        assert_eq!(outcome.attempts, 3);
        assert_eq!(outcome.parsed, Some(Payload::Text("fine".into())));
        assert_eq!(counter.count(TemplateId::Summarization), 3);
    }

    #[test]
    fn never_exceeds_max_attempts() {
        let (gw, counter) = gateway(vec![Err(BackendError::Transport("down".into()))]);
        let err = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "x".into()))
            .unwrap_err();
        assert!(matches!(err, GatewayError::ExhaustedRetries { attempts: 3, .. }));
        assert_eq!(counter.total(), 3);
    }

    #[test]
    fn distinct_timeout_and_auth_errors() {
        let (gw, counter) = gateway(vec![Err(BackendError::Timeout)]);
        let err = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "x".into()))
            .unwrap_err();
        assert_eq!(err, GatewayError::Timeout { attempts: 3 });
        assert_eq!(counter.total(), 3);

        let (gw, counter) = gateway(vec![Err(BackendError::Auth("bad key".into()))]);
        let err = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "x".into()))
            .unwrap_err();
        assert_eq!(err, GatewayError::AuthFailure("bad key".into()));
        assert_eq!(counter.total(), 1, "auth failures are not retried");
    }

    #[test]
    fn empty_prompt_rejected_before_dispatch() {
        let (gw, counter) = gateway(vec![Ok("x".into())]);
        let err = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "  \n".into()))
            .unwrap_err();
        assert_eq!(err, GatewayError::EmptyPrompt);
        assert_eq!(counter.total(), 0);
    }

    #[test]
    fn parsed_absent_iff_parse_fails() {
        let (gw, _) = gateway(vec![Ok(r#"{"aspects": "oops"}"#.into())]);
        let outcome = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "x".into()))
            .unwrap();
        assert!(outcome.parsed.is_none());
        let err = gw
            .complete_structured(TemplateId::AspectExtraction, "x".into())
            .unwrap_err();
        assert!(matches!(err, GatewayError::MalformedOutput { .. }));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Backend for Slow {
            fn id(&self) -> &str {
                "slow"
            }
            fn dispatch(&self, _: TemplateId, _: &str, _: Duration) -> Result<String, BackendError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok("ok".into())
            }
        }
        let backend = Arc::new(Slow {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Arc::new(Gateway::new(
            backend.clone(),
            GatewayConfig {
                max_in_flight: 3,
                ..Default::default()
            },
        ));
        let handles: Vec<_> = (0..12)
            .map(|_| {
                let gw = gw.clone();
                std::thread::spawn(move || {
                    gw.complete(&gw.call(TemplateId::Summarization, "p".into()))
                        .unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
    }
}
