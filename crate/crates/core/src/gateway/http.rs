//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, GatewayError, TemplateId};

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    id: String,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let model = model.into();
        HttpBackend {
            endpoint: endpoint.into(),
            id: format!("http:{model}"),
            model,
            api_key,
        }
    }

    /// Reads the credential from `LLM_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| GatewayError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(HttpBackend::new(endpoint, model, Some(key)))
    }

    fn agent(&self, timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dispatch(
        &self,
        _template: TemplateId,
        prompt: &str,
        timeout: Duration,
    ) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut request = self.agent(timeout).post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}"))),
            429 => return Err(BackendError::RateLimited),
            408 | 504 => return Err(BackendError::Timeout),
            _ => return Err(BackendError::Transport(format!("HTTP {status}"))),
        }
        let payload: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayConfig};
    use std::sync::Arc;

    /// Serves `responses` to successive connections and returns the endpoint.
    fn serve(responses: Vec<(u16, String)>) -> String {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut request_body = vec![0; content_length];
                reader.read_exact(&mut request_body).unwrap();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    #[test]
    fn reads_chat_completion_content() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "hi there"}}]});
        let endpoint = serve(vec![(200, body.to_string())]);
        let backend = HttpBackend::new(endpoint, "m", Some("k".into()));
        let text = backend
            .dispatch(TemplateId::Summarization, "p", Duration::from_secs(5))
            .unwrap();
        assert_eq!(text, "hi there");
    }

    #[test]
    fn maps_status_codes() {
        let endpoint = serve(vec![(401, "{}".into()), (429, "{}".into()), (500, "{}".into())]);
        let backend = HttpBackend::new(endpoint, "m", None);
        let call = || backend.dispatch(TemplateId::Summarization, "p", Duration::from_secs(5));
        assert!(matches!(call(), Err(BackendError::Auth(_))));
        assert_eq!(call(), Err(BackendError::RateLimited));
        assert!(matches!(call(), Err(BackendError::Transport(_))));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        // Port 9 on loopback: nothing listens there in the test environment.
        let backend = HttpBackend::new("http://127.0.0.1:9/v1/chat/completions", "m", None);
        let gw = Gateway::new(
            Arc::new(backend),
            GatewayConfig {
                backoff_base: Duration::ZERO,
                timeout: Duration::from_secs(2),
                ..Default::default()
            },
        );
        let err = gw
            .complete(&gw.call(TemplateId::AspectExtraction, "hello".into()))
            .unwrap_err();
        assert!(
            matches!(err, GatewayError::ExhaustedRetries { attempts: 3, .. }),
            "{err:?}"
        );
    }
}
