//! Structured-output parsing for LLM responses.

use serde_json::Value;

use super::{GatewayError, TemplateId};
use crate::model::Sentiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSchema {
    /// `{"aspects": [{"aspect": .., "sentiment": ..}]}`
    AspectMentions,
    /// `{"mappings": [{"aspect": .., "canonical": ..}]}` or a flat
    /// `{"raw": "canonical"}` object.
    AspectMappings,
    PlainText,
}

impl TemplateId {
    pub fn output_schema(self) -> OutputSchema {
        match self {
            TemplateId::AspectExtraction => OutputSchema::AspectMentions,
            TemplateId::AspectConsolidation => OutputSchema::AspectMappings,
            TemplateId::Summarization => OutputSchema::PlainText,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Raw, un-normalized aspect strings as returned by the model.
    Mentions(Vec<(String, Sentiment)>),
    Mappings(Vec<(String, String)>),
    Text(String),
}

fn malformed(reason: impl Into<String>) -> GatewayError {
    GatewayError::MalformedOutput {
        reason: reason.into(),
    }
}

/// Parses `raw_text` against `schema`.
///
/// JSON payloads that fail to parse as-is get one repair pass: markdown
/// fences and any prose around the outermost `{ ... }` are stripped.
pub fn parse_structured(raw_text: &str, schema: OutputSchema) -> Result<Payload, GatewayError> {
    if raw_text.trim().is_empty() {
        return Err(malformed("empty output"));
    }
    match schema {
        OutputSchema::PlainText => parse_text(raw_text),
        OutputSchema::AspectMentions => parse_mentions(&parse_json(raw_text)?),
        OutputSchema::AspectMappings => parse_mappings(&parse_json(raw_text)?),
    }
}

fn parse_json(raw: &str) -> Result<Value, GatewayError> {
    if let Ok(value) = serde_json::from_str::<Value>(raw.trim()) {
        return Ok(value);
    }
    let repaired = repair_json(raw).ok_or_else(|| malformed("no JSON object found"))?;
    serde_json::from_str::<Value>(repaired).map_err(|e| malformed(format!("invalid JSON: {e}")))
}

fn repair_json(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn field<'a>(obj: &'a Value, key: &str) -> Result<&'a str, GatewayError> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("missing string field `{key}`")))
}

fn parse_mentions(value: &Value) -> Result<Payload, GatewayError> {
    let items = value
        .get("aspects")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("`aspects` must be an array"))?;
    items
        .iter()
        .map(|item| {
            let aspect = field(item, "aspect")?;
            let sentiment = field(item, "sentiment")?
                .parse::<Sentiment>()
                .map_err(|e| malformed(e.to_string()))?;
            Ok((aspect.to_string(), sentiment))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Payload::Mentions)
}

fn parse_mappings(value: &Value) -> Result<Payload, GatewayError> {
    if let Some(items) = value.get("mappings") {
        let items = items
            .as_array()
            .ok_or_else(|| malformed("`mappings` must be an array"))?;
        return items
            .iter()
            .map(|item| Ok((field(item, "aspect")?.to_string(), field(item, "canonical")?.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Payload::Mappings);
    }
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object"))?;
    obj.iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|c| (k.clone(), c.to_string()))
                .ok_or_else(|| malformed(format!("canonical for `{k}` is not a string")))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Payload::Mappings)
}

fn parse_text(raw: &str) -> Result<Payload, GatewayError> {
    let text: Vec<&str> = raw
        .lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect();
    let text = text.join("\n").trim().to_string();
    if text.is_empty() {
        Err(malformed("empty summary"))
    } else {
        Ok(Payload::Text(text))
    }
}
