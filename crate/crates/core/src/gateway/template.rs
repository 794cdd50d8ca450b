use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    AspectExtraction,
    AspectConsolidation,
    Summarization,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [
        TemplateId::AspectExtraction,
        TemplateId::AspectConsolidation,
        TemplateId::Summarization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::AspectExtraction => "ASPECT_EXTRACTION",
            TemplateId::AspectConsolidation => "ASPECT_CONSOLIDATION",
            TemplateId::Summarization => "SUMMARIZATION",
        }
    }

    /// File name inside a templates directory.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::AspectExtraction => "aspect_extraction.txt",
            TemplateId::AspectConsolidation => "aspect_consolidation.txt",
            TemplateId::Summarization => "summarization.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::AspectExtraction => include_str!("../../templates/aspect_extraction.txt"),
            TemplateId::AspectConsolidation => {
                include_str!("../../templates/aspect_consolidation.txt")
            }
            TemplateId::Summarization => include_str!("../../templates/summarization.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GatewayError::Config(format!("unknown template id `{s}`")))
    }
}

/// One piece of a parsed template body.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A prompt template with `{name}` placeholders.
///
/// Only `{` followed by an identifier (`[a-z_][a-z0-9_]*`) and `}` is a
/// placeholder, so literal JSON examples inside a template are left alone.
/// Substitution is single pass: bound values are never re-scanned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse_segments(&body);
        PromptTemplate { id, body, segments }
    }

    pub fn builtin(id: TemplateId) -> Self {
        PromptTemplate::new(id, id.builtin())
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(name) => Some(name.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => {
                    let value = bindings.get(name.as_str()).ok_or_else(|| {
                        GatewayError::MissingBinding {
                            template: self.id,
                            name: name.clone(),
                        }
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .char_indices()
            .take_while(|(i, c)| {
                c.is_ascii_lowercase() || *c == '_' || (*i > 0 && c.is_ascii_digit())
            })
            .count();
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            literal.push_str(&rest[..open]);
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(after[..ident_len].to_string()));
            rest = &after[ident_len + 1..];
        } else {
            literal.push_str(&rest[..=open]);
            rest = after;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

/// The three templates the pipeline uses.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            templates: TemplateId::ALL
                .into_iter()
                .map(|id| (id, PromptTemplate::builtin(id)))
                .collect(),
        }
    }

    /// Loads templates from `dir`, falling back to the built-in text for any
    /// file that does not exist.
    pub fn load_dir(dir: &Path) -> Result<Self, GatewayError> {
        let mut set = TemplateSet::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            match std::fs::read_to_string(&path) {
                Ok(body) => set.replace(PromptTemplate::new(id, body)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(GatewayError::Config(format!(
                        "cannot read template {}: {e}",
                        path.display()
                    )))
                }
            }
        }
        Ok(set)
    }

    pub fn replace(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id, template);
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(
        &self,
        id: TemplateId,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, GatewayError> {
        self.get(id).render(bindings)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn builtin_placeholders() {
        let set = TemplateSet::builtin();
        assert_eq!(
            set.get(TemplateId::AspectExtraction).placeholders(),
            BTreeSet::from(["review_text"])
        );
        assert_eq!(
            set.get(TemplateId::AspectConsolidation).placeholders(),
            BTreeSet::from(["aspects"])
        );
        assert_eq!(
            set.get(TemplateId::Summarization).placeholders(),
            BTreeSet::from(["aspect_list", "aspect_sections"])
        );
    }

    #[test]
    fn renders_review_text() {
        let set = TemplateSet::builtin();
        let prompt = set
            .render(TemplateId::AspectExtraction, &bind(&[("review_text", "Great color")]))
            .unwrap();
        assert!(prompt.contains("Great color"));
        assert!(prompt.contains(r#"{"aspects": []}"#), "JSON examples are literal");
        assert!(!prompt.contains("{review_text}"));
    }

    #[test]
    fn missing_binding_is_an_error() {
        let set = TemplateSet::builtin();
        let err = set
            .render(TemplateId::Summarization, &bind(&[("aspect_list", "color")]))
            .unwrap_err();
        assert!(matches!(
            err,
            GatewayError::MissingBinding { template: TemplateId::Summarization, ref name } if name == "aspect_sections"
        ));
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = PromptTemplate::new(TemplateId::AspectExtraction, "a {x} b {y}");
        let out = t.render(&bind(&[("x", "{y}"), ("y", "Y")])).unwrap();
        assert_eq!(out, "a {y} b Y");
    }

    #[test]
    fn braces_that_are_not_placeholders_survive() {
        let t = PromptTemplate::new(TemplateId::AspectExtraction, "{} {1a} {Upper} {ok} {");
        assert_eq!(t.placeholders(), BTreeSet::from(["ok"]));
        assert_eq!(t.render(&bind(&[("ok", "!")])).unwrap(), "{} {1a} {Upper} ! {");
    }

    #[test]
    fn load_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("summarization.txt"), "S: {aspect_sections}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get(TemplateId::Summarization).body(), "S: {aspect_sections}");
        assert_eq!(
            set.get(TemplateId::AspectExtraction),
            &PromptTemplate::builtin(TemplateId::AspectExtraction)
        );
    }
}
