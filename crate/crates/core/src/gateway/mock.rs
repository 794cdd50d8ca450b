//! Deterministic stand-in for a real model.
//!
//! The mock is a pure function of `(template, rendered prompt)`: it finds the
//! marked input block in the prompt and applies the keyword rules from
//! `fixtures/mock_rules.toml`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, GatewayError, TemplateId};
use crate::model::{normalize_aspect, Sentiment, TARGET_LENGTH};

#[derive(Debug, Clone, Deserialize)]
struct Cues {
    positive: Vec<String>,
    negative: Vec<String>,
    mixed: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct ExtractionRules {
    clause_breaks: Vec<String>,
    negations: Vec<String>,
    aspects: BTreeMap<String, Vec<String>>,
    cues: Cues,
}

#[derive(Debug, Clone, Deserialize)]
struct ConsolidationRules {
    map: BTreeMap<String, String>,
    canonical: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MockRules {
    extraction: ExtractionRules,
    consolidation: ConsolidationRules,
}

const BUILTIN_RULES: &str = include_str!("../../fixtures/mock_rules.toml");

impl MockRules {
    pub fn builtin() -> Self {
        MockRules::from_toml(BUILTIN_RULES).expect("built-in mock rules parse")
    }

    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        toml::from_str(text).map_err(|e| GatewayError::Config(format!("mock rules: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        MockRules::from_toml(&text)
    }

    /// Aspect mentions in order of appearance.
    pub fn extract(&self, review_text: &str) -> Vec<(String, Sentiment)> {
        let mut lowered = review_text.to_lowercase();
        for brk in &self.extraction.clause_breaks {
            lowered = lowered.replace(brk.as_str(), "|");
        }
        let mut out = Vec::new();
        for clause in lowered.split(['.', ',', ';', '!', '?', '|', '\n']) {
            let Some(sentiment) = self.clause_sentiment(clause) else {
                continue;
            };
            let mut hits: Vec<(usize, usize, &str)> = Vec::new();
            for (aspect, keywords) in &self.extraction.aspects {
                for kw in keywords {
                    hits.extend(
                        word_matches(clause, kw).map(|start| (start, start + kw.len(), aspect.as_str())),
                    );
                }
            }
            hits.sort_by(|a, b| a.0.cmp(&b.0).then((b.1 - b.0).cmp(&(a.1 - a.0))));
            let mut covered_until = 0;
            for (start, end, aspect) in hits {
                if start < covered_until {
                    continue;
                }
                covered_until = end;
                out.push((aspect.to_string(), sentiment));
            }
        }
        out
    }

    fn clause_sentiment(&self, clause: &str) -> Option<Sentiment> {
        let has = |words: &[String]| words.iter().any(|w| word_matches(clause, w).next().is_some());
        let cues = &self.extraction.cues;
        if has(&cues.mixed) {
            return Some(Sentiment::Mixed);
        }
        let (mut pos, mut neg) = (has(&cues.positive), has(&cues.negative));
        if has(&self.extraction.negations) {
            std::mem::swap(&mut pos, &mut neg);
        }
        match (pos, neg) {
            (true, true) => Some(Sentiment::Mixed),
            (true, false) => Some(Sentiment::Positive),
            (false, true) => Some(Sentiment::Negative),
            (false, false) => None,
        }
    }

    pub fn canonicalize(&self, aspect: &str) -> String {
        let aspect = normalize_aspect(aspect).unwrap_or_default();
        if let Some(c) = self.consolidation.map.get(&aspect) {
            return c.clone();
        }
        let known = |w: &str| self.consolidation.canonical.iter().any(|c| c == w);
        let words: Vec<&str> = aspect.split(' ').collect();
        if let Some(last) = words.last().filter(|w| known(w)) {
            return last.to_string();
        }
        if let Some(first) = words.first().filter(|w| known(w)) {
            return first.to_string();
        }
        aspect
    }
}

/// Start offsets of `needle` in `haystack` bounded by non-alphanumerics.
fn word_matches<'a>(haystack: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    haystack.match_indices(needle).filter_map(move |(start, _)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + needle.len()..].chars().next();
        let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
        (boundary(before) && boundary(after)).then_some(start)
    })
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text.rfind(close)?;
    (end >= start).then(|| &text[start..end])
}

const FILLERS: [&str; 5] = [
    "These points come up again and again across the reviews rather than in isolated comments.",
    "Shoppers weigh these themes when deciding whether the product fits their home and needs.",
    "Individual experiences vary, so the details in specific reviews may differ from this overview.",
    "Taken together, the feedback gives a balanced picture of what owners like and dislike.",
    "Reading a few reviews on the aspects that matter most to you can help confirm the fit.",
];

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn aspect_sentence(aspect: &str, counts: [u32; 3]) -> String {
    let [pos, neg, mix] = counts;
    if pos >= neg && pos >= mix {
        if neg + mix == 0 {
            format!("Reviewers consistently praise the {aspect}.")
        } else {
            format!("Most reviewers like the {aspect}, although some report problems.")
        }
    } else if neg >= mix {
        if pos == 0 {
            format!("Many reviewers are unhappy with the {aspect}.")
        } else {
            format!("Many reviewers criticise the {aspect}, though others are satisfied.")
        }
    } else {
        format!("Opinions on the {aspect} are mixed.")
    }
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Builds a summary of `TARGET_LENGTH` characters from the `### ` headers of
/// a summarization prompt.
fn mock_summary(prompt: &str) -> String {
    let sections = between(prompt, "<aspect_sections>", "</aspect_sections>").unwrap_or(prompt);
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, [u32; 3]> = BTreeMap::new();
    for line in sections.lines() {
        let Some(header) = line.strip_prefix("### ") else {
            continue;
        };
        let parts: Vec<&str> = header.split(" | ").collect();
        let [aspect, sentiment, count] = parts[..] else {
            continue;
        };
        let (Ok(sentiment), Some(Ok(count))) = (
            sentiment.parse::<Sentiment>(),
            count.split(' ').next().map(str::parse::<u32>),
        ) else {
            continue;
        };
        if !counts.contains_key(aspect) {
            order.push(aspect.to_string());
        }
        counts.entry(aspect.to_string()).or_default()[sentiment.index()] += count;
    }

    let (min, max) = TARGET_LENGTH;
    let mut sentences = Vec::new();
    if !order.is_empty() {
        sentences.push(format!("Customers mostly talk about the {}.", join_list(&order)));
        sentences.extend(order.iter().map(|a| aspect_sentence(a, counts[a])));
    }
    let joined = |s: &[String]| s.join(" ");
    while char_len(&joined(&sentences)) > max && sentences.len() > 2 {
        sentences.pop();
    }
    for filler in FILLERS {
        if char_len(&joined(&sentences)) >= min {
            break;
        }
        sentences.push(filler.to_string());
    }
    let mut text = joined(&sentences);
    if char_len(&text) > max {
        text = text.chars().take(max - 3).collect::<String>() + "...";
    }
    text
}

/// Deterministic keyword-rule backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    rules: Arc<MockRules>,
    poison: Option<String>,
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Self {
        MockBackend {
            rules: Arc::new(rules),
            poison: None,
        }
    }

    /// Any extraction or consolidation input containing `marker` gets a
    /// malformed (non-JSON) reply. Used for fault-injection tests.
    pub fn with_poison(mut self, marker: impl Into<String>) -> Self {
        self.poison = Some(marker.into());
        self
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }

    fn poisoned(&self, input: &str) -> bool {
        self.poison.as_deref().is_some_and(|p| input.contains(p))
    }

    pub fn respond(&self, template: TemplateId, prompt: &str) -> String {
        match template {
            TemplateId::AspectExtraction => {
                let review = between(prompt, "<review>\n", "\n</review>").unwrap_or(prompt);
                if self.poisoned(review) {
                    return "Sorry, I could not analyse this review {".to_string();
                }
                let aspects: Vec<_> = self
                    .rules
                    .extract(review)
                    .into_iter()
                    .map(|(aspect, sentiment)| json!({"aspect": aspect, "sentiment": sentiment.as_str()}))
                    .collect();
                json!({ "aspects": aspects }).to_string()
            }
            TemplateId::AspectConsolidation => {
                let block = between(prompt, "<aspects>", "</aspects>").unwrap_or(prompt);
                if self.poisoned(block) {
                    return "mapping unavailable".to_string();
                }
                let mappings: Vec<_> = block
                    .lines()
                    .filter_map(|l| l.strip_prefix("- "))
                    .map(|aspect| json!({"aspect": aspect, "canonical": self.rules.canonicalize(aspect)}))
                    .collect();
                json!({ "mappings": mappings }).to_string()
            }
            TemplateId::Summarization => mock_summary(prompt),
        }
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new(MockRules::builtin())
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn dispatch(
        &self,
        template: TemplateId,
        prompt: &str,
        _timeout: Duration,
    ) -> Result<String, BackendError> {
        Ok(self.respond(template, prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{parse_structured, Payload, TemplateSet};

    fn extract(text: &str) -> Vec<(String, Sentiment)> {
        MockRules::builtin().extract(text)
    }

    #[test]
    fn keyword_rules() {
        assert_eq!(
            extract("Beautiful color but assembly took forever"),
            vec![
                ("color".to_string(), Sentiment::Positive),
                ("assembly".to_string(), Sentiment::Negative)
            ]
        );
        assert_eq!(
            extract("love the color, hard assembly"),
            vec![
                ("color".to_string(), Sentiment::Positive),
                ("assembly".to_string(), Sentiment::Negative)
            ]
        );
        assert!(extract("Arrived on a Tuesday.").is_empty());
        assert_eq!(
            extract("The chair is not comfortable"),
            vec![("comfort".to_string(), Sentiment::Negative)]
        );
        assert_eq!(
            extract("Assembly time was okay"),
            vec![("assembly time".to_string(), Sentiment::Mixed)],
            "longest keyword wins"
        );
    }

    #[test]
    fn canonical_rules() {
        let rules = MockRules::builtin();
        assert_eq!(rules.canonicalize("value for money"), "price");
        assert_eq!(rules.canonicalize("shipping speed"), "delivery");
        assert_eq!(rules.canonicalize("packaging condition"), "delivery");
        assert_eq!(rules.canonicalize("comfort"), "comfort");
        assert_eq!(rules.canonicalize("drawer size"), "size");
        assert_eq!(rules.canonicalize("zebra pattern"), "zebra pattern");
    }

    #[test]
    fn output_parses_for_every_template() {
        let mock = MockBackend::default();
        let templates = TemplateSet::builtin();
        let extraction = templates
            .render(
                TemplateId::AspectExtraction,
                &[("review_text", "Sturdy, great quality but slow shipping".to_string())].into(),
            )
            .unwrap();
        let raw = mock.respond(TemplateId::AspectExtraction, &extraction);
        let Payload::Mentions(m) =
            parse_structured(&raw, TemplateId::AspectExtraction.output_schema()).unwrap()
        else {
            panic!()
        };
        assert_eq!(m.len(), 3);

        let consolidation = templates
            .render(
                TemplateId::AspectConsolidation,
                &[("aspects", "- value for money\n- zebra".to_string())].into(),
            )
            .unwrap();
        let raw = mock.respond(TemplateId::AspectConsolidation, &consolidation);
        assert_eq!(
            parse_structured(&raw, TemplateId::AspectConsolidation.output_schema()).unwrap(),
            Payload::Mappings(vec![
                ("value for money".into(), "price".into()),
                ("zebra".into(), "zebra".into())
            ])
        );
    }

    #[test]
    fn summary_length_is_bounded() {
        let cases = [
            String::new(),
            "### color | positive | 4 reviews\n".to_string(),
            (0..5)
                .map(|i| format!("### a very long and specific aspect name number {i} with extra words | negative | {i} reviews\n"))
                .collect(),
            (0..5)
                .map(|i| format!("### {} | mixed | 2 reviews\n", "x".repeat(200 + i)))
                .collect(),
        ];
        for sections in cases {
            let prompt = format!("<aspect_sections>\n{sections}</aspect_sections>");
            let summary = mock_summary(&prompt);
            let n = char_len(&summary);
            assert!((300..=500).contains(&n), "{n}: {summary}");
            assert_eq!(summary, mock_summary(&prompt));
        }
    }

    #[test]
    fn poison_marker_breaks_json() {
        let mock = MockBackend::default().with_poison("@@poison@@");
        let raw = mock.respond(TemplateId::AspectExtraction, "<review>\nbad @@poison@@\n</review>");
        assert!(parse_structured(&raw, TemplateId::AspectExtraction.output_schema()).is_err());
    }
}
