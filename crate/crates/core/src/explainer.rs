//! Explanation prompts, completion clients and the template fallback.
//!
//! Every agent action gets an explanation. When a completion service is
//! configured the rendered prompt is sent to it; any failure (transport,
//! timeout, blank output) falls back to a deterministic sentence built from
//! the reasoning path.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::conversation::{DialogHistory, Speaker};
use crate::kg::{render_placeholders, EntityId, KnowledgeGraph};
use crate::recommender::{ReasoningPath, Recommendation};
use crate::reviews::{truncate_tokens, ReviewSet};

pub const DEFAULT_TEMPLATE_NAME: &str = "explain_v1";
const DEFAULT_TEMPLATE: &str = include_str!("../templates/explain_v1.txt");

pub const INSTRUCTION: &str = "In one or two sentences, tell the user why this recommendation fits the \
conversation. Ground the explanation in the reasoning path when one is given.";

pub const QUESTION_FALLBACK: &str = "I asked to learn more about your preferences.";

pub const ENDPOINT_ENV: &str = "EGCR_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "EGCR_LLM_API_KEY";

const PLACEHOLDERS: [&str; 5] = ["history", "item", "path", "reviews", "instruction"];

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    name: String,
    body: String,
}

impl PromptTemplate {
    /// Validates that `body` uses `{history}` and `{item}` and no unknown placeholder.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let t = Self { name: name.into(), body: body.into() };
        for required in ["{history}", "{item}"] {
            if !t.body.contains(required) {
                return Err(t.error(format!("missing required placeholder {required}")));
            }
        }
        let dummy: HashMap<&str, String> = PLACEHOLDERS.iter().map(|&p| (p, String::new())).collect();
        t.render(&dummy)?;
        Ok(t)
    }

    pub fn default_template() -> Self {
        Self::new(DEFAULT_TEMPLATE_NAME, DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    /// Loads `<dir>/<name>.txt`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let body = std::fs::read_to_string(dir.join(format!("{name}.txt")))?;
        Self::new(name, body)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    fn error(&self, message: impl Into<String>) -> ExplainError {
        ExplainError::Template { name: self.name.clone(), message: message.into() }
    }

    /// Single pass over the body; substituted values are never rescanned.
    fn render(&self, values: &HashMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let key = close.map(|c| &after[..c]);
            match key {
                Some(k) if is_identifier(k) => {
                    let Some(v) = values.get(k) else {
                        return Err(self.error(format!("unresolved placeholder {{{k}}}")));
                    };
                    out.push_str(v);
                    rest = &after[k.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub history_turns: usize,
    pub review_snippets: usize,
    pub snippet_tokens: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { history_turns: 4, review_snippets: 2, snippet_tokens: 60 }
    }
}

/// Last `last` turns, with item placeholders replaced by names.
pub fn render_history(c: &DialogHistory, last: usize, g: &KnowledgeGraph) -> String {
    let skip = c.turns.len().saturating_sub(last);
    c.turns[skip..]
        .iter()
        .map(|t| match t.speaker {
            Speaker::Seeker => format!("SEEKER: {}", render_placeholders(&t.text, g)),
            Speaker::Recommender => format!("AGENT: {}", render_placeholders(&t.text, g)),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_reviews(reviews: &ReviewSet, cfg: &PromptConfig) -> String {
    if reviews.is_empty() || cfg.review_snippets == 0 {
        return "none".to_string();
    }
    reviews
        .reviews
        .iter()
        .take(cfg.review_snippets)
        .map(|r| format!("- \"{}\"", truncate_tokens(&r.text, cfg.snippet_tokens)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the explanation prompt for an action focused on `focus`.
pub fn build_prompt_for(
    c: &DialogHistory,
    focus: EntityId,
    path: &ReasoningPath,
    reviews: &ReviewSet,
    tpl: &PromptTemplate,
    g: &KnowledgeGraph,
    cfg: &PromptConfig,
) -> Result<String> {
    let values = HashMap::from([
        ("history", render_history(c, cfg.history_turns, g)),
        ("item", g.name_of(focus)),
        ("path", path.render_chain(g)),
        ("reviews", render_reviews(reviews, cfg)),
        ("instruction", INSTRUCTION.to_string()),
    ]);
    tpl.render(&values)
}

/// Renders the explanation prompt for the top-1 item of `rec`.
pub fn build_prompt(
    c: &DialogHistory,
    rec: &Recommendation,
    path: &ReasoningPath,
    reviews: &ReviewSet,
    tpl: &PromptTemplate,
    g: &KnowledgeGraph,
    cfg: &PromptConfig,
) -> Result<String> {
    let top = rec
        .top()
        .ok_or_else(|| ExplainError::Contract("cannot explain an empty recommendation".into()))?;
    build_prompt_for(c, top, path, reviews, tpl, g, cfg)
}

/// Deterministic explanation sentence for a recommendation.
pub fn render_fallback(rec: &Recommendation, path: &ReasoningPath, g: &KnowledgeGraph) -> String {
    let Some(top) = rec.top() else {
        return QUESTION_FALLBACK.to_string();
    };
    let item = g.name_of(top);
    let seq = path.entity_sequence();
    match (path.start, path.len()) {
        (Some(start), 1) => format!("I recommend {item} because it is directly related to {}.", g.name_of(start)),
        (Some(start), n) if n >= 2 => {
            let via: Vec<String> = seq[1..seq.len() - 1].iter().map(|&e| g.name_of(e)).collect();
            format!(
                "I recommend {item} because, like {}, it is linked to {}.",
                g.name_of(start),
                via.join(" and ")
            )
        }
        _ => format!("I recommend {item} based on our conversation."),
    }
}

/// Fallback for a question action; `focus` is the entity the question is about.
pub fn render_question_fallback(focus: Option<EntityId>, g: &KnowledgeGraph) -> String {
    match focus {
        Some(f) => format!("I asked about {} to learn more about your preferences.", g.name_of(f)),
        None => QUESTION_FALLBACK.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationSource {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub source: ExplanationSource,
    pub path_used: ReasoningPath,
}

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("completion timed out after {0:?}")]
    Timeout(Duration),
    #[error("completion service unavailable: {0}")]
    Unavailable(String),
    #[error("completion transport error: {0}")]
    Transport(String),
    #[error("completion service returned status {0}")]
    Status(u16),
    #[error("malformed completion response: {0}")]
    Malformed(String),
}

/// A text-completion backend. Implementations enforce their own timeout.
pub trait CompletionClient: Send + Sync {
    fn name(&self) -> &str;
    fn timeout(&self) -> Duration;
    fn complete(&self, prompt: &str) -> Result<String, CompletionError>;
}

/// Always unavailable; selects the template fallback.
#[derive(Debug, Clone, Default)]
pub struct FallbackOnlyClient;

impl CompletionClient for FallbackOnlyClient {
    fn name(&self) -> &str {
        "fallback-only"
    }

    fn timeout(&self) -> Duration {
        Duration::ZERO
    }

    fn complete(&self, _prompt: &str) -> Result<String, CompletionError> {
        Err(CompletionError::Unavailable("no completion service configured".into()))
    }
}

/// JSON-over-HTTP completion client.
///
/// Sends `{"prompt", "max_tokens", "temperature"}` with an optional bearer
/// token and accepts `choices[0].text`, `choices[0].message.content`,
/// `completion` or `text` in the reply.
#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
    max_tokens: u32,
    temperature: f64,
    http: reqwest::blocking::Client,
}

impl HttpCompletionClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds with static configuration");
        Self { endpoint: endpoint.into(), api_key, timeout, max_tokens: 96, temperature: 0.7, http }
    }

    pub fn with_sampling(mut self, max_tokens: u32, temperature: f64) -> Self {
        self.max_tokens = max_tokens;
        self.temperature = temperature;
        self
    }
}

fn extract_completion(v: &serde_json::Value) -> Option<String> {
    let choice = v.get("choices").and_then(|c| c.get(0));
    choice
        .and_then(|c| c.get("text"))
        .or_else(|| choice.and_then(|c| c.get("message")).and_then(|m| m.get("content")))
        .or_else(|| v.get("completion"))
        .or_else(|| v.get("text"))
        .and_then(|s| s.as_str())
        .map(str::to_string)
}

impl CompletionClient for HttpCompletionClient {
    fn name(&self) -> &str {
        "http"
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }

    fn complete(&self, prompt: &str) -> Result<String, CompletionError> {
        let body = serde_json::json!({
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let map_err = |e: reqwest::Error| {
            if e.is_timeout() {
                CompletionError::Timeout(self.timeout)
            } else {
                CompletionError::Transport(e.to_string())
            }
        };
        let resp = req.send().map_err(map_err)?;
        if !resp.status().is_success() {
            return Err(CompletionError::Status(resp.status().as_u16()));
        }
        let v: serde_json::Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                CompletionError::Timeout(self.timeout)
            } else {
                CompletionError::Malformed(e.to_string())
            }
        })?;
        extract_completion(&v).ok_or_else(|| CompletionError::Malformed("no completion text in response".into()))
    }
}

pub const DEFAULT_COMPLETION_TIMEOUT: Duration = Duration::from_secs(20);

/// Builds the client selected by `EGCR_LLM_ENDPOINT` / `EGCR_LLM_API_KEY`.
/// Without an endpoint the fallback-only client is returned.
pub fn client_from_env() -> Box<dyn CompletionClient> {
    let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty());
    let key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.trim().is_empty());
    match endpoint {
        Some(url) => Box::new(HttpCompletionClient::new(url, key, DEFAULT_COMPLETION_TIMEOUT)),
        None => {
            if key.is_some() {
                warn!("{API_KEY_ENV} is set without {ENDPOINT_ENV}; using template explanations");
            }
            Box::new(FallbackOnlyClient)
        }
    }
}

/// Asks `client` for an explanation and falls back to the template sentence
/// when the call fails or returns blank text or an echo of the prompt.
pub fn generate_explanation(
    prompt: &str,
    client: &dyn CompletionClient,
    rec: &Recommendation,
    path: &ReasoningPath,
    g: &KnowledgeGraph,
) -> Explanation {
    let fallback = || Explanation {
        text: render_fallback(rec, path, g),
        source: ExplanationSource::Fallback,
        path_used: path.clone(),
    };
    if prompt.trim().is_empty() {
        return fallback();
    }
    match client.complete(prompt) {
        Ok(text) => {
            let text = text.trim();
            if text.is_empty() || text == prompt.trim() {
                fallback()
            } else {
                Explanation { text: text.to_string(), source: ExplanationSource::Llm, path_used: path.clone() }
            }
        }
        Err(CompletionError::Unavailable(_)) => fallback(),
        Err(e) => {
            warn!(client = client.name(), error = %e, "completion failed, using template explanation");
            fallback()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("t", "{history} {item}").is_ok());
        assert!(PromptTemplate::new("t", "{history}").is_err());
        assert!(PromptTemplate::new("t", "{history} {item} {mood}").is_err());
        // braces that are not placeholders pass through
        let t = PromptTemplate::new("t", "{history} {item} {} { x }").unwrap();
        let values = HashMap::from([("history", "H".to_string()), ("item", "{path}".to_string())]);
        assert_eq!(t.render(&values).unwrap(), "H {path} {} { x }");
        assert!(PromptTemplate::default_template().body().contains("{reviews}"));
    }

    #[test]
    fn template_loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("short.txt"), "Explain {item} given:\n{history}\n").unwrap();
        let t = PromptTemplate::load(dir.path(), "short").unwrap();
        assert_eq!(t.name(), "short");
        assert!(PromptTemplate::load(dir.path(), "missing").is_err());
    }

    #[test]
    fn whitespace_completion_is_a_failure() {
        struct Blank;
        impl CompletionClient for Blank {
            fn name(&self) -> &str {
                "blank"
            }
            fn timeout(&self) -> Duration {
                Duration::from_secs(1)
            }
            fn complete(&self, _: &str) -> Result<String, CompletionError> {
                Ok("  \n\t ".into())
            }
        }
        let g = KnowledgeGraph::default();
        let e = generate_explanation("p", &Blank, &Recommendation::default(), &ReasoningPath::default(), &g);
        assert_eq!(e.source, ExplanationSource::Fallback);
        assert!(!e.text.is_empty());
    }

    #[test]
    fn fallback_only_client_when_env_is_absent() {
        // only asserts the branch; the variables are not set in the test environment
        if std::env::var(ENDPOINT_ENV).is_err() {
            assert_eq!(client_from_env().name(), "fallback-only");
        }
    }

    #[test]
    fn response_shapes() {
        let v = serde_json::json!({"choices": [{"text": "a"}]});
        assert_eq!(extract_completion(&v).as_deref(), Some("a"));
        let v = serde_json::json!({"choices": [{"message": {"content": "b"}}]});
        assert_eq!(extract_completion(&v).as_deref(), Some("b"));
        assert_eq!(extract_completion(&serde_json::json!({"completion": "c"})).as_deref(), Some("c"));
        assert_eq!(extract_completion(&serde_json::json!({"nope": 1})), None);
    }
}
