//! Deterministic mock chat backend.
//!
//! Configured by a rules file mapping prompt patterns to output templates.
//! The response is a pure function of (request, seed): repeated pipeline
//! runs with mocks are reproducible bit for bit.
//!
//! Template syntax, applied in order:
//! 1. regex capture references (`$1`..`$9`, `${name}`) from the matched
//!    pattern;
//! 2. directives:
//!    - `{{words:N}}` — first N whitespace words of the user prompt
//!    - `{{hash8}}` — 8 hex chars derived from the request digest
//!    - `{{enumerate:N:TEXT}}` — numbered list `1..N` of distinct items
//!    - `{{answers:N:TEXT}}` — lines `A1:`..`AN:` of distinct items
//!    - `{{refuse}}` — the backend refuses the request (safety filter)

use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest};

#[derive(Debug, Clone)]
pub struct MockRule {
    pub pattern: Regex,
    pub template: String,
}

#[derive(Debug, Clone)]
pub struct MockRules {
    rules: Vec<MockRule>,
}

#[derive(Debug, Deserialize)]
struct RulesFile {
    #[serde(rename = "rule")]
    rules: Vec<RuleSpec>,
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    pattern: String,
    template: String,
}

impl MockRules {
    pub fn from_toml_str(text: &str) -> Result<Self, BackendError> {
        let file: RulesFile =
            toml::from_str(text).map_err(|e| BackendError::Protocol(format!("mock rules: {e}")))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for spec in file.rules {
            let pattern = Regex::new(&spec.pattern)
                .map_err(|e| BackendError::Protocol(format!("mock rule pattern: {e}")))?;
            rules.push(MockRule {
                pattern,
                template: spec.template,
            });
        }
        Ok(Self { rules })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Protocol(format!("mock rules {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Rules paired with the built-in prompt templates; enough to drive the
    /// whole pipeline deterministically.
    pub fn builtin() -> Self {
        Self::from_toml_str(include_str!("../../data/mock_rules.toml"))
            .expect("builtin mock rules parse")
    }
}

pub struct MockChatBackend {
    rules: MockRules,
}

impl MockChatBackend {
    pub fn new(rules: MockRules) -> Self {
        Self { rules }
    }
}

fn mock_digest(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(req.system.as_bytes());
    hasher.update([0]);
    hasher.update(req.user.as_bytes());
    hasher.update([0]);
    hasher.update(req.temperature.to_le_bytes());
    hasher.update(req.seed.to_le_bytes());
    for img in &req.images {
        hasher.update(Sha256::digest(&img.png));
    }
    hex::encode(hasher.finalize())
}

fn short_tag(digest: &str, salt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(digest.as_bytes());
    hasher.update([0]);
    hasher.update(salt.as_bytes());
    hex::encode(hasher.finalize())[..6].to_string()
}

/// Expand directives after capture substitution. Returns `None` for a
/// refusal directive.
fn expand_directives(text: &str, req: &ChatRequest, digest: &str) -> Option<String> {
    if text.contains("{{refuse}}") {
        return None;
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let Some(end) = tail.find("}}") else {
            out.push_str("{{");
            rest = tail;
            continue;
        };
        let directive = &tail[..end];
        rest = &tail[end + 2..];
        let mut parts = directive.splitn(3, ':');
        let name = parts.next().unwrap_or("");
        match name {
            "words" => {
                let n: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
                let words: Vec<&str> = req.user.split_whitespace().take(n).collect();
                out.push_str(&words.join(" "));
            }
            "hash8" => out.push_str(&digest[..8]),
            "enumerate" | "answers" => {
                let n: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
                let item = parts.next().unwrap_or("");
                for i in 1..=n {
                    if i > 1 {
                        out.push('\n');
                    }
                    let tag = short_tag(digest, &format!("{name}/{i}/{item}"));
                    if name == "enumerate" {
                        out.push_str(&format!("{i}. {item} ({tag})"));
                    } else {
                        out.push_str(&format!("A{i}: {item} ({tag})"));
                    }
                }
            }
            _ => {
                // Unknown directive is kept verbatim so misconfigured rules
                // fail loudly in parsers.
                out.push_str("{{");
                out.push_str(directive);
                out.push_str("}}");
            }
        }
    }
    out.push_str(rest);
    Some(out)
}

impl ChatBackend for MockChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let digest = mock_digest(req);
        for rule in &self.rules.rules {
            if let Some(caps) = rule.pattern.captures(&req.user) {
                let mut substituted = String::new();
                caps.expand(&rule.template, &mut substituted);
                return match expand_directives(&substituted, req, &digest) {
                    Some(text) => Ok(text),
                    None => Err(BackendError::Refused("mock safety filter".into())),
                };
            }
        }
        Err(BackendError::Protocol(format!(
            "no mock rule matched prompt: {:.80}",
            req.user
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules(toml: &str) -> MockChatBackend {
        MockChatBackend::new(MockRules::from_toml_str(toml).unwrap())
    }

    #[test]
    fn echo_first_three_words() {
        let backend = rules(
            r#"
[[rule]]
pattern = '.*'
template = '{{words:3}}'
"#,
        );
        let out = backend
            .chat(&ChatRequest::text("s", "a dog runs fast"))
            .unwrap();
        assert_eq!(out, "a dog runs");
    }

    #[test]
    fn capture_references_expand() {
        let backend = rules(
            r#"
[[rule]]
pattern = 'caption is: "([^"]+)"'
template = 'echo: $1'
"#,
        );
        let out = backend
            .chat(&ChatRequest::text("s", r#"the caption is: "a cat sits""#))
            .unwrap();
        assert_eq!(out, "echo: a cat sits");
    }

    #[test]
    fn enumerate_produces_distinct_numbered_items() {
        let backend = rules(
            r#"
[[rule]]
pattern = 'make (\d+) items'
template = '{{enumerate:$1:an item}}'
"#,
        );
        let out = backend
            .chat(&ChatRequest::text("s", "make 3 items"))
            .unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("1. an item"));
        assert!(lines[2].starts_with("3. an item"));
        assert_ne!(lines[0], lines[1]);
    }

    #[test]
    fn same_request_same_output_different_seed_differs() {
        let backend = rules(
            r#"
[[rule]]
pattern = '.*'
template = 'tag {{hash8}}'
"#,
        );
        let mut req = ChatRequest::text("s", "u");
        let a = backend.chat(&req).unwrap();
        let b = backend.chat(&req).unwrap();
        assert_eq!(a, b);
        req.seed = 1;
        assert_ne!(a, backend.chat(&req).unwrap());
    }

    #[test]
    fn refusal_directive_surfaces_as_refused() {
        let backend = rules(
            r#"
[[rule]]
pattern = 'unsafe'
template = '{{refuse}}'
"#,
        );
        assert!(matches!(
            backend.chat(&ChatRequest::text("s", "unsafe prompt")),
            Err(BackendError::Refused(_))
        ));
    }

    #[test]
    fn first_matching_rule_wins() {
        let backend = rules(
            r#"
[[rule]]
pattern = 'specific'
template = 'special'

[[rule]]
pattern = '.*'
template = 'general'
"#,
        );
        assert_eq!(
            backend
                .chat(&ChatRequest::text("s", "a specific ask"))
                .unwrap(),
            "special"
        );
        assert_eq!(
            backend.chat(&ChatRequest::text("s", "anything")).unwrap(),
            "general"
        );
    }
}
