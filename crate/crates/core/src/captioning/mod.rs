//! Caption generation: shared prompt templates, response parsers, and the
//! statics/dynamics enhanced captioning operations.

pub mod dynamics;
pub mod statics;

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use thiserror::Error;

use crate::backends::BackendError;
use crate::model::FrameError;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unparseable {stage} response: {detail}")]
    Unparseable { stage: &'static str, detail: String },
    #[error("unknown prompt template: {0}")]
    MissingTemplate(String),
    #[error("template variable {{{0}}} not provided")]
    TemplateVar(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Prompt templates keyed by stage name. Built-in templates ship with the
/// crate; a directory of `<stage>.txt` files overrides them one by one.
pub struct PromptLibrary {
    templates: HashMap<String, String>,
}

fn strip_header(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let entries: [(&str, &str); 13] = [
            ("system", include_str!("../../templates/system.txt")),
            ("describe_frame", include_str!("../../templates/describe_frame.txt")),
            (
                "describe_frame_strict",
                include_str!("../../templates/describe_frame_strict.txt"),
            ),
            ("rewrite_statics", include_str!("../../templates/rewrite_statics.txt")),
            (
                "generate_questions",
                include_str!("../../templates/generate_questions.txt"),
            ),
            ("answer_describe", include_str!("../../templates/answer_describe.txt")),
            ("rewrite_dynamics", include_str!("../../templates/rewrite_dynamics.txt")),
            ("disturb_positive", include_str!("../../templates/disturb_positive.txt")),
            ("disturb_static", include_str!("../../templates/disturb_static.txt")),
            ("disturb_dynamic", include_str!("../../templates/disturb_dynamic.txt")),
            ("disturb_combined", include_str!("../../templates/disturb_combined.txt")),
            (
                "strict_list_suffix",
                include_str!("../../templates/strict_list_suffix.txt"),
            ),
            (
                "strict_answers_suffix",
                include_str!("../../templates/strict_answers_suffix.txt"),
            ),
        ];
        Self {
            templates: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), strip_header(v)))
                .collect(),
        }
    }

    /// Built-in templates with per-stage overrides from `dir/<stage>.txt`.
    pub fn with_overrides(dir: &Path) -> Result<Self, CaptionError> {
        let mut lib = Self::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| CaptionError::Unparseable {
            stage: "templates",
            detail: format!("{}: {e}", dir.display()),
        })?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let raw = std::fs::read_to_string(&path).map_err(|e| CaptionError::Unparseable {
                stage: "templates",
                detail: format!("{}: {e}", path.display()),
            })?;
            lib.templates.insert(stem.to_string(), strip_header(&raw));
        }
        Ok(lib)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, CaptionError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| CaptionError::MissingTemplate(name.to_string()))?;
        let mut out = template.clone();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        if let Some(caps) = Regex::new(r"\{([a-z_]+)\}").unwrap().captures(&out) {
            return Err(CaptionError::TemplateVar(caps[1].to_string()));
        }
        Ok(out)
    }

    pub fn system(&self) -> String {
        self.templates
            .get("system")
            .cloned()
            .unwrap_or_default()
    }
}

/// A parsed candidate list, possibly shorter than requested.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub items: Vec<String>,
    /// Set when the model produced fewer items than asked, even after the
    /// re-prompt. Under-generation is tolerated, never padded.
    pub under_count: bool,
}

/// Parse a numbered or bulleted list, tolerating leading whitespace,
/// bullets, and `1.`/`1)` numbering. Falls back to non-empty lines when no
/// list markers are present at all.
pub fn parse_numbered_list(text: &str) -> Vec<String> {
    let marker = Regex::new(r"^\s*(?:[-*•]\s*)?(?:\d+\s*[.)]\s*)").unwrap();
    let mut items = Vec::new();
    for line in text.lines() {
        if let Some(m) = marker.find(line) {
            let item = line[m.end()..].trim();
            if !item.is_empty() {
                items.push(item.to_string());
            }
        }
    }
    if items.is_empty() {
        for line in text.lines() {
            let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
            if !line.is_empty() {
                items.push(line.to_string());
            }
        }
    }
    items
}

/// Find labeled sections (`LABEL: content`) in order. Content runs to the
/// next label or end of text. Labels may sit after bullets or `|` separators.
pub fn parse_labeled_sections(
    text: &str,
    labels: &[&str],
) -> Result<Vec<String>, String> {
    let alternation = labels
        .iter()
        .map(|l| regex::escape(l))
        .collect::<Vec<_>>()
        .join("|");
    let re = Regex::new(&format!(r"(?mi)(?:^|\|)\s*[-*•\s]*({alternation})\s*:")).unwrap();
    let mut found: Vec<(String, usize, usize)> = re
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_uppercase(), m.start(), m.end())
        })
        .collect();
    found.sort_by_key(|(_, start, _)| *start);
    let mut sections: HashMap<String, String> = HashMap::new();
    for (idx, (label, _, content_start)) in found.iter().enumerate() {
        let content_end = found
            .get(idx + 1)
            .map(|(_, next_start, _)| *next_start)
            .unwrap_or(text.len());
        let content = text[*content_start..content_end]
            .trim()
            .trim_end_matches('|')
            .trim()
            .to_string();
        sections.entry(label.clone()).or_insert(content);
    }
    labels
        .iter()
        .map(|l| {
            sections
                .get(&l.to_uppercase())
                .filter(|s| !s.is_empty())
                .cloned()
                .ok_or_else(|| format!("missing section {l}"))
        })
        .collect()
}

/// Issue a list-generation call and parse exactly `n` items.
///
/// Over-generation is truncated to `n`. Under-generation triggers one
/// re-prompt with a strict suffix when `reprompt` is set; whatever remains
/// short is accepted with the `under_count` flag. An empty parse is an error.
pub fn request_numbered(
    client: &crate::backends::ChatClient,
    prompts: &PromptLibrary,
    prompt: &str,
    n: usize,
    seed: u64,
    reprompt: bool,
    stage: &'static str,
) -> Result<CandidateList, CaptionError> {
    let call = |user: &str| -> Result<Vec<String>, CaptionError> {
        let req = crate::backends::ChatRequest {
            system: prompts.system(),
            user: user.to_string(),
            images: Vec::new(),
            temperature: client.temperature(),
            seed,
        };
        Ok(parse_numbered_list(&client.chat(&req)?.text))
    };
    let mut items = call(prompt)?;
    if items.len() < n && reprompt {
        let suffix = prompts.render("strict_list_suffix", &[("n", &n.to_string())])?;
        let strict = format!("{prompt}\n{suffix}");
        let retried = call(&strict)?;
        if retried.len() > items.len() {
            items = retried;
        }
    }
    if items.is_empty() {
        return Err(CaptionError::Unparseable {
            stage,
            detail: "no list items in response".into(),
        });
    }
    items.truncate(n);
    Ok(CandidateList {
        under_count: items.len() < n,
        items,
    })
}
