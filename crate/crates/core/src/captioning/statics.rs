//! Statics Enhanced Captioning.
//!
//! Per key frame, the image LMM writes foreground/background/full
//! descriptions guided by the coarse caption; an LLM then rewrites all of
//! them into `N_s` diverse static caption candidates.

use crate::backends::{ChatClient, ChatRequest, ImageAttachment};
use crate::model::TimedFrame;

use super::{parse_labeled_sections, request_numbered, CandidateList, CaptionError, PromptLibrary};

/// The three labeled descriptions of one key frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescription {
    pub foreground: String,
    pub background: String,
    pub full: String,
    pub timestamp: f64,
}

/// One image-LMM call for one key frame. An unparseable reply gets one
/// re-prompt with the strict template before failing.
pub fn describe_keyframe(
    client: &ChatClient,
    prompts: &PromptLibrary,
    frame: &TimedFrame,
    q: &str,
    seed: u64,
) -> Result<FrameDescription, CaptionError> {
    if q.trim().is_empty() {
        return Err(CaptionError::Precondition("coarse caption is empty".into()));
    }
    let png = frame.handle.png_bytes()?;
    let call = |template: &str| -> Result<Result<Vec<String>, String>, CaptionError> {
        let user = prompts.render(template, &[("q", q)])?;
        let req = ChatRequest {
            system: prompts.system(),
            user,
            images: vec![ImageAttachment {
                timestamp: Some(frame.timestamp),
                png: png.clone(),
            }],
            temperature: client.temperature(),
            seed,
        };
        let response = client.chat(&req)?;
        Ok(parse_labeled_sections(&response.text, &["FG", "BG", "FULL"]))
    };
    let sections = match call("describe_frame")? {
        Ok(sections) => sections,
        Err(_) => match call("describe_frame_strict")? {
            Ok(sections) => sections,
            Err(detail) => {
                return Err(CaptionError::Unparseable {
                    stage: "describe_frame",
                    detail,
                })
            }
        },
    };
    let mut it = sections.into_iter();
    Ok(FrameDescription {
        foreground: it.next().unwrap(),
        background: it.next().unwrap(),
        full: it.next().unwrap(),
        timestamp: frame.timestamp,
    })
}

fn descriptions_block(descriptions: &[FrameDescription]) -> String {
    descriptions
        .iter()
        .map(|d| {
            format!(
                "[t={:.3}s] FG: {} | BG: {} | FULL: {}",
                d.timestamp, d.foreground, d.background, d.full
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One LLM call rewriting all frame descriptions into `n_s` static caption
/// candidates.
pub fn rewrite_statics(
    client: &ChatClient,
    prompts: &PromptLibrary,
    descriptions: &[FrameDescription],
    q: &str,
    n_s: usize,
    seed: u64,
) -> Result<CandidateList, CaptionError> {
    if descriptions.is_empty() {
        return Err(CaptionError::Precondition("no frame descriptions".into()));
    }
    if n_s < 1 {
        return Err(CaptionError::Precondition("n_s must be >= 1".into()));
    }
    let prompt = prompts.render(
        "rewrite_statics",
        &[
            ("q", q),
            ("descriptions", &descriptions_block(descriptions)),
            ("n", &n_s.to_string()),
        ],
    )?;
    request_numbered(client, prompts, &prompt, n_s, seed, true, "rewrite_statics")
}
