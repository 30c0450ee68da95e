//! Dynamics Enhanced Captioning.
//!
//! An LLM writes dynamics-oriented questions from the coarse caption alone;
//! the video LMM answers them and adds a dynamics description in a single
//! call over sequential frames; an LLM rewrites everything into `N_d`
//! dynamic caption candidates.

use regex::Regex;

use crate::backends::{ChatClient, ChatRequest, ImageAttachment};
use crate::keyframe::analysis_indices;
use crate::model::FrameSequence;

use super::{request_numbered, CandidateList, CaptionError, PromptLibrary};

/// One question with the model's answer.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaPair {
    pub question: String,
    pub answer: String,
}

/// Output of the video-LMM call: answers aligned to the questions plus the
/// free-form dynamics description.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsBundle {
    pub pairs: Vec<VqaPair>,
    pub description: String,
    /// Propagated from question generation when fewer than `N_qa` questions
    /// were available.
    pub under_count: bool,
}

/// How to pick video-LMM input frames from the available frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FramePolicy {
    /// Sample at a fixed rate (short-video datasets).
    Fps(f64),
    /// Uniformly sample a fixed count (long-video datasets).
    Uniform(usize),
}

impl FramePolicy {
    /// Parse preset names like `8fps` and `uniform64`.
    pub fn parse(name: &str) -> Result<Self, String> {
        if let Some(rate) = name.strip_suffix("fps") {
            let rate: f64 = rate
                .parse()
                .map_err(|_| format!("bad frame policy: {name}"))?;
            if rate <= 0.0 {
                return Err(format!("frame policy rate must be > 0: {name}"));
            }
            return Ok(FramePolicy::Fps(rate));
        }
        if let Some(count) = name.strip_prefix("uniform") {
            let count: usize = count
                .parse()
                .map_err(|_| format!("bad frame policy: {name}"))?;
            if count == 0 {
                return Err(format!("frame policy count must be >= 1: {name}"));
            }
            return Ok(FramePolicy::Uniform(count));
        }
        Err(format!("unknown frame policy: {name}"))
    }
}

impl std::fmt::Display for FramePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FramePolicy::Fps(r) => write!(f, "{r}fps"),
            FramePolicy::Uniform(n) => write!(f, "uniform{n}"),
        }
    }
}

/// Apply a sampling policy. Output count is `min(available, policy count)`;
/// uniform sampling keeps spacing within one source frame interval.
pub fn sample_frames(seq: &FrameSequence, policy: &FramePolicy) -> FrameSequence {
    let frames = seq.frames();
    let n = frames.len();
    let indices: Vec<usize> = match policy {
        FramePolicy::Fps(rate) => {
            let ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
            analysis_indices(&ts, *rate)
        }
        FramePolicy::Uniform(count) => {
            if n <= *count {
                (0..n).collect()
            } else if *count == 1 {
                vec![n / 2]
            } else {
                (0..*count)
                    .map(|i| (i as u64 * (n as u64 - 1) / (*count as u64 - 1)) as usize)
                    .collect()
            }
        }
    };
    let picked = indices.into_iter().map(|i| frames[i].clone()).collect();
    FrameSequence::new(seq.key().clone(), picked).expect("subsequence keeps ordering")
}

/// Questions are a function of the coarse caption only; no video content is
/// consulted. Under-count is re-prompted once, then flagged.
pub fn generate_questions(
    client: &ChatClient,
    prompts: &PromptLibrary,
    q: &str,
    n_qa: usize,
    seed: u64,
) -> Result<CandidateList, CaptionError> {
    if q.trim().is_empty() {
        return Err(CaptionError::Precondition("coarse caption is empty".into()));
    }
    if n_qa < 1 {
        return Err(CaptionError::Precondition("n_qa must be >= 1".into()));
    }
    let prompt = prompts.render(
        "generate_questions",
        &[("q", q), ("n", &n_qa.to_string())],
    )?;
    request_numbered(client, prompts, &prompt, n_qa, seed, true, "generate_questions")
}

fn parse_answers(text: &str, n: usize) -> Result<(Vec<String>, String), String> {
    let answer_re = Regex::new(r"(?m)^\s*A(\d+)\s*:\s*(.+)$").unwrap();
    let mut answers: Vec<Option<String>> = vec![None; n];
    for caps in answer_re.captures_iter(text) {
        let idx: usize = caps[1].parse().map_err(|_| "bad answer index")?;
        if (1..=n).contains(&idx) {
            answers[idx - 1].get_or_insert_with(|| caps[2].trim().to_string());
        }
    }
    let description_re = Regex::new(r"(?mis)^\s*DESCRIPTION\s*:\s*(.+)\z").unwrap();
    let description = description_re
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or("missing DESCRIPTION section")?;
    let missing: Vec<usize> = answers
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(i, _)| i + 1)
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing answer slots: {missing:?}"));
    }
    Ok((answers.into_iter().map(Option::unwrap).collect(), description))
}

/// Single video-LMM call: sequential frames, all questions, and the coarse
/// caption in; positional answers plus the dynamics description out.
pub fn answer_and_describe(
    client: &ChatClient,
    prompts: &PromptLibrary,
    frames: &FrameSequence,
    questions: &CandidateList,
    q: &str,
    seed: u64,
) -> Result<DynamicsBundle, CaptionError> {
    if frames.is_empty() {
        return Err(CaptionError::Precondition("frame sequence is empty".into()));
    }
    if questions.items.is_empty() {
        return Err(CaptionError::Precondition("no questions".into()));
    }
    let n = questions.items.len();
    let timestamps = frames
        .frames()
        .iter()
        .map(|f| format!("{:.3}", f.timestamp))
        .collect::<Vec<_>>()
        .join(", ");
    let question_block = questions
        .items
        .iter()
        .enumerate()
        .map(|(i, question)| format!("{}. {question}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let images: Vec<ImageAttachment> = frames
        .frames()
        .iter()
        .map(|f| {
            Ok(ImageAttachment {
                timestamp: Some(f.timestamp),
                png: f.handle.png_bytes()?,
            })
        })
        .collect::<Result<_, CaptionError>>()?;

    let base_prompt = prompts.render(
        "answer_describe",
        &[
            ("q", q),
            ("n", &n.to_string()),
            ("frame_count", &frames.len().to_string()),
            ("timestamps", &timestamps),
            ("questions", &question_block),
        ],
    )?;
    let call = |user: String| -> Result<Result<(Vec<String>, String), String>, CaptionError> {
        let req = ChatRequest {
            system: prompts.system(),
            user,
            images: images.clone(),
            temperature: client.temperature(),
            seed,
        };
        Ok(parse_answers(&client.chat(&req)?.text, n))
    };
    let parsed = match call(base_prompt.clone())? {
        Ok(parsed) => parsed,
        Err(_) => {
            let suffix = prompts.render("strict_answers_suffix", &[("n", &n.to_string())])?;
            match call(format!("{base_prompt}\n{suffix}"))? {
                Ok(parsed) => parsed,
                Err(detail) => {
                    return Err(CaptionError::Unparseable {
                        stage: "answer_describe",
                        detail,
                    })
                }
            }
        }
    };
    let (answers, description) = parsed;
    let pairs = questions
        .items
        .iter()
        .cloned()
        .zip(answers)
        .map(|(question, answer)| VqaPair { question, answer })
        .collect();
    Ok(DynamicsBundle {
        pairs,
        description,
        under_count: questions.under_count,
    })
}

/// LLM rewrite of the Q/A pairs and dynamics description into `n_d`
/// candidates.
pub fn rewrite_dynamics(
    client: &ChatClient,
    prompts: &PromptLibrary,
    bundle: &DynamicsBundle,
    q: &str,
    n_d: usize,
    seed: u64,
) -> Result<CandidateList, CaptionError> {
    if bundle.pairs.is_empty() {
        return Err(CaptionError::Precondition("bundle has no Q/A pairs".into()));
    }
    if n_d < 1 {
        return Err(CaptionError::Precondition("n_d must be >= 1".into()));
    }
    let qa_block = bundle
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Q{}: {} A{}: {}", i + 1, p.question, i + 1, p.answer))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts.render(
        "rewrite_dynamics",
        &[
            ("q", q),
            ("qa", &qa_block),
            ("description", &bundle.description),
            ("n", &n_d.to_string()),
        ],
    )?;
    request_numbered(client, prompts, &prompt, n_d, seed, true, "rewrite_dynamics")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendRole, ChatClient, MockChatBackend, MockRules, RetryPolicy};
    use crate::model::{FrameHandle, MomentKey, TimedFrame};
    use std::sync::Arc;
    use std::time::Duration;

    fn llm(rules: MockRules) -> ChatClient {
        ChatClient::new(
            BackendRole::Llm,
            "mock",
            Box::new(MockChatBackend::new(rules)),
            None,
            RetryPolicy::new(0, Duration::from_millis(1)),
        )
    }

    fn video(rules: MockRules) -> ChatClient {
        ChatClient::new(
            BackendRole::VideoLmm,
            "mock",
            Box::new(MockChatBackend::new(rules)),
            None,
            RetryPolicy::new(0, Duration::from_millis(1)),
        )
    }

    fn seq(n: usize) -> FrameSequence {
        let key = MomentKey {
            video_id: "v".into(),
            t_s: 0.0,
            t_e: 1000.0,
        };
        let frames = (0..n)
            .map(|i| TimedFrame {
                timestamp: i as f64 * 0.5,
                handle: FrameHandle::Memory(Arc::new(image::RgbImage::new(2, 2))),
            })
            .collect();
        FrameSequence::new(key, frames).unwrap()
    }

    #[test]
    fn questions_follow_requested_count() {
        let prompts = PromptLibrary::builtin();
        let client = llm(MockRules::builtin());
        let five = generate_questions(&client, &prompts, "a dog runs", 5, 0).unwrap();
        assert_eq!(five.items.len(), 5);
        assert!(!five.under_count);
        let one = generate_questions(&client, &prompts, "a dog runs", 1, 0).unwrap();
        assert_eq!(one.items.len(), 1);
    }

    #[test]
    fn questions_depend_only_on_caption() {
        let prompts = PromptLibrary::builtin();
        let client = llm(MockRules::builtin());
        let a = generate_questions(&client, &prompts, "a dog runs", 3, 9).unwrap();
        let b = generate_questions(&client, &prompts, "a dog runs", 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_questions_flag_under_count() {
        let rules = MockRules::from_toml_str(
            r#"
[[rule]]
pattern = '.*'
template = '1. only one question'
"#,
        )
        .unwrap();
        let prompts = PromptLibrary::builtin();
        let got = generate_questions(&llm(rules), &prompts, "q", 3, 0).unwrap();
        assert_eq!(got.items.len(), 1);
        assert!(got.under_count);
    }

    #[test]
    fn bundle_has_positional_answers_and_description() {
        let prompts = PromptLibrary::builtin();
        let questions = CandidateList {
            items: vec!["q one?".into(), "q two?".into()],
            under_count: false,
        };
        let bundle = answer_and_describe(
            &video(MockRules::builtin()),
            &prompts,
            &seq(4),
            &questions,
            "a dog runs",
            0,
        )
        .unwrap();
        assert_eq!(bundle.pairs.len(), 2);
        assert_eq!(bundle.pairs[0].question, "q one?");
        assert!(!bundle.description.is_empty());
    }

    #[test]
    fn exactly_one_video_call_per_moment() {
        use crate::backends::{BackendError, ChatBackend};
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc as StdArc;

        struct Counting {
            inner: MockChatBackend,
            calls: StdArc<AtomicUsize>,
        }
        impl ChatBackend for Counting {
            fn chat(
                &self,
                req: &crate::backends::ChatRequest,
            ) -> Result<String, BackendError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.chat(req)
            }
        }
        let calls = StdArc::new(AtomicUsize::new(0));
        let client = ChatClient::new(
            BackendRole::VideoLmm,
            "mock",
            Box::new(Counting {
                inner: MockChatBackend::new(MockRules::builtin()),
                calls: StdArc::clone(&calls),
            }),
            None,
            RetryPolicy::new(0, Duration::from_millis(1)),
        );
        let prompts = PromptLibrary::builtin();
        let questions = CandidateList {
            items: vec!["a?".into(), "b?".into(), "c?".into()],
            under_count: false,
        };
        answer_and_describe(&client, &prompts, &seq(6), &questions, "a dog runs", 0).unwrap();
        assert_eq!(
            calls.load(Ordering::SeqCst),
            1,
            "answers and description share one call"
        );
    }

    #[test]
    fn empty_frames_is_a_precondition_error() {
        let prompts = PromptLibrary::builtin();
        let questions = CandidateList {
            items: vec!["q?".into()],
            under_count: false,
        };
        let err = answer_and_describe(
            &video(MockRules::builtin()),
            &prompts,
            &seq(0),
            &questions,
            "q",
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CaptionError::Precondition(_)));
    }

    #[test]
    fn missing_answer_slots_reprompts_then_errors() {
        let rules = MockRules::from_toml_str(
            r#"
[[rule]]
pattern = '.*'
template = '''A1: first
DESCRIPTION: d'''
"#,
        )
        .unwrap();
        let prompts = PromptLibrary::builtin();
        let questions = CandidateList {
            items: vec!["one?".into(), "two?".into()],
            under_count: false,
        };
        let err =
            answer_and_describe(&video(rules), &prompts, &seq(2), &questions, "q", 0).unwrap_err();
        match err {
            CaptionError::Unparseable { detail, .. } => assert!(detail.contains("2"), "{detail}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rewrite_dynamics_counts_and_reproducibility() {
        let prompts = PromptLibrary::builtin();
        let bundle = DynamicsBundle {
            pairs: vec![VqaPair {
                question: "?".into(),
                answer: "!".into(),
            }],
            description: "dynamic description".into(),
            under_count: false,
        };
        let client = llm(MockRules::builtin());
        let a = rewrite_dynamics(&client, &prompts, &bundle, "a dog runs", 3, 4).unwrap();
        assert_eq!(a.items.len(), 3);
        let b = rewrite_dynamics(&client, &prompts, &bundle, "a dog runs", 3, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_policy_parsing() {
        assert_eq!(FramePolicy::parse("8fps").unwrap(), FramePolicy::Fps(8.0));
        assert_eq!(
            FramePolicy::parse("uniform64").unwrap(),
            FramePolicy::Uniform(64)
        );
        assert!(FramePolicy::parse("x").is_err());
        assert!(FramePolicy::parse("0fps").is_err());
        assert!(FramePolicy::parse("uniform0").is_err());
    }

    #[test]
    fn uniform_sampling_counts_and_spacing() {
        let long = seq(200); // 0.5 s apart
        let picked = sample_frames(&long, &FramePolicy::Uniform(64));
        assert_eq!(picked.len(), 64);
        let ts: Vec<f64> = picked.frames().iter().map(|f| f.timestamp).collect();
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 99.5);
        let ideal = (ts[ts.len() - 1] - ts[0]) / 63.0;
        for w in ts.windows(2) {
            assert!(
                ((w[1] - w[0]) - ideal).abs() <= 0.5 + 1e-9,
                "spacing deviation within one source interval"
            );
        }
        // fewer frames than the policy → all frames
        let short = seq(10);
        assert_eq!(sample_frames(&short, &FramePolicy::Uniform(64)).len(), 10);
    }

    #[test]
    fn fps_sampling_hits_grid() {
        let frames = seq(21); // 0..10 s at 2 fps
        let picked = sample_frames(&frames, &FramePolicy::Fps(1.0));
        let ts: Vec<f64> = picked.frames().iter().map(|f| f.timestamp).collect();
        assert_eq!(ts, (0..=10).map(|i| i as f64).collect::<Vec<_>>());
    }
}
