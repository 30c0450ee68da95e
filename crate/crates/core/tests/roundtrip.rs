//! Property tests for the dataset file contracts: load∘save is structural
//! identity, save∘load is byte identity on canonical files, and request
//! digests never collide across distinct prompts.

use proptest::prelude::*;

use figpipe_core::backends::{request_digest, BackendRole, ChatRequest};
use figpipe_core::model::io::{load_jsonl, save_jsonl};
use figpipe_core::model::{
    AnnotatedMoment, CaptionCandidate, CaptionKind, DisturbedSet, MomentRecord, SelectedRef, Split,
};

fn arb_split() -> impl Strategy<Value = Split> {
    prop_oneof![Just(Split::Train), Just(Split::Val), Just(Split::Test)]
}

fn arb_caption() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9 .,'-]{0,38}"
        .prop_filter("non-empty after trim", |s| !s.trim().is_empty())
}

fn arb_moment() -> impl Strategy<Value = MomentRecord> {
    (
        "[a-z0-9_]{1,12}",
        0.0f64..1e4,
        0.001f64..1e3,
        arb_caption(),
        arb_split(),
    )
        .prop_map(|(video_id, t_s, duration, q, split)| MomentRecord {
            video_id,
            t_s,
            t_e: t_s + duration,
            q,
            split,
        })
}

fn arb_candidate(kind: CaptionKind) -> impl Strategy<Value = CaptionCandidate> {
    (arb_caption(), proptest::option::of(0.0f64..=1.0), any::<bool>()).prop_map(
        move |(text, score, filtered)| CaptionCandidate {
            text,
            kind,
            score,
            filtered: filtered && score.is_some(),
        },
    )
}

fn arb_annotated() -> impl Strategy<Value = AnnotatedMoment> {
    (
        arb_moment(),
        proptest::collection::vec(arb_candidate(CaptionKind::Static), 0..4),
        proptest::collection::vec(arb_candidate(CaptionKind::Dynamic), 0..4),
        any::<u8>(),
        any::<bool>(),
    )
        .prop_map(|(moment, statics, dynamics, pick, dynamics_failed)| {
            let mut annotated = AnnotatedMoment::from_moment(moment);
            annotated.statics = statics;
            annotated.dynamics = dynamics;
            annotated.dynamics_failed = dynamics_failed;
            let total = annotated.statics.len() + annotated.dynamics.len();
            if total > 0 {
                let idx = pick as usize % total;
                annotated.selected = Some(if idx < annotated.statics.len() {
                    SelectedRef {
                        kind: CaptionKind::Static,
                        index: idx,
                    }
                } else {
                    SelectedRef {
                        kind: CaptionKind::Dynamic,
                        index: idx - annotated.statics.len(),
                    }
                });
            } else {
                annotated.annotation_failed = true;
            }
            annotated
        })
}

fn arb_disturbed() -> impl Strategy<Value = DisturbedSet> {
    (
        arb_moment(),
        proptest::collection::vec(arb_caption(), 1..4),
        proptest::collection::vec(arb_caption(), 1..4),
        proptest::collection::vec(arb_caption(), 1..4),
        any::<u16>(),
    )
        .prop_map(|(source, positives, static_negs, dynamic_negs, pick)| {
            let pick = pick as usize;
            DisturbedSet {
                best_pos: positives[pick % positives.len()].clone(),
                best_static_neg: static_negs[pick % static_negs.len()].clone(),
                best_dynamic_neg: dynamic_negs[pick % dynamic_negs.len()].clone(),
                source,
                positives,
                static_negs,
                dynamic_negs,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moments_round_trip(records in proptest::collection::vec(arb_moment(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_jsonl(&records, &path).unwrap();
        let loaded: Vec<MomentRecord> = load_jsonl(&path).unwrap();
        prop_assert_eq!(&records, &loaded);
        let first = std::fs::read(&path).unwrap();
        save_jsonl(&loaded, &path).unwrap();
        prop_assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn annotated_round_trip(records in proptest::collection::vec(arb_annotated(), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.jsonl");
        save_jsonl(&records, &path).unwrap();
        let loaded: Vec<AnnotatedMoment> = load_jsonl(&path).unwrap();
        prop_assert_eq!(&records, &loaded);
        let first = std::fs::read(&path).unwrap();
        save_jsonl(&loaded, &path).unwrap();
        prop_assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn disturbed_round_trip(records in proptest::collection::vec(arb_disturbed(), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disturbed.jsonl");
        save_jsonl(&records, &path).unwrap();
        let loaded: Vec<DisturbedSet> = load_jsonl(&path).unwrap();
        prop_assert_eq!(&records, &loaded);
        let first = std::fs::read(&path).unwrap();
        save_jsonl(&loaded, &path).unwrap();
        prop_assert_eq!(first, std::fs::read(&path).unwrap());
    }
}

/// A hundred random annotated moments survive write → read → write
/// byte-identically.
#[test]
fn hundred_random_annotated_moments_byte_identical() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(77);
    let records: Vec<AnnotatedMoment> = (0..100)
        .map(|i| {
            let t_s = rng.gen_range(0.0..1e4);
            let mut annotated = AnnotatedMoment::from_moment(MomentRecord {
                video_id: format!("v{:03}", rng.gen_range(0..50)),
                t_s,
                t_e: t_s + rng.gen_range(0.001..500.0),
                q: format!("caption {i} with value {}", rng.gen::<f64>()),
                split: [Split::Train, Split::Val, Split::Test][rng.gen_range(0..3)],
            });
            for k in 0..rng.gen_range(1..4) {
                let mut c =
                    CaptionCandidate::new(format!("static {i}-{k}"), CaptionKind::Static);
                if rng.gen_bool(0.7) {
                    c.score = Some(rng.gen_range(0.0..=1.0));
                }
                annotated.statics.push(c);
            }
            annotated.selected = Some(SelectedRef {
                kind: CaptionKind::Static,
                index: 0,
            });
            annotated
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fig.jsonl");
    save_jsonl(&records, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded: Vec<AnnotatedMoment> = load_jsonl(&path).unwrap();
    assert_eq!(records, loaded);
    save_jsonl(&loaded, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

/// Digests of 10^5 distinct prompts never collide.
#[test]
fn request_digests_do_not_collide() {
    let mut seen = std::collections::HashSet::with_capacity(100_000);
    for i in 0..100_000u32 {
        let req = ChatRequest::text("sys", format!("prompt number {i}"));
        let digest = request_digest(BackendRole::Llm, "model", &req);
        assert!(seen.insert(digest), "collision at prompt {i}");
    }
}
