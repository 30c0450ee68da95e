//! CLI contract tests: exit codes, manifest no-ops, cache determinism, and
//! the reporting stages.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_figpipe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Small fixture: `n_videos` videos with 10 frames each, one moment per
/// video.
fn write_fixture(root: &Path, n_videos: usize) -> (PathBuf, PathBuf) {
    let frames = root.join("frames");
    let mut lines = String::new();
    for v in 0..n_videos {
        let video_id = format!("v{v:02}");
        let vdir = frames.join(&video_id);
        std::fs::create_dir_all(&vdir).unwrap();
        for f in 0..10u32 {
            let phase = (f / 4) as u8;
            let img = RgbImage::from_pixel(
                4,
                4,
                Rgb([40 + 50 * phase, 80 + 10 * v as u8, 220 - 60 * phase]),
            );
            img.save(vdir.join(format!("{}.png", f * 500))).unwrap();
        }
        lines.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "q": format!("a person does activity {v}"),
                "split": "train",
                "t_s": 0.0,
                "t_e": 4.5,
                "video_id": video_id,
            })
        ));
    }
    let moments = root.join("moments.jsonl");
    std::fs::write(&moments, lines).unwrap();
    (moments, frames)
}

#[test]
fn missing_input_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run(&[
        "--mock",
        "perturb",
        "--moments",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("nope.jsonl"),
        "path named in message: {}",
        stderr_of(&out)
    );
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[evaluator]\ntau = 0.0\n").unwrap();
    let (moments, _frames) = write_fixture(dir.path(), 1);
    let out = run(&[
        "--mock",
        "--config",
        config.to_str().unwrap(),
        "perturb",
        "--moments",
        moments.to_str().unwrap(),
        "--out",
        dir.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("tau"));
}

#[test]
fn rerun_unchanged_is_a_manifest_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let (moments, _frames) = write_fixture(dir.path(), 2);
    let out_path = dir.path().join("disturbed.jsonl");
    let args = [
        "--mock",
        "--seed",
        "7",
        "perturb",
        "--moments",
        moments.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ];
    let first = run(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr_of(&first));
    let bytes = std::fs::read(&out_path).unwrap();

    let second = run(&args);
    assert_eq!(second.status.code(), Some(0));
    assert!(
        stderr_of(&second).contains("manifest match"),
        "no-op logged: {}",
        stderr_of(&second)
    );
    assert_eq!(bytes, std::fs::read(&out_path).unwrap());

    // a different seed invalidates the manifest
    let reseeded = run(&[
        "--mock",
        "--seed",
        "8",
        "perturb",
        "--moments",
        moments.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(reseeded.status.code(), Some(0));
    assert!(!stderr_of(&reseeded).contains("manifest match"));
}

#[test]
fn forced_rerun_with_warm_cache_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (moments, _frames) = write_fixture(dir.path(), 2);
    let out_path = dir.path().join("disturbed.jsonl");
    let cache = dir.path().join("cache");
    let args = |force: bool| {
        let mut a = vec![
            "--mock".to_string(),
            "--seed".to_string(),
            "3".to_string(),
            "--cache-dir".to_string(),
            cache.to_string_lossy().into_owned(),
        ];
        if force {
            a.push("--force".to_string());
        }
        a.extend(
            [
                "perturb",
                "--moments",
                moments.to_str().unwrap(),
                "--out",
                out_path.to_str().unwrap(),
            ]
            .map(str::to_string),
        );
        a
    };
    let first_args = args(false);
    let first = run(&first_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(first.status.code(), Some(0), "{}", stderr_of(&first));
    let bytes = std::fs::read(&out_path).unwrap();
    assert!(cache.read_dir().unwrap().next().is_some(), "cache populated");

    let forced_args = args(true);
    let forced = run(&forced_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(forced.status.code(), Some(0));
    assert!(!stderr_of(&forced).contains("manifest match"));
    assert_eq!(
        bytes,
        std::fs::read(&out_path).unwrap(),
        "warm-cache rerun reproduces bytes"
    );
}

#[test]
fn moment_without_frames_gives_partial_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let (moments, frames) = write_fixture(dir.path(), 2);
    // add a moment whose video has no frames directory
    let mut text = std::fs::read_to_string(&moments).unwrap();
    text.push_str(
        r#"{"q":"a ghost moment","split":"train","t_e":4.0,"t_s":0.0,"video_id":"v99"}"#,
    );
    text.push('\n');
    std::fs::write(&moments, text).unwrap();

    let out = run(&[
        "--mock",
        "keyframes",
        "--moments",
        moments.to_str().unwrap(),
        "--frames",
        frames.to_str().unwrap(),
        "--out",
        dir.path().join("keyframes.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("v99"), "skip logged with key");
    // the two healthy moments still produced records
    let lines = std::fs::read_to_string(dir.path().join("keyframes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[test]
fn config_subcommand_echoes_normalized_defaults() {
    let out = run(&["config"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tau = 0.07"), "{stdout}");
    assert!(stdout.contains("batch_size = 16"));
    assert!(stdout.contains("n_qa = 5"));
    assert!(stdout.contains("frame_policy = \"8fps\""));

    // an explicit config merges over defaults in the echo
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[captioning]\nn_s = 7\n").unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("n_s = 7"));
    assert!(stdout.contains("tau = 0.07"));
}

#[test]
fn select_threshold_flags_filtered_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let scored = dir.path().join("scored.jsonl");
    std::fs::write(
        &scored,
        concat!(
            r#"{"dynamics":[{"kind":"dynamic","score":0.7,"text":"d"}],"q":"q","split":"train","statics":[{"kind":"static","score":0.9,"text":"s1"},{"kind":"static","score":0.2,"text":"s2"}],"t_e":5.0,"t_s":0.0,"video_id":"v1"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out_path = dir.path().join("fig.jsonl");
    let out = run(&[
        "select",
        "--scored",
        scored.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--threshold",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let line = std::fs::read_to_string(&out_path).unwrap();
    let record: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(record["selected"]["kind"], "static");
    assert_eq!(record["selected"]["index"], 0);
    assert_eq!(record["statics"][1]["filtered"], true);
    assert!(record["statics"][0].get("filtered").is_none());
    assert!(record["dynamics"][0].get("filtered").is_none());
}

#[test]
fn stats_stage_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let fig = dir.path().join("fig.jsonl");
    let mk = |vid: &str, text: &str| {
        format!(
            r#"{{"q":"coarse","split":"train","statics":[{{"kind":"static","score":0.5,"text":"{text}"}}],"dynamics":[],"t_e":5.0,"t_s":0.0,"video_id":"{vid}","selected":{{"index":0,"kind":"static"}}}}"#
        )
    };
    std::fs::write(
        &fig,
        format!(
            "{}\n{}\n{}\n",
            mk("v1", "a red dog runs"),
            mk("v2", "a red dog runs"),
            mk("v3", "a blue cat sits")
        ),
    )
    .unwrap();
    let out_path = dir.path().join("stats.json");
    let out = run(&[
        "stats",
        "--input",
        fig.to_str().unwrap(),
        "--schema",
        "fig",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["captions"], 3);
    assert_eq!(report["avg_words"], 4.0);
    assert_eq!(report["many_to_many_classes"], 1);
    assert_eq!(report["many_to_many_instances"], 2);
    assert_eq!(report["counting_definition"], "v1");
}

#[test]
fn eval_metrics_stage_writes_grid_report() {
    let dir = tempfile::tempdir().unwrap();
    let predictions = dir.path().join("predictions.jsonl");
    std::fs::write(
        &predictions,
        concat!(
            r#"{"query_id":"q1","ranked":[{"score":0.9,"t_e":5.0,"t_s":0.0,"video_id":"v1"}]}"#,
            "\n",
            r#"{"query_id":"q2","ranked":[{"score":0.9,"t_e":9.0,"t_s":1.0,"video_id":"v9"}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let gt = dir.path().join("gt.jsonl");
    std::fs::write(
        &gt,
        concat!(
            r#"{"query_id":"q1","t_e":5.0,"t_s":0.0,"video_id":"v1"}"#,
            "\n",
            r#"{"query_id":"q2","t_e":5.0,"t_s":0.0,"video_id":"v2"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out_path = dir.path().join("report.jsonl");
    let out = run(&[
        "eval-metrics",
        "--predictions",
        predictions.to_str().unwrap(),
        "--ground-truth",
        gt.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("task"), "aligned table printed: {stdout}");
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 2 tasks × 2 thresholds × 4 cutoffs + 4 VR rows
    assert_eq!(lines.len(), 20);
    let vcmr_r1 = lines
        .iter()
        .find(|r| r["task"] == "vcmr" && r["m"] == 0.5 && r["k"] == 1)
        .unwrap();
    assert_eq!(vcmr_r1["recall"], 0.5);
}
