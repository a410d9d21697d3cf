//! CLI behavior: exit codes, idempotence, label stage, strict mode, and
//! offline replay against the cache alone.

mod common;

use common::{bin, setup_mock_run};
use cotjudge_core::manipulation::Strategy;
use cotjudge_core::provider::{MockScript, MockScriptEntry};
use cotjudge_core::trajectory::{save_dataset, Dataset, GoldLabel, ObservationRef, Step, Trajectory};
use std::path::Path;

fn write_config(dir: &Path, dataset: &Path, extra: &str) -> std::path::PathBuf {
    let config_path = dir.join("config.toml");
    std::fs::write(
        &config_path,
        format!(
            "dataset = {dataset:?}\nout_dir = {out:?}\ncache_dir = {cache:?}\nseed = 3\n{extra}",
            dataset = dataset.display().to_string(),
            out = dir.join("out").display().to_string(),
            cache = dir.join("cache").display().to_string(),
        ),
    )
    .unwrap();
    config_path
}

fn trajectory(id: &str, gold: GoldLabel, steps: u32) -> Trajectory {
    Trajectory {
        id: id.to_string(),
        task: format!("Task for {id}: reach the target page."),
        gold_label: gold,
        source: "handmade".to_string(),
        steps: (1..=steps)
            .map(|i| Step {
                index: i,
                cot: format!("Thought {i} of {id}."),
                action: format!("click('{id}-{i}')"),
                observation: ObservationRef::caption(format!("Caption {i} of {id}.")),
            })
            .collect(),
    }
}

fn write_script(dir: &Path, entries: Vec<MockScriptEntry>) -> std::path::PathBuf {
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string_pretty(&MockScript { entries }).unwrap()).unwrap();
    path
}

fn text_entry(match_all: Vec<&str>, text: &str) -> MockScriptEntry {
    MockScriptEntry {
        match_substring: None,
        match_all: Some(match_all.into_iter().map(String::from).collect()),
        text: Some(text.to_string()),
        error: None,
        times: None,
    }
}

#[test]
fn unknown_strategy_exits_2_before_any_request() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data.jsonl");
    save_dataset(&Dataset::new(vec![trajectory("t1", GoldLabel::Failure, 1)]), &dataset).unwrap();
    let config = write_config(dir.path(), &dataset, "strategies = [\"confidence_vibes\"]\n");
    let output = bin().arg("--config").arg(&config).arg("manipulate").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown strategy"));
}

#[test]
fn score_without_results_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data.jsonl");
    save_dataset(&Dataset::new(vec![trajectory("t1", GoldLabel::Failure, 1)]), &dataset).unwrap();
    let config = write_config(dir.path(), &dataset, "");
    let output = bin().arg("--config").arg(&config).arg("score").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("no results"));
}

#[test]
fn judge_rerun_issues_no_new_results() {
    let run = setup_mock_run(8, 2, 0.5, 41, 2, Strategy::CompetenceBoosting);
    run.run_full_pipeline(8, 2, 0.5);
    let results_path = run.out_dir.join("judge_results.jsonl");
    let before = std::fs::read(&results_path).unwrap();
    // 8 originals + 4 manipulated, one mode, one scaling.
    assert_eq!(before.iter().filter(|b| **b == b'\n').count(), 12);

    let stdout = run.run_expect_success(&["judge"]);
    assert!(stdout.contains("0 new results"), "{stdout}");
    assert_eq!(std::fs::read(&results_path).unwrap(), before, "results file must be unchanged");
}

#[test]
fn label_fills_silver_labels_and_warns_on_unparsed() {
    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    let mut labeled = trajectory("t-known", GoldLabel::Success, 1);
    labeled.source = "benchmark".to_string();
    save_dataset(
        &Dataset::new(vec![
            labeled,
            trajectory("t-unlabeled-a", GoldLabel::Unlabeled, 2),
            trajectory("t-unlabeled-b", GoldLabel::Unlabeled, 2),
        ]),
        &dataset_path,
    )
    .unwrap();
    let script = write_script(
        dir.path(),
        vec![
            text_entry(vec!["t-unlabeled-a"], "Looks broken.\nStatus: failure"),
            text_entry(vec!["t-unlabeled-b"], "I cannot tell what happened here."),
        ],
    );
    let config = write_config(dir.path(), &dataset_path, "");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("label")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("unparsed"), "{stderr}");

    let labeled_text = std::fs::read_to_string(dir.path().join("out/labeled.jsonl")).unwrap();
    let a = labeled_text.lines().find(|l| l.contains("t-unlabeled-a")).unwrap();
    assert!(a.contains("\"gold_label\":\"failure\""), "{a}");
    assert!(a.contains("\"source\":\"silver:mock-labeler\""), "{a}");
    let b = labeled_text.lines().find(|l| l.contains("t-unlabeled-b")).unwrap();
    assert!(b.contains("\"gold_label\":null"), "{b}");
    let known = labeled_text.lines().find(|l| l.contains("t-known")).unwrap();
    assert!(known.contains("\"source\":\"benchmark\""), "pre-labeled rows stay untouched: {known}");

    // A fully labeled dataset issues zero labeler requests.
    let dir2 = tempfile::tempdir().unwrap();
    let dataset2 = dir2.path().join("data.jsonl");
    save_dataset(&Dataset::new(vec![trajectory("t1", GoldLabel::Success, 1)]), &dataset2).unwrap();
    let script2 = write_script(dir2.path(), vec![text_entry(vec![""], "Status: success")]);
    let config2 = write_config(dir2.path(), &dataset2, "");
    let output = bin()
        .arg("--config")
        .arg(&config2)
        .arg("--mock-script")
        .arg(&script2)
        .arg("label")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("0 silver labels"));
}

#[test]
fn replay_works_from_cache_alone_and_reports_cache_misses() {
    let run = setup_mock_run(6, 2, 0.5, 13, 1, Strategy::TaskReinterpretation);
    run.run_full_pipeline(6, 2, 0.5);

    // Strip the mock script from the manifest so replay must rely on the
    // response cache with the recorded provider identities.
    let manifest_path = run.out_dir.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest.as_object_mut().unwrap().remove("mock_script");
    manifest.as_object_mut().unwrap().remove("mock_script_digest");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();

    let output = bin().arg("--config").arg(&run.config_path).arg("replay").output().unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "cache-only replay failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(String::from_utf8_lossy(&output.stdout).contains("reproduced"));

    // Remove the cache: replay must fail naming the missing digest.
    std::fs::remove_dir_all(run.dir.path().join("cache")).unwrap();
    let output = bin().arg("--config").arg(&run.config_path).arg("replay").output().unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("cache miss for digest"),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn two_identical_runs_produce_identical_artifacts() {
    let a = setup_mock_run(10, 2, 0.5, 19, 4, Strategy::ProgressFabrication);
    a.run_full_pipeline(10, 2, 0.5);
    let b = setup_mock_run(10, 2, 0.5, 19, 4, Strategy::ProgressFabrication);
    b.run_full_pipeline(10, 2, 0.5);

    for rel in [
        "judge_results.jsonl",
        "metrics.csv",
        "metrics.json",
        "plotdata.csv",
        "exclusions.json",
        "manipulated/progress_fabrication.jsonl",
        "labeled.jsonl",
    ] {
        let left = std::fs::read(a.out_dir.join(rel)).ok();
        let right = std::fs::read(b.out_dir.join(rel)).ok();
        assert_eq!(left, right, "artifact {rel} differs between identical runs");
    }
}

#[test]
fn caption_modality_on_captionless_dataset_exits_2_before_requests() {
    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    let mut t = trajectory("t1", GoldLabel::Failure, 2);
    t.steps[1].observation = ObservationRef::none();
    save_dataset(&Dataset::new(vec![t]), &dataset_path).unwrap();
    // No judge entries at all: if a request were issued the mock would still
    // answer, so the script content is irrelevant; the command must fail in
    // the precheck.
    let script = write_script(dir.path(), vec![text_entry(vec![""], "Status: success")]);
    let config = write_config(
        dir.path(),
        &dataset_path,
        "strategies = []\nmodes = [\"caption_modality\"]\n",
    );
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("judge")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("has no caption"));
}

#[test]
fn strict_score_fails_on_join_failures() {
    let run = setup_mock_run(6, 2, 0.5, 29, 1, Strategy::EnvironmentBlaming);
    run.run_full_pipeline(6, 2, 0.5);

    // Append a manipulated result with no original counterpart.
    let results_path = run.out_dir.join("judge_results.jsonl");
    let orphan = serde_json::json!({
        "trajectory_id": "fix-9999",
        "variant": "environment_blaming",
        "mode": "standard",
        "scaling": {"kind": "none"},
        "judge_model": "mock-judge",
        "raw_texts": ["Status: success"],
        "votes": ["success"],
        "final": "success",
        "request_digests": ["0"],
    });
    let mut text = std::fs::read_to_string(&results_path).unwrap();
    text.push_str(&format!("{orphan}\n"));
    std::fs::write(&results_path, text).unwrap();

    let lenient = run.run(&["score"]);
    assert_eq!(lenient.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("join failure"));

    let strict = bin()
        .arg("--config")
        .arg(&run.config_path)
        .arg("--mock-script")
        .arg(&run.script_path)
        .arg("--strict")
        .arg("score")
        .output()
        .unwrap();
    assert_eq!(strict.status.code(), Some(3), "{}", String::from_utf8_lossy(&strict.stderr));
}

#[test]
fn fixture_is_deterministic_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data.jsonl");
    let config = write_config(dir.path(), &dataset, "");
    for _ in 0..2 {
        let output = bin()
            .arg("--config")
            .arg(&config)
            .args(["fixture", "--n", "4", "--steps-per", "2", "--failure-fraction", "0.5"])
            .output()
            .unwrap();
        assert!(output.status.success());
    }
    let first = std::fs::read(&dataset).unwrap();
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["fixture", "--n", "4", "--steps-per", "2", "--failure-fraction", "0.5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(std::fs::read(&dataset).unwrap(), first);
}

#[test]
fn manipulate_with_no_failures_writes_empty_outputs_with_notice() {
    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    save_dataset(
        &Dataset::new(vec![
            trajectory("s1", GoldLabel::Success, 1),
            trajectory("s2", GoldLabel::Success, 1),
        ]),
        &dataset_path,
    )
    .unwrap();
    let script = write_script(dir.path(), vec![text_entry(vec![""], "unused")]);
    let config = write_config(dir.path(), &dataset_path, "strategies = [\"progress_fabrication\"]\n");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("manipulate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stdout).contains("nothing to manipulate"));
    let manipulated = std::fs::read_to_string(dir.path().join("out/manipulated/progress_fabrication.jsonl")).unwrap();
    assert!(manipulated.is_empty());
}

#[test]
fn rewrite_failures_are_excluded_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    save_dataset(
        &Dataset::new(vec![
            trajectory("bad-1", GoldLabel::Failure, 2),
            trajectory("good-1", GoldLabel::Failure, 2),
        ]),
        &dataset_path,
    )
    .unwrap();
    // bad-1 always gets a misaligned rewrite; good-1 a valid one.
    let good = trajectory("good-1", GoldLabel::Failure, 2);
    let valid: Vec<serde_json::Value> = good
        .steps
        .iter()
        .map(|s| {
            serde_json::json!({
                "action": s.action,
                "thought": format!("Fine. In summary, the next action I will perform is {}", s.action),
            })
        })
        .collect();
    let script = write_script(
        dir.path(),
        vec![
            text_entry(
                vec!["bad-1", "research engineer"],
                r#"[{"action": "click('wrong')", "thought": "nope"}, {"action": "click('also-wrong')", "thought": "nope"}]"#,
            ),
            text_entry(vec!["good-1", "research engineer"], &serde_json::to_string(&valid).unwrap()),
        ],
    );
    let config = write_config(dir.path(), &dataset_path, "strategies = [\"reflective_reasoning\"]\n");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("manipulate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "partial failure must not fail the command");

    let exclusions: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/exclusions.json")).unwrap()).unwrap();
    assert_eq!(exclusions.len(), 1);
    assert_eq!(exclusions[0]["id"], "bad-1");
    assert_eq!(exclusions[0]["strategy"], "reflective_reasoning");
    assert_eq!(exclusions[0]["attempts"], 2);

    let kept = std::fs::read_to_string(dir.path().join("out/manipulated/reflective_reasoning.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 1);
    assert!(kept.contains("good-1"));
}

#[test]
fn judge_grid_completeness_across_modes_and_scaling() {
    let run = setup_mock_run(6, 2, 0.5, 47, 2, Strategy::ProgressFabrication);
    run.run_expect_success(&["fixture", "--n", "6", "--steps-per", "2", "--failure-fraction", "0.5"]);
    run.run_expect_success(&["manipulate"]);

    // Widen the grid: all five modes, three scaling configs. The rubric mode
    // needs a keypoint rule, and it must precede the per-id judge rules or
    // the keypoint request (which contains the task, hence the id) would be
    // answered with a verdict.
    let mut script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&run.script_path).unwrap()).unwrap();
    let keypoint_entry = serde_json::json!({
        "match": "identify the key points",
        "text": "1. reach the target page\n2. confirm the result is shown",
    });
    script["entries"].as_array_mut().unwrap().insert(0, keypoint_entry);
    std::fs::write(&run.script_path, serde_json::to_string_pretty(&script).unwrap()).unwrap();

    let config_text = std::fs::read_to_string(&run.config_path).unwrap();
    let config_text = config_text.replace(
        "modes = [\"standard\"]",
        "modes = [\"standard\", \"manipulation_aware\", \"web_judge_rubric\", \"no_cot\", \"caption_modality\"]",
    ) + "\n[[scaling]]\nkind = \"parallel\"\nn_samples = 3\ntemperature = 1.0\n\n[[scaling]]\nkind = \"sequential\"\nthinking_budget_tokens = 1024\n";
    std::fs::write(&run.config_path, config_text).unwrap();

    run.run_expect_success(&["judge"]);
    let results = std::fs::read_to_string(run.out_dir.join("judge_results.jsonl")).unwrap();
    // (6 originals + 3 manipulated) x 5 modes x 3 scaling configs.
    assert_eq!(results.lines().count(), 9 * 5 * 3);
    assert!(results.contains("\"kind\":\"sequential\""));
    // Parallel results carry three votes each.
    let parallel_line = results
        .lines()
        .find(|l| l.contains("\"kind\":\"parallel\""))
        .expect("parallel results present");
    let value: serde_json::Value = serde_json::from_str(parallel_line).unwrap();
    assert_eq!(value["votes"].as_array().unwrap().len(), 3);
    assert_eq!(value["raw_texts"].as_array().unwrap().len(), 3);
    // Rubric results carry the generated keypoints.
    let rubric_line = results
        .lines()
        .find(|l| l.contains("\"mode\":\"web_judge_rubric\""))
        .expect("rubric results present");
    let value: serde_json::Value = serde_json::from_str(rubric_line).unwrap();
    assert!(value["keypoints"].as_str().unwrap().contains("reach the target page"));

    run.run_expect_success(&["score"]);
    let metrics = std::fs::read_to_string(run.out_dir.join("metrics.csv")).unwrap();
    // Baseline + strategy row per (mode, scaling) cell.
    assert_eq!(metrics.lines().count() - 1, 2 * 5 * 3);
}

#[test]
fn manipulate_writes_one_file_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    let failures: Vec<Trajectory> = (0..3).map(|i| trajectory(&format!("f{i}"), GoldLabel::Failure, 2)).collect();
    save_dataset(&Dataset::new(failures.clone()), &dataset_path).unwrap();

    let mut entries = Vec::new();
    for t in &failures {
        let valid: Vec<serde_json::Value> = t
            .steps
            .iter()
            .map(|s| {
                serde_json::json!({
                    "action": s.action,
                    "thought": format!("Sure. In summary, the next action I will perform is {}", s.action),
                })
            })
            .collect();
        entries.push(text_entry(
            vec![&t.id, "research engineer"],
            &serde_json::to_string(&valid).unwrap(),
        ));
    }
    let script = write_script(dir.path(), entries);
    let config = write_config(
        dir.path(),
        &dataset_path,
        "strategies = [\"progress_fabrication\", \"environment_blaming\"]\n",
    );
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("manipulate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));

    for strategy in ["progress_fabrication", "environment_blaming"] {
        let text = std::fs::read_to_string(dir.path().join(format!("out/manipulated/{strategy}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 3, "{strategy} file should have 3 trajectories");
        for line in text.lines() {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(value["strategy"], strategy);
            assert_eq!(value["gold_label"], "failure");
            assert!(value["rewrite_digest"].as_str().unwrap().len() == 64);
        }
    }
}


#[test]
fn manipulate_rerun_issues_zero_provider_calls() {
    use cotjudge_cli::config::{Overrides, PipelineConfig};
    use cotjudge_cli::stages::{cmd_manipulate, StageContext};

    let run = setup_mock_run(4, 2, 0.5, 31, 1, Strategy::ProgressFabrication);
    run.run_expect_success(&["fixture", "--n", "4", "--steps-per", "2", "--failure-fraction", "0.5"]);

    let config = PipelineConfig::load(Some(&run.config_path), &Overrides::default()).unwrap();
    let ctx = StageContext::new(config, false, Some(run.script_path.clone())).unwrap();
    cmd_manipulate(&ctx).unwrap();
    let calls_after_first = ctx.mock.as_ref().unwrap().call_count();
    assert!(calls_after_first > 0);

    // Unchanged inputs: every rewrite request hits the response cache.
    cmd_manipulate(&ctx).unwrap();
    assert_eq!(ctx.mock.as_ref().unwrap().call_count(), calls_after_first);
}

#[test]
fn dataset_root_flag_resolves_screenshot_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("assets/shots")).unwrap();
    std::fs::write(dir.path().join("assets/shots/a.png"), b"not-really-a-png").unwrap();

    let mut t = trajectory("shot-1", GoldLabel::Failure, 1);
    t.steps[0].observation = ObservationRef::both("shots/a.png", "A page with a form.");
    let dataset_path = dir.path().join("data.jsonl");
    save_dataset(&Dataset::new(vec![t.clone()]), &dataset_path).unwrap();

    let valid: Vec<serde_json::Value> = t
        .steps
        .iter()
        .map(|s| {
            serde_json::json!({
                "action": s.action,
                "thought": format!("Done. In summary, the next action I will perform is {}", s.action),
            })
        })
        .collect();
    let script = write_script(
        dir.path(),
        vec![text_entry(vec!["research engineer"], &serde_json::to_string(&valid).unwrap())],
    );
    let config = write_config(dir.path(), &dataset_path, "strategies = [\"environment_blaming\"]\n");

    // Without the flag the root defaults to the dataset's directory, where
    // the screenshot does not exist.
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--mock-script")
        .arg(&script)
        .arg("manipulate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stderr).contains("missing screenshot"));

    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--dataset-root")
        .arg(dir.path().join("assets"))
        .arg("--mock-script")
        .arg(&script)
        .arg("manipulate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
}
