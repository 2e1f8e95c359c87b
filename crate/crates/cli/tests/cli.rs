use std::path::{Path, PathBuf};

use proptest::prelude::*;
use uragc_cli::main_with;
use uragc_cli::tables::{cells, load_report, parse_csv, render_csv, Panel};
use uragc_core::model::write_dataset;
use uragc_core::{McqaInstance, SplitSpec};
use uragc_providers::mock::{ChatRule, MockResponse, MockScript};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn no_env(_: &str) -> Option<String> {
    None
}

fn run(args: &[&str]) -> i32 {
    let mut all = vec!["uragc"];
    all.extend_from_slice(args);
    main_with(all, &no_env)
}

fn config() -> String {
    fixtures().join("config.toml").display().to_string()
}

#[test]
fn smoke_run_writes_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().display().to_string();
    let code = run(&["--config", &config(), "--out", &o, "run", "--strategy", "naive", "--protocol", "normal", "--alpha", "0.1"]);
    assert_eq!(code, 0);
    for f in ["naive_normal.report.json", "naive_normal.records.jsonl", "naive_normal.csv", "naive_normal.summary.txt", "config.resolved.json"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let report = load_report(&out.path().join("naive_normal.report.json")).unwrap();
    let csv = std::fs::read_to_string(out.path().join("naive_normal.csv")).unwrap();
    let parsed = parse_csv(&csv).unwrap();
    let acc = parsed.iter().find(|c| c.panel == Panel::Acc).unwrap();
    assert!((acc.value - report.headline.acc).abs() < 1e-9);
}

#[test]
fn invalid_alpha_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().display().to_string();
    assert_eq!(run(&["--config", &config(), "--out", &o, "run", "--alpha", "1.5"]), 1);
    assert!(!out.path().join("config.resolved.json").exists());
    assert_eq!(run(&["run", "--no-such-flag"]), 1);
}

#[test]
fn coverage_floor_violation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Vec::new();
    let mut script = MockScript::default();
    for i in 0..40 {
        let id = format!("r{i:02}");
        let question = format!("Rigged question {i}?");
        // calibration answers look certain; test answers put the gold last
        let gold_p: f64 = if i < 20 { 0.97 } else { 0.001 };
        let rest = (1.0 - gold_p) / 3.0;
        let mut labels = vec![("A", gold_p.ln())];
        labels.push(("B", if i < 20 { rest.ln() } else { 0.9f64.ln() }));
        labels.push(("C", rest.ln()));
        labels.push(("D", rest.ln()));
        script.chat.push(ChatRule::contains(&[&question], MockResponse::labels(&labels)));
        data.push(McqaInstance {
            id,
            question,
            options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
            answer_index: 0,
            corpus_ref: "none".into(),
            tags: Vec::new(),
        });
    }
    let split = SplitSpec {
        calibration_ids: data[..20].iter().map(|d| d.id.clone()).collect(),
        test_ids: data[20..].iter().map(|d| d.id.clone()).collect(),
        seed: 0,
    };
    let ds = dir.path().join("d.jsonl");
    write_dataset(std::fs::File::create(&ds).unwrap(), &data).unwrap();
    let sp = dir.path().join("s.json");
    std::fs::write(&sp, serde_json::to_string(&split).unwrap()).unwrap();
    let mock = dir.path().join("m.json");
    script.save(&mock).unwrap();
    let o = dir.path().join("o");
    let args = [
        "--mock", mock.to_str().unwrap(), "--out", o.to_str().unwrap(),
        "run", "--strategy", "no_retrieve", "--dataset", ds.to_str().unwrap(), "--split", sp.to_str().unwrap(),
    ];
    assert_eq!(run(&args), 2);
}

#[test]
fn forge_emits_one_instance_per_seed() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().display().to_string();
    assert_eq!(run(&["--config", &config(), "--out", &o, "forge"]), 0);
    let text = std::fs::read_to_string(out.path().join("forged.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let table = std::fs::read_to_string(out.path().join("forge_table.csv")).unwrap();
    assert!(table.starts_with("Naive,Iter 1,Iter 2,Iter 3\n"));
    let prov = std::fs::read_to_string(out.path().join("forged.provenance.jsonl")).unwrap();
    assert!(prov.lines().all(|l| l.contains("\"config_hash\"")));
    let missing = out.path().join("nope.jsonl").display().to_string();
    assert_eq!(run(&["--config", &config(), "--out", &o, "forge", "--seeds", &missing]), 1);
}

#[test]
fn report_panels_and_deltas() {
    let out = tempfile::tempdir().unwrap();
    let a = out.path().join("a").display().to_string();
    let b = out.path().join("b").display().to_string();
    let t = out.path().join("t").display().to_string();
    assert_eq!(run(&["--config", &config(), "--out", &a, "run", "--strategy", "naive,hyde"]), 0);
    let code = run(&["--config", &config(), "--out", &b, "run", "--strategy", "naive,hyde", "--protocol", "wrong_aware"]);
    assert!(code == 0 || code == 2);
    assert_eq!(run(&["--out", &t, "report", &a, &b]), 0);
    let delta = std::fs::read_to_string(out.path().join("t/delta.csv")).unwrap();
    assert_eq!(delta.lines().count(), 3);
    let txt = std::fs::read_to_string(out.path().join("t/report.txt")).unwrap();
    assert!(txt.contains("Accuracy (%)") && txt.contains("Differences"));

    let t1 = out.path().join("t1").display().to_string();
    let single = format!("{a}/naive_normal.report.json");
    assert_eq!(run(&["--out", &t1, "report", &single]), 0);
    assert!(!out.path().join("t1/delta.csv").exists());

    let bad = out.path().join("bad.report.json");
    std::fs::write(&bad, "{\"schema_version\": 99}").unwrap();
    let bad_s = bad.display().to_string();
    assert_eq!(run(&["--out", &t1, "report", &bad_s]), 1);
}

#[test]
fn calibrate_from_report() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().display().to_string();
    assert_eq!(run(&["--config", &config(), "--out", &o, "run"]), 0);
    let rep = out.path().join("naive_normal.report.json").display().to_string();
    assert_eq!(run(&["--out", &o, "calibrate", "--report", &rep]), 0);
    let cal: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("naive_normal.calibration.json")).unwrap()).unwrap();
    assert_eq!(cal.as_array().unwrap().len(), 2);
    assert!(cal[0].get("q_hat").is_some());
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = d.path().display().to_string();
        assert_eq!(run(&["--seed", "1", "--out", &o, "synth", "--n", "300", "--k", "4", "--calibration", "100"]), 0);
    }
    for f in ["synth_dataset.jsonl", "synth_mock.json", "synth_split.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let n = std::fs::read_to_string(a.path().join("synth_dataset.jsonl")).unwrap().lines().count();
    assert_eq!(n, 300);
    let o = a.path().display().to_string();
    assert_eq!(run(&["--out", &o, "synth", "--k", "1"]), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn csv_round_trips_report_values(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..4.0), 1..6)) {
        let out = tempfile::tempdir().unwrap();
        let o = out.path().display().to_string();
        // one real report as a template, headline values replaced
        let template = {
            assert_eq!(run(&["--config", &config(), "--out", &o, "run", "--strategy", "no_retrieve"]), 0);
            load_report(&out.path().join("no_retrieve_normal.report.json")).unwrap()
        };
        let reports: Vec<_> = vals.iter().enumerate().map(|(i, (acc, cr, ss))| {
            let mut r = template.clone();
            r.metadata.datasets = vec![format!("ds{i}")];
            r.headline.acc = *acc;
            r.headline.cr = *cr;
            r.headline.ss = *ss;
            r
        }).collect();
        let cs = cells(&reports);
        let back = parse_csv(&render_csv(&cs).unwrap()).unwrap();
        prop_assert_eq!(back.len(), cs.len());
        for c in &cs {
            let b = back.iter().find(|b| b.panel == c.panel && b.row == c.row && b.dataset == c.dataset).unwrap();
            prop_assert!((b.value - c.value).abs() < 1e-9);
        }
    }
}
