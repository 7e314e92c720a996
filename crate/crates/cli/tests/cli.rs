use std::path::Path;
use std::process::{Command, Output};

use grnet_core::data::featfile::write_feature_file;
use grnet_core::data::manifest::{to_jsonl, ManifestRecord, Role, Split};
use grnet_core::pyramid::FeatureMap;
use grnet_core::DType;

fn grnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GRNET_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_single_line_error(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: {code}: ")), "{err}");
}

fn record(id: &str, role: Role, identity: &str) -> ManifestRecord {
    serde_json::from_value(serde_json::json!({
        "id": id,
        "role": match role { Role::Query => "query", Role::Gallery => "gallery" },
        "identity": identity,
        "path": format!("features/{id}.spyr"),
        "split": "test",
    }))
    .unwrap()
}

/// Three 1x1 two-channel queries whose true matches rank 1st, 2nd and 3rd
/// under cosine similarity.
fn toy_set(dir: &Path) {
    let items: [(&str, Role, &str, [f32; 2]); 6] = [
        ("q-a", Role::Query, "a", [1.0, 0.0]),
        ("q-b", Role::Query, "b", [0.0, 1.0]),
        ("q-c", Role::Query, "c", [1.0, 0.01]),
        ("g-a", Role::Gallery, "a", [1.0, 0.0]),
        ("g-b", Role::Gallery, "b", [1.0, 0.2]),
        ("g-c", Role::Gallery, "c", [0.0, 1.0]),
    ];
    let mut records = Vec::new();
    for (id, role, identity, v) in items {
        let r = record(id, role, identity);
        let map = FeatureMap::new(2, 1, 1, v.to_vec()).unwrap();
        std::fs::create_dir_all(dir.join("features")).unwrap();
        write_feature_file(&dir.join(&r.path), &map, DType::F32).unwrap();
        records.push(r);
    }
    assert!(records.iter().all(|r| r.split == Split::Test));
    std::fs::write(dir.join("manifest.jsonl"), to_jsonl(&records)).unwrap();
}

#[test]
fn gradcheck_passes_on_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = grnet(
        &["gradcheck", "--scales", "1x1,2x2", "--dim", "8", "--hidden", "4", "--precision", "f64"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let value: f64 = out
        .trim()
        .strip_prefix("PASS max_rel_err=")
        .expect("PASS line")
        .parse()
        .unwrap();
    assert!(value < 1e-4);
}

#[test]
fn gradcheck_rejects_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let o = grnet(&["gradcheck", "--precision", "f32"], dir.path());
    assert_single_line_error(&o, "config");
}

#[test]
fn eval_reports_hand_counted_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    toy_set(dir.path());
    let o = grnet(
        &[
            "eval", "--data", "manifest.jsonl", "--scorer", "global-cosine", "--protocol", "E",
            "--k", "1,2,3", "--out", "report.txt", "--ranking", "ranking.txt",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report, stdout(&o));
    let body: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        body,
        [
            "protocol=E k=1 queries=3 accuracy=0.3333",
            "protocol=E k=2 queries=3 accuracy=0.6667",
            "protocol=E k=3 queries=3 accuracy=1.0000",
        ]
    );
    assert!(report.starts_with("# config {"));
    let ranking = std::fs::read_to_string(dir.path().join("ranking.txt")).unwrap();
    assert!(ranking.contains("q-b\tg-c g-b g-a\n"), "{ranking}");
}

#[test]
fn eval_failures_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    toy_set(dir.path());
    let o = grnet(&["eval", "--data", "manifest.jsonl", "--scorer", "global-cosine", "--protocol", "HV"], dir.path());
    assert_single_line_error(&o, "empty-protocol");

    let text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let first = text.lines().next().unwrap().to_string();
    std::fs::write(dir.path().join("dup.jsonl"), format!("{text}{first}\n")).unwrap();
    let o = grnet(&["eval", "--data", "dup.jsonl", "--scorer", "global-cosine"], dir.path());
    assert_single_line_error(&o, "manifest-duplicate-id");

    let o = grnet(&["eval", "--data", "missing.jsonl", "--scorer", "global-cosine"], dir.path());
    assert_single_line_error(&o, "io");

    let o = grnet(&["eval", "--data", "manifest.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn synth_train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = [
        "synth", "--train-identities", "12", "--test-identities", "4", "--distractors", "4", "--seed", "9",
    ];
    for out in ["a", "b"] {
        let mut args = synth.to_vec();
        args.extend(["--out", out]);
        let o = grnet(&args, d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = std::fs::read(d.join("a/manifest.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(d.join("b/manifest.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a/features/q-test-0002.spyr")).unwrap(),
        std::fs::read(d.join("b/features/q-test-0002.spyr")).unwrap()
    );
    assert!(String::from_utf8(ma).unwrap().starts_with("# synth {"));

    std::fs::write(
        d.join("cfg.json"),
        r#"{"pyramid":"1x1,2x2","reasoning":{"layers":2,"hidden":4,"proj_dim":4},
            "schedule":{"epochs":2,"steps_per_epoch":2},"batch":{"identities":4},"seed":3}"#,
    )
    .unwrap();
    let train = ["train", "--data", "a/manifest.jsonl", "--out", "m.grnc", "--config", "cfg.json", "--quiet"];
    let o = grnet(&train, d);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("m.grnc.log")).unwrap();
    assert!(log.starts_with("# config {"));
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 4);
    let first_ckpt = std::fs::read(d.join("m.grnc")).unwrap();
    assert!(grnet(&train, d).status.success());
    assert_eq!(std::fs::read(d.join("m.grnc")).unwrap(), first_ckpt);
    assert_eq!(std::fs::read_to_string(d.join("m.grnc.log")).unwrap(), log);

    let o = grnet(&["eval", "--data", "a/manifest.jsonl", "--checkpoint", "m.grnc", "--k", "1,4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("\"seed\":3"));
    assert!(out.lines().any(|l| l.starts_with("protocol=E k=4 queries=")));

    let o = grnet(&["inspect", "m.grnc"], d);
    let out = stdout(&o);
    assert!(out.contains("kind=checkpoint dtype=f64") && out.contains("param=head.bias shape=[2] decay=false"));
    let o = grnet(&["inspect", "a/manifest.jsonl"], d);
    let out = stdout(&o);
    assert!(out.contains("split=train queries=12 gallery=12 identities=12") && out.contains("valid=true"), "{out}");
    let o = grnet(&["inspect", "a/features/g-distractor-0001.spyr"], d);
    assert!(stdout(&o).starts_with("kind=features dtype=f32 channels=16 height=12 width=12"));
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"train_identities":8,"test_identities":4,"distractors":4}"#).unwrap();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"reasoning":{"layers":1,"hidden":4,"proj_dim":4},"schedule":{"epochs":1,"steps_per_epoch":1},"batch":{"identities":4}}"#,
    )
    .unwrap();
    let o = grnet(
        &[
            "ablate", "--spec", "spec.json", "--config", "cfg.json", "--variants", "global-only,scales-2,full",
            "--seeds", "0,1", "--out", "table.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(d.join("table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(rows[0].starts_with("variant"));
    for (row, name) in rows[1..].iter().zip(["global-only", "scales-2", "full"]) {
        assert!(row.starts_with(name));
        assert_eq!(row.split_whitespace().nth(1), Some("2"));
    }
    assert_single_line_error(&grnet(&["ablate", "--variants", "bogus", "--seeds", "0"], d), "config");
}
