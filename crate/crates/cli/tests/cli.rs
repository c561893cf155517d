use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seq_len = 20\ndim = 16\nepochs = 2\nbatch_size = 16\nseed = 3\n";

fn leo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leo")).args(args).output().expect("run leo")
}

fn ok(args: &[&str]) -> String {
    let out = leo(args);
    assert!(out.status.success(), "leo {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", p(dir), "--seed", "1", "--n-id", "40", "--n-id-test", "10", "--n-ood", "15"]);
}

#[test]
fn synth_train_eval_score_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cfg = d.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (train, id, ood) = (d.join("id_train.jsonl"), d.join("id_test.jsonl"), d.join("ood_test.jsonl"));
    assert_eq!(fs::read_to_string(&train).unwrap().lines().count(), 80);

    let model = d.join("m.leo");
    ok(&["train", "--data", p(&train), "--model", p(&model), "--config", p(&cfg)]);
    assert_eq!(&fs::read(&model).unwrap()[..4], b"LEO1");

    let report = d.join("report.csv");
    let dump = d.join("dump.csv");
    let stdout = ok(&[
        "eval", "--model", p(&model), "--id-test", p(&id), "--ood-test", p(&ood), "--out", p(&report), "--dump", p(&dump),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(stdout, text);
    let auroc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("auroc,"))
        .expect("auroc row")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    let dump_text = fs::read_to_string(&dump).unwrap();
    assert_eq!(dump_text.lines().count(), 1 + 20 + 15);
    assert!(dump_text.starts_with("id,population,score,decision"));

    let scores = d.join("scores.csv");
    ok(&["score", "--model", p(&model), "--data", p(&ood), "--out", p(&scores), "--population", "ood"]);
    let rows: Vec<String> = fs::read_to_string(&scores).unwrap().lines().skip(1).map(str::to_string).collect();
    let ood_rows: Vec<&str> = dump_text.lines().filter(|l| l.contains(",ood,")).collect();
    assert_eq!(rows, ood_rows);
}

#[test]
fn flags_override_config_and_seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let train = d.join("id_train.jsonl");
    let out = leo(&["vocab", "--data", p(&train), "--out", p(&d.join("v.txt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let cfg = d.join("c.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (d.join("a.leo"), d.join("b.leo"));
    ok(&["train", "--data", p(&train), "--model", p(&a), "--config", p(&cfg)]);
    ok(&["train", "--data", p(&train), "--model", p(&b), "--config", p(&cfg), "--seed", "4"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bad = leo(&["train", "--data", p(&train), "--model", p(&b), "--config", p(&cfg), "--variant", "nope"]);
    assert!(!bad.status.success());
}

#[test]
fn normalize_and_vocab_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("d.jsonl");
    let mut lines = String::new();
    for i in 0..6 {
        lines.push_str(&format!("{{\"id\":\"f{i}\",\"code\":\"for(var1=0;var1<10;var1++) foo{i}(x);\",\"label\":{}}}\n", i % 2));
    }
    fs::write(&data, lines).unwrap();
    let norm = d.join("n.jsonl");
    ok(&["normalize", "--data", p(&data), "--out", p(&norm)]);
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(&norm).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "f0");
    let stmt: Vec<&str> = first["statements"][0].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(stmt.join(","), "for,(,var1,=,0,;,var1,<,10,;,var1,++,)");

    let vocab = d.join("v.txt");
    ok(&["vocab", "--data", p(&data), "--out", p(&vocab), "--seed", "1"]);
    let tokens: Vec<String> = fs::read_to_string(&vocab).unwrap().lines().map(str::to_string).collect();
    assert!(tokens.iter().any(|t| t == "for"));
}

#[test]
fn errors_are_reported_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let junk = d.join("junk.leo");
    fs::write(&junk, b"not a model").unwrap();
    let empty = d.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = leo(&["eval", "--model", p(&junk), "--id-test", p(&empty), "--ood-test", p(&empty), "--out", p(&d.join("r.csv"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.trim_end().lines().last().unwrap().starts_with("error: model format error"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn ablate_reports_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cfg = d.join("c.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = d.join("ablate.csv");
    let j = |n: &str| d.join(n);
    ok(&[
        "ablate", "--data", p(&j("id_train.jsonl")), "--id-test", p(&j("id_test.jsonl")), "--ood-test",
        p(&j("ood_test.jsonl")), "--out", p(&out), "--config", p(&cfg),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["leo", "leo-wo-cd"]);
}
