use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mui_apt::annotations::read_annotations;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mui-apt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().filter(|l| l.starts_with('{')).map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Small synthetic fixture; `extra` goes to the synth subcommand.
fn fixture(extra: &[&str]) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    let mut args = vec!["synth", "--out", p(&fx), "--n-train", "60", "--n-val", "30"];
    args.extend_from_slice(extra);
    ok(&args);
    (dir, fx)
}

fn train_args<'a>(fx: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "train".into(),
        "--annotations".into(),
        fx.join("train.jsonl").display().to_string(),
        "--embeddings".into(),
        fx.join("embeddings.apte").display().to_string(),
        "--categories".into(),
        fx.join("categories.txt").display().to_string(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn ok_owned(args: &[String]) -> String {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

/// One button with its label inside at a tenth of its area, plus one icon
/// without text.
const LINK_SCENARIO: &str = r#"{"image_id":"s1","width":200,"height":100,"elements":[{"bbox":[0,0,100,40],"category":"button"},{"bbox":[120,0,160,40],"category":"icon"}],"ocr":[{"bbox":[10,10,50,20],"text":"Add to cart"}]}
"#;

fn link_rate(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("linked elements")).unwrap();
    let pct = line.split('(').nth(1).unwrap().split('%').next().unwrap();
    pct.parse().unwrap()
}

#[test]
fn link_rate_is_higher_under_iom() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("a.jsonl");
    fs::write(&ann, LINK_SCENARIO).unwrap();
    let iou = ok(&["link", p(&ann), "--metric", "iou"]);
    let iom = ok(&["link", p(&ann), "--metric", "iom"]);
    assert!(link_rate(&iou) < link_rate(&iom), "{iou}\n{iom}");
    assert_eq!(link_rate(&iom), 50.0);
}

#[test]
fn threshold_one_links_nothing_and_output_reparses() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("a.jsonl");
    let out = dir.path().join("linked.jsonl");
    fs::write(&ann, LINK_SCENARIO).unwrap();
    assert_eq!(link_rate(&ok(&["link", p(&ann), "--threshold", "1.0"])), 0.0);
    ok(&["link", p(&ann), "--out", p(&out)]);
    let screens = read_annotations(&out).unwrap();
    let links = screens[0].links.as_ref().unwrap();
    assert_eq!(links.descriptions, ["Add to cart", ""]);
    // the linked file links again to the same result
    let again = dir.path().join("again.jsonl");
    ok(&["link", p(&out), "--out", p(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn parse_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("bad.jsonl");
    fs::write(&ann, format!("{LINK_SCENARIO}{}", LINK_SCENARIO.replace("s1", "s2").replace("[0,0,100,40]", "[0,0,0,5]"))).unwrap();
    let out = run(&["link", p(&ann)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":2:") && err.contains("zero-area box"), "{err}");
}

#[test]
fn train_reports_twelve_epochs_and_echoes_tau() {
    let (dir, fx) = fixture(&[]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "tau = 0.01\nseed = 7\n").unwrap();
    let report = dir.path().join("report.jsonl");
    let args = train_args(&fx, &["--config", p(&cfg), "--report-out", p(&report)]);
    ok_owned(&args);
    let lines = json_lines(&fs::read_to_string(&report).unwrap());
    assert_eq!(lines[0]["kind"], "header");
    assert_eq!(lines[0]["tau"], 0.01);
    assert_eq!(lines[0]["seed"], 7);
    assert_eq!(lines.iter().filter(|l| l["kind"] == "epoch").count(), 12);
    // flags override the file
    let stdout = ok_owned(&train_args(&fx, &["--config", p(&cfg), "--epochs", "2"]));
    let lines = json_lines(&stdout);
    assert_eq!(lines.iter().filter(|l| l["kind"] == "epoch").count(), 2);
    assert_eq!(lines[0]["tau"], 0.01);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_reports() {
    let (dir, fx) = fixture(&[]);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let ck = dir.path().join(format!("ck{k}.apte"));
        let rep = dir.path().join(format!("r{k}.jsonl"));
        ok_owned(&train_args(&fx, &["--seed", "3", "--checkpoint-out", p(&ck), "--report-out", p(&rep)]));
        outputs.push((fs::read(&ck).unwrap(), fs::read(&rep).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let ck = dir.path().join("other.apte");
    ok_owned(&train_args(&fx, &["--seed", "4", "--checkpoint-out", p(&ck)]));
    assert_ne!(fs::read(&ck).unwrap(), outputs[0].0);
}

#[test]
fn missing_keys_are_listed_together() {
    let (dir, fx) = fixture(&[]);
    let ann = dir.path().join("extra.jsonl");
    fs::write(
        &ann,
        r#"{"image_id":"ghost","width":400,"height":300,"elements":[{"bbox":[0,0,50,50],"category":"icon"},{"bbox":[60,0,110,50],"category":"menu"}],"ocr":[{"bbox":[5,5,20,20],"text":"never seen"}]}
"#,
    )
    .unwrap();
    let mut args = train_args(&fx, &[]);
    args[2] = ann.display().to_string();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["img:ghost:0", "img:ghost:1", "ocr:never seen"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

fn eval_args(fx: &Path, ck: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "eval",
        "--checkpoint",
        p(ck),
        "--annotations",
        p(&fx.join("val.jsonl")),
        "--embeddings",
        p(&fx.join("embeddings.apte")),
        "--categories",
        p(&fx.join("categories.txt")),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn summary(stdout: &str) -> Value {
    json_lines(stdout).into_iter().find(|l| l["kind"] == "summary").unwrap()
}

#[test]
fn novel_split_evaluates_zero_shot_prompts() {
    let (dir, fx) = fixture(&["--categories", "8", "--novel", "2"]);
    let ck = dir.path().join("ck.apte");
    let train_out = ok_owned(&train_args(&fx, &["--checkpoint-out", p(&ck)]));
    let header = &json_lines(&train_out)[0];
    assert_eq!(header["split"], "base");
    assert_eq!(header["categories"].as_array().unwrap().len(), 6);

    let novel = ok_owned(&eval_args(&fx, &ck, &["--split", "novel"]));
    let cats: Vec<Value> = json_lines(&novel).into_iter().filter(|l| l["kind"] == "category").collect();
    let names: Vec<&str> = cats.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["tab", "search"]);
    let s = summary(&novel);
    assert_eq!(s["evaluated"], 2);
    assert!(s["map"].as_f64().unwrap() > 0.0);
    let all = summary(&ok_owned(&eval_args(&fx, &ck, &["--split", "all", "--coco"])));
    assert_eq!(all["evaluated"], 8);
}

#[test]
fn dimension_mismatch_is_reported() {
    let (dir, fx) = fixture(&[]);
    let (_other_dir, other) = fixture(&["--dim", "32"]);
    let ck = dir.path().join("ck.apte");
    ok_owned(&train_args(&other, &["--checkpoint-out", p(&ck), "--epochs", "1"]));
    let args = eval_args(&fx, &ck, &[]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));
}

#[test]
fn detection_files_score_as_expected() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("gt.jsonl");
    let cats = dir.path().join("cats.txt");
    fs::write(&cats, "button,base\nicon,base\n").unwrap();
    fs::write(
        &ann,
        r#"{"image_id":"a","width":100,"height":100,"elements":[{"bbox":[0,0,10,10],"category":"button"},{"bbox":[50,50,60,60],"category":"button"}],"ocr":[]}
"#,
    )
    .unwrap();
    let perfect = dir.path().join("perfect.jsonl");
    fs::write(
        &perfect,
        "{\"image_id\":\"a\",\"bbox\":[0,0,10,10],\"category\":\"button\",\"score\":0.9}\n{\"image_id\":\"a\",\"bbox\":[50,50,60,60],\"category\":\"button\",\"score\":0.8}\n",
    )
    .unwrap();
    let base = ["eval", "--annotations", p(&ann), "--categories", p(&cats), "--detections"];
    let s = summary(&ok(&[&base[..], &[p(&perfect)]].concat()));
    assert_eq!(s["map"], 1.0);
    assert_eq!(s["evaluated"], 1);

    // TP 0.9, FP 0.8, TP 0.7 over two ground truths: 0.5 + 0.5 · 2/3
    let mixed = dir.path().join("mixed.jsonl");
    fs::write(
        &mixed,
        "{\"image_id\":\"a\",\"bbox\":[0,0,10,10],\"category\":\"button\",\"score\":0.9}\n{\"image_id\":\"a\",\"bbox\":[20,20,30,30],\"category\":\"button\",\"score\":0.8}\n{\"image_id\":\"a\",\"bbox\":[50,50,60,60],\"category\":\"button\",\"score\":0.7}\n",
    )
    .unwrap();
    let s = summary(&ok(&[&base[..], &[p(&mixed)]].concat()));
    assert!((s["map"].as_f64().unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-9);
}

fn ablation_rows(stdout: &str) -> Vec<Value> {
    json_lines(stdout).into_iter().filter(|l| l["kind"] == "row").collect()
}

#[test]
fn ablate_enumerates_axes() {
    let (_dir, fx) = fixture(&[]);
    let rows = ablation_rows(&ok(&["ablate", "--fixture", p(&fx), "--axes", "fusion", "--epochs", "2"]));
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["baseline", "fusion=sum", "fusion=multiply", "fusion=attention"]);
    for r in &rows {
        let (a, m) = (r["accuracy"].as_f64().unwrap(), r["map"].as_f64().unwrap());
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&m));
    }
    let rows = ablation_rows(&ok(&["ablate", "--fixture", p(&fx), "--axes", "tuning", "--epochs", "2"]));
    let tunings: Vec<&str> = rows[1..].iter().map(|r| r["tuning"].as_str().unwrap()).collect();
    assert_eq!(tunings, ["prompt-both", "prompt-ocr", "prompt-vision", "vision-both"]);

    let out = run(&["ablate", "--fixture", p(&fx), "--axes", "fusion,depth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
}

#[test]
fn sum_fusion_is_not_worse_than_multiply_over_the_full_product() {
    let dir = TempDir::new().unwrap();
    let fx = dir.path().join("fx");
    ok(&["synth", "--out", p(&fx)]);
    let rows = ablation_rows(&ok(&["ablate", "--fixture", p(&fx), "--seed", "7"]));
    assert_eq!(rows.len(), 1 + 3 * 4 * 2 * 2);
    let mean = |fusion: &str| {
        let acc: Vec<f64> =
            rows[1..].iter().filter(|r| r["fusion"] == fusion).map(|r| r["accuracy"].as_f64().unwrap()).collect();
        acc.iter().sum::<f64>() / acc.len() as f64
    };
    assert!(mean("sum") >= mean("multiply"), "sum {} multiply {}", mean("sum"), mean("multiply"));
}

#[test]
fn synth_is_deterministic() {
    let (_a, fa) = fixture(&[]);
    let (_b, fb) = fixture(&[]);
    for f in ["train.jsonl", "val.jsonl", "embeddings.apte", "categories.txt"] {
        assert_eq!(fs::read(fa.join(f)).unwrap(), fs::read(fb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_embedding_file_is_a_format_error() {
    let (dir, fx) = fixture(&[]);
    let bad = dir.path().join("bad.apte");
    let mut bytes = fs::read(fx.join("embeddings.apte")).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&bad, bytes).unwrap();
    let mut args = train_args(&fx, &[]);
    args[4] = bad.display().to_string();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}
