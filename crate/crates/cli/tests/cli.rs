use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
users = 40
venues = 100
topics = 5
min_len = 8
max_len = 12

[train]
pretrain_epochs = 1
stage1_epochs = 1
stage2_epochs = 1
"#;

fn mmpoi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmpoi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mmpoi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    Fixture { _dir: dir, root, config }
}

impl Fixture {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth_and_prepare(&self) -> PathBuf {
        let raw = self.p("raw");
        ok(&["--config", s(&self.config), "synth", "--out", s(&raw)]);
        let corpus = self.p("corpus");
        ok(&[
            "--config", s(&self.config), "prepare",
            "--checkins", s(&raw.join("checkins.tsv")),
            "--postal", s(&raw.join("postal.csv")),
            "--geocoder-fixtures", s(&raw.join("geocoder.jsonl")),
            "--venue-images", s(&raw.join("venue_images.jsonl")),
            "--captions", s(&raw.join("captions.jsonl")),
            "--min-checkins", "1",
            "--out", s(&corpus),
        ]);
        corpus
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let f = fixture();
    let out = mmpoi(&["prepare", "--checkins", "x.tsv", "--geocoder-fixtures", "g", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--postal"));

    let bad = f.p("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let out = mmpoi(&["--config", s(&bad), "synth", "--out", s(&f.p("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochz"));

    let out = mmpoi(&[
        "prepare", "--checkins", s(&f.p("missing.tsv")), "--postal", s(&f.p("missing.csv")),
        "--geocoder-fixtures", s(&f.p("g.jsonl")), "--out", s(&f.p("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkins"));

    assert_eq!(mmpoi(&["ablate", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let f = fixture();
    let raw = f.p("raw");
    ok(&["--config", s(&f.config), "synth", "--out", s(&raw)]);
    std::fs::write(f.p("broken.jsonl"), "{not json\n").unwrap();
    let out = mmpoi(&[
        "prepare",
        "--checkins", s(&raw.join("checkins.tsv")),
        "--postal", s(&raw.join("postal.csv")),
        "--geocoder-fixtures", s(&f.p("broken.jsonl")),
        "--out", s(&f.p("corpus")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn end_to_end_pipeline() {
    let f = fixture();
    let corpus = f.synth_and_prepare();
    let counts: serde_json::Value =
        serde_json::from_slice(&std::fs::read(corpus.join("stage_counts.json")).unwrap()).unwrap();
    assert_eq!(counts["users"], 40);
    assert_eq!(counts["malformed_lines"], 0);
    assert_eq!(counts["final_pois"], counts["pois_with_description"]);

    let cfg = s(&f.config);
    let pre = f.p("pre");
    let fine = f.p("fine");
    ok(&["--config", cfg, "pretrain", "--corpus", s(&corpus), "--out", s(&pre)]);
    ok(&["--config", cfg, "finetune", "--corpus", s(&corpus), "--encoder", s(&pre), "--out", s(&fine)]);
    let index = fine.join("index.bin");
    assert!(index.exists());

    let eval = f.p("eval");
    let table = ok(&[
        "--config", cfg, "evaluate", "--corpus", s(&corpus), "--encoder", s(&fine),
        "--index", s(&index), "--out", s(&eval),
    ]);
    assert!(table.contains("With"));
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let history = f.p("history.txt");
    std::fs::write(&history, "v00001\nnot-a-venue\nv00002\n").unwrap();
    let rec = f.p("rec");
    let rows = ok(&[
        "--config", cfg, "recommend", "--corpus", s(&corpus), "--encoder", s(&fine),
        "--index", s(&index), "--history", s(&history), "--top-k", "7", "--exclude-seen",
        "--out", s(&rec),
    ]);
    let rows: Vec<&str> = rows.lines().collect();
    assert_eq!(rows.len(), 7);
    let scores: Vec<f64> = rows.iter().map(|r| r.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows.iter().all(|r| !r.starts_with("v00001\t") && !r.starts_with("v00002\t")));

    for dir in [&corpus, &pre, &fine, &eval, &rec] {
        ok(&["verify", "--out", s(dir)]);
    }
    std::fs::write(eval.join("metrics.txt"), "tampered").unwrap();
    let out = mmpoi(&["verify", "--out", s(&eval)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics.txt"));
}

#[test]
fn ablation_without_descriptions_in_both_arms_matches() {
    let f = fixture();
    let out = f.p("ablate");
    let table = ok(&[
        "--config", s(&f.config), "--seed", "3", "ablate", "--synth", "desc-only",
        "--no-desc-both", "--out", s(&out),
    ]);
    let numbers = |label: &str| {
        let row = table.lines().find(|l| l.starts_with(label)).unwrap();
        row.split_whitespace().filter(|w| w.parse::<f64>().is_ok()).collect::<Vec<_>>()
    };
    assert_eq!(numbers("With"), numbers("Without"), "{table}");
    let with = std::fs::read(out.join("with_desc.json")).unwrap();
    let without = std::fs::read(out.join("without_desc.json")).unwrap();
    assert_eq!(with, without);
    for arm in ["with_desc", "without_desc"] {
        assert!(out.join("logs").join(arm).join("finetune_log.jsonl").exists());
    }
    ok(&["verify", "--out", s(&out)]);
}
