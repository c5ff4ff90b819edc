use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use structlearn::cli::{self, CORPUS_FILE, TAXONOMY_FILE};

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("structlearn").chain(args.iter().copied()))
}

fn toy(dir: &Path) -> (PathBuf, PathBuf) {
    let tax = dir.join("tax.json");
    fs::write(&tax, r#"{"emissions":"Environment","solar":"Energy","wind":"Energy"}"#).unwrap();
    let corpus = dir.join("claims.jsonl");
    fs::write(
        &corpus,
        r#"{"id":"a","embedding":[1,0,0],"labels":[{"aspect":"emissions","action":"implemented"}]}
{"id":"b","embedding":[0,1,0],"labels":[{"aspect":"emissions","action":"planning"}]}
{"id":"c","embedding":[0,0,1],"labels":[{"aspect":"solar","action":"planning"}]}
{"id":"d","embedding":[1,1,0],"labels":[]}
{"id":"e","embedding":[0,1,1],"labels":[{"aspect":"wind","action":"planning"}]}
"#,
    )
    .unwrap();
    (corpus, tax)
}

fn pairs(dir: &Path, corpus: &Path, tax: &Path, granularity: &str) -> Value {
    let out = dir.join(format!("pairs_{granularity}.json"));
    let code = run(&[
        "pairs",
        "--corpus",
        &s(corpus),
        "--taxonomy",
        &s(tax),
        "--granularity",
        granularity,
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 0);
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

fn entry(id: &str, ctr: (&[&str], &[&str]), ord: (&[&str], &[&str])) -> Value {
    json!({
        "id": id,
        "contrastive": {"positives": ctr.0, "negatives": ctr.1},
        "ordinal": {"positives": ord.0, "negatives": ord.1},
    })
}

#[test]
fn pairs_dump_matches_hand_worked_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, tax) = toy(dir.path());

    let by_aspect = pairs(dir.path(), &corpus, &tax, "aspect");
    let want = json!({
        "granularity": "aspect",
        "anchors": [
            entry("a", (&[], &["b", "c", "d", "e"]), (&["b"], &["c", "d", "e"])),
            entry("b", (&[], &["a", "c", "d", "e"]), (&["a"], &["c", "d", "e"])),
            entry("c", (&[], &["a", "b", "d", "e"]), (&[], &["a", "b", "d", "e"])),
            entry("e", (&[], &["a", "b", "c", "d"]), (&[], &["a", "b", "c", "d"])),
        ]
    });
    assert_eq!(by_aspect, want);

    // solar and wind share a category, so c and e become contrastive positives
    let by_category = pairs(dir.path(), &corpus, &tax, "category");
    assert_eq!(
        by_category["anchors"][2],
        entry("c", (&["e"], &["a", "b", "d"]), (&[], &["a", "b", "d", "e"]))
    );
    assert_eq!(
        by_category["anchors"][3],
        entry("e", (&["c"], &["a", "b", "d"]), (&[], &["a", "b", "c", "d"]))
    );
    assert_eq!(by_category["anchors"][0], by_aspect["anchors"][0]);
}

#[test]
fn empty_corpus_gives_empty_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tax) = toy(dir.path());
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let dump = pairs(dir.path(), &empty, &tax, "aspect");
    assert_eq!(dump["anchors"], json!([]));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, tax) = toy(dir.path());
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["--help"]), 0);
    let out = s(&dir.path().join("x.json"));
    assert_eq!(
        run(&["pairs", "--corpus", "/nonexistent", "--taxonomy", &s(&tax), "--out", &out]),
        1
    );
    assert_eq!(
        run(&[
            "pairs",
            "--corpus",
            &s(&corpus),
            "--taxonomy",
            &s(&tax),
            "--granularity",
            "topic",
            "--out",
            &out
        ]),
        1
    );
    // two categories cannot be embedded in one dimension
    assert_eq!(run(&["synth", "--out", &s(dir.path()), "--dim", "2"]), 1);
    assert_eq!(run(&["gradcheck", "--trials", "0"]), 1);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(&["gradcheck", "--trials", "3", "--seed", "4"]), 0);
    assert_eq!(
        run(&["gradcheck", "--trials", "3", "--seed", "4", "--inject-fault", "sign-flip"]),
        2
    );
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["synth", "--out", &s(&data), "--n-claims", "240", "--dim", "16"]), 0);
    let (corpus, tax) = (data.join(CORPUS_FILE), data.join(TAXONOMY_FILE));
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml");
    let out = dir.path().join("run");
    let code = run(&[
        "train",
        "--config",
        &s(&config),
        "--set",
        "stage1_epochs=2",
        "--set",
        "stage2_epochs=5",
        "--corpus",
        &s(&corpus),
        "--taxonomy",
        &s(&tax),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);

    let eval_out = dir.path().join("eval.json");
    let mut args = vec!["eval".to_string()];
    for k in 0..3 {
        args.extend(["--checkpoint".into(), s(&out.join(format!("fold{k}.ckpt")))]);
    }
    args.extend([
        "--corpus".into(),
        s(&corpus),
        "--taxonomy".into(),
        s(&tax),
        "--folds".into(),
        s(&out.join("folds.json")),
        "--out".into(),
        s(&eval_out),
    ]);
    assert_eq!(cli::run(std::iter::once("structlearn".to_string()).chain(args.clone())), 0);
    let again: Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(again, report);

    // a missing checkpoint is an input error
    args[2] = s(&dir.path().join("missing.ckpt"));
    assert_eq!(cli::run(std::iter::once("structlearn".to_string()).chain(args)), 1);

    let code = run(&[
        "train",
        "--fold",
        "7",
        "--corpus",
        &s(&corpus),
        "--taxonomy",
        &s(&tax),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 1);
}
