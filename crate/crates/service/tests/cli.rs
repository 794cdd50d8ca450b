use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use revsum_core::dataset::{load_reviews_table, AspectSchema};
use revsum_core::Sentiment;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn revsum(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revsum"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stats_report_matches_recount() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture("reviews_sample.csv");
    let out = revsum(dir.path(), &["stats", path.to_str().unwrap(), "--top", "100"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Aspect\tCount\tPos.\tNeg.\tMix."));

    let rows = load_reviews_table(&path, &AspectSchema::default()).unwrap().records;
    let mut expected: BTreeMap<String, [u64; 3]> = BTreeMap::new();
    for row in &rows {
        for m in &row.mentions {
            let key = m.aspect.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
            let i = Sentiment::ALL.iter().position(|s| *s == m.sentiment).unwrap();
            expected.entry(key).or_default()[i] += 1;
        }
    }
    let mut seen = 0;
    for line in lines.by_ref().take_while(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let by = expected[f[0]];
        let total: u64 = by.iter().sum();
        assert_eq!(f[1].parse::<u64>().unwrap(), total, "{line}");
        for (cell, part) in f[2..].iter().zip(by) {
            let want = part as f64 * 100.0 / total as f64;
            assert!((cell.parse::<f64>().unwrap() - want).abs() <= 0.005 + 1e-9, "{line}");
        }
        seen += 1;
    }
    assert_eq!(seen, expected.len());
    assert!(text.contains("Reviews\t20\n"));
    assert!(text.contains("Products\t4\n"));
}

#[test]
fn eval_reports_tier_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture("annotations_final.csv");
    let out = revsum(dir.path(), &["eval", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    for line in ["NO_ERROR\t285\t84", "MINOR\t33\t", "MAJOR\t15\t", "MINOR_MISREPRESENTATION\t12", "MINOR_OMISSION\t21"] {
        assert!(text.contains(line), "{line} missing from\n{text}");
    }

    let out = revsum(dir.path(), &["eval", fixture("annotations_triple.csv").to_str().unwrap()]);
    assert!(stdout(&out).contains("Agreement\t0.71\t34 items"));

    let out = revsum(dir.path(), &["eval", "missing.csv"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn ingest_then_run_persists_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixture("golden_reviews.csv");
    let out = revsum(dir.path(), &["ingest", golden.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("summarized golden-desk at 10 reviews"));
    assert!(text.contains("summarized golden-desk at 11 reviews"));
    assert!(text.contains("ingested 12 reviews (0 duplicates)"));

    let out = revsum(dir.path(), &["run", "golden-desk"]);
    assert!(out.status.success());
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(record["review_count_at_generation"], 12);

    // Re-ingesting reports every row as a duplicate.
    let out = revsum(dir.path(), &["ingest", golden.to_str().unwrap()]);
    assert!(stdout(&out).contains("ingested 0 reviews (12 duplicates)"));

    let export = dir.path().join("summaries.csv");
    let out = revsum(dir.path(), &["batch-run", "--export", export.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("golden-desk\tok\t"));
    assert!(std::fs::read_to_string(export).unwrap().contains("golden-desk"));
}

#[test]
fn run_below_minimum_fails() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("golden_reviews.csv")).unwrap();
    let nine: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("nine.csv");
    std::fs::write(&path, nine).unwrap();
    assert!(revsum(dir.path(), &["ingest", path.to_str().unwrap()]).status.success());
    let out = revsum(dir.path(), &["run", "golden-desk"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 10"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "colour = red\n").unwrap();
    let out = revsum(dir.path(), &["--config", "bad.conf", "run", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}
