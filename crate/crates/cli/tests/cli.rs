use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] =
    &["--num-ids", "20000", "--embedding-dim", "8", "--batch-size", "64", "--num-batches", "12"];

fn freqcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqcache")).args(args).output().expect("spawn freqcache")
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn gen_trace(dir: &Path) -> String {
    let path = dir.join("trace.csv");
    let p = path.to_str().unwrap();
    let o = freqcache(&["gen-trace", "--num-ids", "5000", "--samples", "2000", "--seed", "4", "--out", p]);
    assert!(o.status.success(), "{}", stderr(&o));
    p.to_string()
}

#[test]
fn stats_reports_head_coverage_and_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path());
    let bin = dir.path().join("s.bin");
    let o = freqcache(&["stats", "--trace", &trace, "--out", bin.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("head_coverage(0.0014)"), "{text}");
    assert!(text.contains("total_accesses 52000"), "{text}");
    assert!(std::fs::metadata(&bin).unwrap().len() > 0);

    let js = dir.path().join("s.json");
    let full = freqcache(&["stats", "--trace", &trace, "--sample-rate", "1.0", "--out", js.to_str().unwrap()]);
    assert!(full.status.success());
    assert_eq!(stdout(&full).lines().skip(1).collect::<Vec<_>>(), text.lines().skip(1).collect::<Vec<_>>());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    assert!(doc.is_object());
}

#[test]
fn stats_on_a_missing_trace_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.bin");
    let o = freqcache(&["stats", "--trace", "/no/such/trace.csv", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/trace.csv"), "{}", stderr(&o));
}

#[test]
fn simulate_prints_metrics_json() {
    let o = freqcache(&with_small(&["simulate"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&o);
    assert_eq!(m["schema_version"], 1);
    let h = m["summary"]["hit_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h));
    assert_eq!(m["batches"].as_array().unwrap().len(), 12);
    assert!(stderr(&o).contains("hit_ratio"));
}

#[test]
fn simulate_writes_files_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let csv = dir.path().join("batches.csv");
    for p in [&a, &b] {
        let mut args = with_small(&["simulate", "--out", p.to_str().unwrap()]);
        args.extend(["--batch-csv", csv.to_str().unwrap()]);
        let o = freqcache(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("hit_ratio"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 13);
}

#[test]
fn full_cache_hits_every_id() {
    let o = freqcache(&with_small(&["simulate", "--cache-ratio", "1.0"]));
    assert!(o.status.success());
    assert_eq!(json(&o)["summary"]["hit_ratio"].as_f64(), Some(1.0));
}

#[test]
fn bad_configuration_exits_with_code_2() {
    for extra in [&["--cache-ratio", "0"][..], &["--cache-ratio", "1.5"], &["--policy", "mru"], &["--bogus"]] {
        let mut args = with_small(&["simulate"]);
        args.extend(extra);
        let o = freqcache(&args);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
}

#[test]
fn oversized_batch_exits_with_code_1() {
    let o = freqcache(&["simulate", "--num-ids", "20000", "--batch-size", "4096", "--num-batches", "2", "--cache-ratio", "0.001"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("batch 0"), "{err}");
    assert_eq!(err.matches("raise the cache ratio").count(), 1, "{err}");
}

#[test]
fn config_file_values_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "num_ids = 20000\nembedding_dim = 8\nbatch_size = 64\ncache_ratio = 0.05\n").unwrap();
    let o = freqcache(&["simulate", "--config", cfg.to_str().unwrap(), "--num-batches", "5", "--cache-ratio", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&o);
    assert_eq!(m["config"]["cache_ratio"].as_f64(), Some(0.1));
    assert_eq!(m["config"]["embedding_dim"], 8);

    std::fs::write(&cfg, "cache_size = 3\n").unwrap();
    let bad = freqcache(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_emits_one_run_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let p = csv.to_str().unwrap();
    let o = freqcache(&[
        "sweep", "--ratios", "0.005,0.015,0.05", "--csv", p, "--num-ids", "100000", "--embedding-dim", "8",
        "--batch-size", "16", "--num-batches", "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&o);
    let runs = doc["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let h: Vec<f64> = runs.iter().map(|r| r["summary"]["hit_ratio"].as_f64().unwrap()).collect();
    assert!(h[0] <= h[1] && h[1] <= h[2], "{h:?}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn compare_ranks_the_policies() {
    let o = freqcache(&with_small(&["compare"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&o);
    assert_eq!(doc["results"].as_array().unwrap().len(), 4);
    let table = stderr(&o);
    for p in ["freq_lfu", "runtime_lfu", "lru", "rowwise_transfer"] {
        assert!(table.contains(p), "{table}");
    }
}

#[test]
fn verify_passes_on_a_clean_run() {
    let o = freqcache(&with_small(&["verify", "--shards", "2"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&o)["oracle"]["pass"], true);
    assert!(stderr(&o).contains("oracle: pass"));
}

#[test]
fn simulate_reads_a_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path());
    let o = freqcache(&[
        "simulate", "--trace", &trace, "--num-ids", "5000", "--batch-size", "100", "--embedding-dim", "4",
        "--cache-ratio", "0.2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&o)["summary"]["batches"], 20);
}
