use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Instant;

use regex::Regex;

const BIN: &str = env!("CARGO_BIN_EXE_flowpipe");

fn flowpipe(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn chain3(poison: &str) -> String {
    format!(
        r#"{{
  "executors": {{"pool": {{"inproc": 2}}}},
  "pipers": {{
    "a": {{"chain": [{{"fn": "math.inc"}}], "executor": "pool"}},
    "b": {{"chain": [{{"fn": "debug.fail_if", "kwargs": {{"value": {poison}}}}}], "executor": "pool"}},
    "c": {{"chain": [{{"fn": "math.double"}}]}}
  }},
  "pipes": [["a", "b"], ["b", "c"]],
  "inputs": {{"a": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]}}
}}"#
    )
}

#[test]
fn example_manifest_prints_one_hundred_results() {
    let manifest = concat!(env!("CARGO_MANIFEST_DIR"), "/manifests/where.json");
    let out = flowpipe(&["run", manifest]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 100);
    let fields = Regex::new(r"^input: (\d+), host:\S+, parent \d+, process:\d+, thread:\S+$").unwrap();
    for (i, line) in lines.iter().enumerate() {
        let caps = fields.captures(line).unwrap_or_else(|| panic!("{line}"));
        assert_eq!(caps[1].parse::<usize>().unwrap(), i);
    }
    assert!(stderr(&out).contains("where"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = write(dir.path(), "clean.json", &chain3("-1"));
    let faulty = write(dir.path(), "faulty.json", &chain3("5"));
    let cycle = write(
        dir.path(),
        "cycle.json",
        r#"{"pipers": {"p": {"chain": [{"fn": "identity"}]}, "q": {"chain": [{"fn": "identity"}]}},
            "pipes": [["p", "q"], ["q", "p"]], "inputs": {"p": [1]}}"#,
    );
    let unknown =
        write(dir.path(), "unknown.json", r#"{"pipers": {"p": {"chain": [{"fn": "nope"}]}}, "inputs": {"p": [1]}}"#);
    let missing_input = write(dir.path(), "noinput.json", r#"{"pipers": {"p": {"chain": [{"fn": "identity"}]}}}"#);

    assert_eq!(flowpipe(&["run", &clean]).status.code(), Some(0));
    assert_eq!(flowpipe(&["run", &faulty]).status.code(), Some(2));
    let out = flowpipe(&["run", &cycle]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.lines().any(|l| l.contains("\tERROR\t") && l.contains("cycle") && l.contains("p") && l.contains("q")),
        "{err}"
    );
    assert_eq!(flowpipe(&["run", &unknown]).status.code(), Some(1));
    assert_eq!(flowpipe(&["run", &missing_input]).status.code(), Some(1));
    assert_eq!(flowpipe(&["run", "/no/such/manifest.json"]).status.code(), Some(1));
    assert_eq!(flowpipe(&["run", &clean, "--workers=localhost:1"]).status.code(), Some(1));
    assert_eq!(flowpipe(&["run", &clean, "--workers=127.0.0.1:1#2"]).status.code(), Some(1));
    assert_eq!(flowpipe(&["bogus"]).status.code(), Some(1));
    assert_eq!(flowpipe(&["--help"]).status.code(), Some(0));
}

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "ok.json", &chain3("0"));
    let out = flowpipe(&["validate", &ok]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let mismatch = write(
        dir.path(),
        "mismatch.json",
        r#"{"pipers": {"fan": {"chain": [{"fn": "seq.fan", "kwargs": {"n": 4}}], "produce": 4},
                       "sum": {"chain": [{"fn": "math.sum"}], "consume": 3}},
            "pipes": [["fan", "sum"]]}"#,
    );
    let out = flowpipe(&["validate", &mismatch]);
    assert_eq!(out.status.code(), Some(1));
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("fan") && report.contains("sum"), "{report}");

    let bad_exec =
        write(dir.path(), "exec.json", r#"{"pipers": {"p": {"chain": [{"fn": "identity"}], "executor": "gpu"}}}"#);
    let out = flowpipe(&["validate", &bad_exec]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gpu"));
}

#[test]
fn log_lines_are_tab_separated_and_filtered_by_level() {
    let dir = tempfile::tempdir().unwrap();
    let faulty = write(dir.path(), "faulty.json", &chain3("5"));
    let line = Regex::new(
        r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})\t(DEBUG|INFO|ERROR)\t[^\t]+\t[^\t]*$",
    )
    .unwrap();

    let out = flowpipe(&["run", &faulty, "--log-level", "DEBUG"]);
    let err = stderr(&out);
    let records: Vec<&str> = err.lines().filter(|l| l.contains('\t')).collect();
    assert!(!records.is_empty());
    for r in &records {
        assert!(line.is_match(r), "{r:?}");
    }
    assert!(records.iter().any(|r| r.contains("\tDEBUG\t")));
    let origin_errors =
        records.iter().filter(|r| r.split('\t').nth(1) == Some("ERROR") && r.split('\t').nth(2) == Some("b")).count();
    assert_eq!(origin_errors, 1, "{err}");

    let quiet = stderr(&flowpipe(&["run", &faulty, "--log-level", "ERROR"]));
    assert!(quiet.lines().all(|l| !l.contains("\tDEBUG\t") && !l.contains("\tINFO\t")), "{quiet}");
    assert!(quiet.lines().any(|l| l.contains("\tERROR\t")));
}

#[test]
fn errors_are_logged_while_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<String> = (0..30).map(|i| i.to_string()).collect();
    let manifest = write(
        dir.path(),
        "slow.json",
        &format!(
            r#"{{"pipers": {{
                 "bad": {{"chain": [{{"fn": "debug.fail_if", "kwargs": {{"value": 0}}}}]}},
                 "slow": {{"chain": [{{"fn": "time.sleep", "kwargs": {{"ms": 40}}}}]}}
               }},
               "pipes": [["bad", "slow"]],
               "inputs": {{"bad": [{}]}}}}"#,
            items.join(", ")
        ),
    );
    let t0 = Instant::now();
    let mut child =
        Command::new(BIN).args(["run", &manifest]).stdout(Stdio::null()).stderr(Stdio::piped()).spawn().unwrap();
    let reader = BufReader::new(child.stderr.take().unwrap());
    let mut seen_at = None;
    for line in reader.lines() {
        let line = line.unwrap();
        if line.contains("\tERROR\tbad\t") {
            seen_at = Some(t0.elapsed());
            assert!(child.try_wait().unwrap().is_none(), "run already finished when the error appeared");
            break;
        }
    }
    assert!(seen_at.is_some());
    assert_eq!(child.wait().unwrap().code(), Some(2));
}

#[test]
fn stats_out_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let clean = write(dir.path(), "clean.json", &chain3("-1"));
    let stats = dir.path().join("stats.json");
    let out = flowpipe(&["run", &clean, "--stats-out", stats.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    let text = doc.to_string();
    for name in ["\"a\"", "\"b\"", "\"c\""] {
        assert!(text.contains(name), "{text}");
    }
    let table = stderr(&out);
    assert!(table.lines().any(|l| l.starts_with("piper")), "{table}");
}
