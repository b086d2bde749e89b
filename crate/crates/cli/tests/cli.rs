use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const OUTPUT_FILES: [&str; 11] = [
    "metrics.csv",
    "metrics.jsonl",
    "rates.csv",
    "recovery.csv",
    "knowledge.txt",
    "knowledge_journal.jsonl",
    "transcript.jsonl",
    "diagnosis.txt",
    "meta.txt",
    "effective_config.toml",
    "summary.json",
];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn recist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recist")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 paths")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A copy of the fixture directory that tests may modify.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixtures(), dir.path());
    dir
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            if entry.file_name() != "out" {
                copy_dir(&entry.path(), &target);
            }
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(snapshot(&p));
        } else {
            out.push((p.clone(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_every_output_and_leaves_inputs_alone() {
    let ws = workspace();
    let before = snapshot(ws.path());
    let out = tempfile::tempdir().unwrap();
    let o = recist(&["--config", path(&ws.path().join("continuum.toml")), "--out", path(out.path()), "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("scenario continuum: 6 failures"));
    for name in OUTPUT_FILES {
        assert!(out.path().join(name).is_file(), "{name}");
    }
    assert!(!out.path().join("error.json").exists());
    assert_eq!(snapshot(ws.path()), before);
}

#[test]
fn run_is_repeatable_and_quiet_prints_nothing() {
    let ws = workspace();
    let config = ws.path().join("zookeeper.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let o = recist(&["--quiet", "--config", path(&config), "--out", path(dir.path()), "run"]);
        assert_eq!(o.status.code(), Some(0));
        assert!(o.stdout.is_empty());
    }
    // The effective configuration records each run's own output directory.
    for name in OUTPUT_FILES.iter().filter(|n| **n != "effective_config.toml") {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_override_lands_in_the_effective_config() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let o = recist(&[
        "--config",
        path(&ws.path().join("zookeeper.toml")),
        "--seed",
        "99",
        "--out",
        path(out.path()),
        "run",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let effective = fs::read_to_string(out.path().join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 99"), "{effective}");
}

#[test]
fn replay_reproduces_a_recorded_run() {
    let ws = workspace();
    let config = ws.path().join("continuum.toml");
    let first = tempfile::tempdir().unwrap();
    assert_eq!(recist(&["--config", path(&config), "--out", path(first.path()), "run"]).status.code(), Some(0));
    let second = tempfile::tempdir().unwrap();
    let transcript = first.path().join("transcript.jsonl");
    let o = recist(&["--config", path(&config), "--out", path(second.path()), "replay", path(&transcript)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["metrics.csv", "rates.csv", "recovery.csv", "knowledge.txt", "meta.txt", "diagnosis.txt"] {
        assert_eq!(
            fs::read_to_string(first.path().join(name)).unwrap(),
            fs::read_to_string(second.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn replay_of_a_foreign_transcript_fails_with_error_json() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let bogus = ws.path().join("bogus.jsonl");
    fs::write(&bogus, "not a transcript\n").unwrap();
    let o = recist(&["--config", path(&ws.path().join("zookeeper.toml")), "--out", path(out.path()), "replay", path(&bogus)]);
    assert_eq!(o.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("error.json")).unwrap()).unwrap();
    assert!(report.get("error").is_some(), "{report}");
}

#[test]
fn missing_topology_exits_2_with_error_json() {
    let ws = workspace();
    let config = ws.path().join("broken.toml");
    fs::write(&config, "[inputs]\ntopology = \"nowhere.txt\"\nscenario = \"zookeeper.scenario\"\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = recist(&["--config", path(&config), "--out", path(out.path()), "run"]);
    assert_eq!(o.status.code(), Some(2));
    let text = fs::read_to_string(out.path().join("error.json")).unwrap();
    assert!(text.contains("MissingInput"), "{text}");
    assert!(!out.path().join("metrics.csv").exists());
}

#[test]
fn unreadable_config_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let o = recist(&["--config", "/nonexistent/recist.toml", "--out", path(out.path()), "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.path().join("error.json").is_file());
}

#[test]
fn validate_accepts_the_fixtures() {
    for name in ["continuum.toml", "zookeeper.toml"] {
        let o = recist(&["--config", path(&fixtures().join(name)), "validate"]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
        assert!(stdout(&o).contains("# effective configuration"));
    }
}

#[test]
fn validate_reports_inverted_thresholds() {
    let ws = workspace();
    let config = ws.path().join("bad.toml");
    let mut text = fs::read_to_string(ws.path().join("zookeeper.toml")).unwrap();
    text.push_str("\n[meta]\ntheta_pro = 0.9\ntheta_inh = 0.8\n");
    fs::write(&config, text).unwrap();
    let o = recist(&["--config", path(&config), "validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("BadThresholds"), "{}", stdout(&o));
}

#[test]
fn validate_reports_a_missing_dataset() {
    let ws = workspace();
    fs::remove_file(ws.path().join("logs/openssh.log")).unwrap();
    let o = recist(&["--config", path(&ws.path().join("continuum.toml")), "validate"]);
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    assert!(s.contains("MissingInput") && s.contains("openssh"), "{s}");
}

#[test]
fn parse_matches_the_golden_records() {
    for (format, file) in [
        ("zookeeper", "zookeeper.log"),
        ("hadoop", "hadoop.log"),
        ("openssh", "openssh.log"),
        ("bgl", "bgl.log"),
        ("cloud", "cloud.csv"),
    ] {
        let o = recist(&["parse", "--format", format, path(&fixtures().join("logs").join(file))]);
        assert_eq!(o.status.code(), Some(0));
        let golden = fs::read_to_string(fixtures().join("golden").join(format!("{format}.jsonl"))).unwrap();
        assert_eq!(stdout(&o), golden, "{format}");
    }
}

#[test]
fn parse_writes_records_jsonl_under_out() {
    let out = tempfile::tempdir().unwrap();
    let log = fixtures().join("logs/openssh.log");
    let o = recist(&["--quiet", "--out", path(out.path()), "parse", "--format", "openssh", path(&log)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.path().join("records.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn parse_of_a_missing_file_exits_2() {
    let o = recist(&["parse", "--format", "bgl", "/nonexistent.log"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kb_inspect_and_merge() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let o = recist(&["--config", path(&ws.path().join("continuum.toml")), "--out", path(out.path()), "run"]);
    assert_eq!(o.status.code(), Some(0));
    let kb = out.path().join("knowledge.txt");

    let o = recist(&["kb", "inspect", path(&kb)]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.starts_with("topics "), "{s}");
    assert!(s.contains("records 5"), "{s}");

    let zk_out = tempfile::tempdir().unwrap();
    let o = recist(&["--config", path(&ws.path().join("zookeeper.toml")), "--out", path(zk_out.path()), "run"]);
    assert_eq!(o.status.code(), Some(0));
    let zk = zk_out.path().join("knowledge.txt");
    let merged = tempfile::tempdir().unwrap();
    let o = recist(&["--quiet", "--out", path(merged.path()), "kb", "merge", path(&zk), path(&kb)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = recist(&["kb", "inspect", path(&merged.path().join("knowledge.txt"))]);
    assert!(stdout(&o).contains("records 6"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&zk).unwrap().lines().next(), Some("recist-kb v1"));
}
