use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use ugsim::runner::{read_transcript, RunManifest, MANIFEST_FILE};

fn ugsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugsim"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

fn jsonl_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn equilibrium_runs_twice_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for out in ["one", "two"] {
        let out = dir.path().join(out);
        let o = ugsim(&[
            "run", "--backend", "mock:equilibrium", "--seed", "7", "--pattern", "A,D",
            "--n-agents", "50", "--reproducible", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(jsonl_files(&out.join("table1")));
    }
    assert_eq!(outputs[0].len(), 18);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn analyze_and_report_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ugsim(&[
        "run", "--backend", "mock:threshold=30", "--pattern", "C", "--temperature", "1.0",
        "--n-agents", "63", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("table1");
    let o = ugsim(&["analyze", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let analysis = run_dir.join("analysis");
    for suffix in ["histogram.csv", "acceptance.csv", "fit.csv", "comparison.csv", "histogram.svg", "regression.svg", "bubbles.svg"] {
        assert!(analysis.join(format!("C_1.0_{suffix}")).exists(), "{suffix}");
    }
    let summary = fs::read_to_string(analysis.join("summary.csv")).unwrap();
    // Threshold proposer offers 31; responders reject every offer <= 30.
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "31");
    let o = ugsim(&["report", analysis.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("31.000"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = ugsim(&["analyze", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no transcripts"));

    assert_eq!(ugsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ugsim(&["run", "--nope"]).status.code(), Some(1));
    assert_eq!(ugsim(&["validate", "-c", "/does/not/exist.toml"]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "run_id = \"x\"\npatterns = 3\n").unwrap();
    let o = ugsim(&["validate", "-c", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));

    // No API key in the environment: configuration error, nothing written.
    let out = dir.path().join("http");
    let o = ugsim(&["run", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("table1").join(MANIFEST_FILE).exists());
}

#[test]
fn dry_run_prints_grid_and_prompts() {
    let o = ugsim(&["run", "--dry-run"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches(".jsonl").count(), 38);
    for method in ["zero_shot", "few_shot", "chain_of_thought"] {
        for side in ["proposer", "responder"] {
            assert!(text.contains(&format!("===== {method} / {side} =====")), "{method} {side}");
        }
    }
    assert!(text.contains("no backend was contacted"));
}

#[test]
fn synth_reference_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.csv");
    let o = ugsim(&["synth-reference", "--seed", "3", "--n", "500", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let data = ugsim::reference::load_reference(&path).unwrap();
    assert_eq!(data.proposer_samples.len(), 500);
    assert_eq!(data, ugsim::reference::synthesize_reference(3, 500).unwrap());
}

/// Kills the process part way through and resumes from the manifest.
#[test]
fn killed_run_resumes_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let n = "4000";
    let mut child = Command::new(env!("CARGO_BIN_EXE_ugsim"))
        .args([
            "run", "--backend", "mock:empirical", "--pattern", "B", "--n-agents", n,
            "--reproducible", "--out", dir.path().to_str().unwrap(),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let run_dir = dir.path().join("table1");
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        let started = run_dir.join("B_0.0_proposer.jsonl");
        if fs::metadata(&started).is_ok_and(|m| m.len() > 0) {
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    std::thread::sleep(Duration::from_millis(50));
    let _ = child.kill();
    child.wait().unwrap();

    let before = jsonl_files(&run_dir);
    let o = ugsim(&["resume", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.is_complete());
    for cell in &manifest.cells {
        let path = run_dir.join(&cell.file);
        let records = read_transcript(&path, false).unwrap();
        assert_eq!(records.len(), 4000, "{}", cell.file);
        let bytes = fs::read(&path).unwrap();
        if let Some(prior) = before.get(&cell.file) {
            // A torn final line may have been cut; everything before it stays.
            let keep = prior.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            assert_eq!(&bytes[..keep], &prior[..keep], "{}", cell.file);
        }
    }
}
