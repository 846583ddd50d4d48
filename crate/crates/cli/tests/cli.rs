use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

fn ctnli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnli"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes a run config into `dir` and returns its path. `extra` is
/// appended verbatim.
fn write_config(dir: &Path, ctr_dir: &Path, extra: &str) -> PathBuf {
    let toy = toy();
    let text = format!(
        r#"seed = 17
output_dir = "out"

[corpus]
ctr_dir = "{ctrs}"
instances = [
  {{ path = "{toy}/train.json", split = "train" }},
  {{ path = "{toy}/dev.json", split = "dev" }},
  {{ path = "{toy}/test_control.json", split = "test_control" }},
  {{ path = "{toy}/test_contrast.json", split = "test_contrast" }},
]
contrast_mapping = "{toy}/contrast_mapping.json"

[prompt]
n_shots = 2
style = "ccot"

[[backends]]
name = "hash"
kind = "mock"
mock = {{ kind = "prompt_hash" }}

[[backends]]
name = "yes"
kind = "mock"
mock = {{ kind = "constant", text = "Yes" }}

[[backends]]
name = "no"
kind = "mock"
mock = {{ kind = "constant", text = "No" }}

[[ensembles]]
name = "vote"
members = ["hash", "yes", "no"]
method = "hard"
{extra}"#,
        ctrs = ctr_dir.display(),
        toy = toy.display(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_run_then_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &toy().join("ctrs"), "");
    let config = config.to_str().unwrap();

    let out = ctnli(&["run", "--config", config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).trim().ends_with("manifest.json"));
    let report = fs::read_to_string(tmp.path().join("out/report.md")).unwrap();
    assert!(report.contains("| System | F1 | Faithfulness | Consistency |"));
    assert!(report.contains("| vote (h) |"));
    assert!(tmp.path().join("out/submissions/vote.json").exists());

    let again = ctnli(&["run", "--config", config, "--resume"]);
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert!(
        stderr(&again).contains("up to date: ingest, render, infer, ensemble, evaluate, report"),
        "{}",
        stderr(&again)
    );

    let manifest = tmp.path().join("out/manifest.json");
    let out = ctnli(&["report", "--manifest", manifest.to_str().unwrap(), "--format", "md,csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("report.md") && stdout(&out).contains("report.csv"));

    let out = ctnli(&["stats", "--config", config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("3 CTRs, 6 statements"), "{text}");
    assert!(text.contains("| flan_simple | 2S-CCOT | 4 |"), "{text}");
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &toy().join("ctrs"), "");
    let config = config.to_str().unwrap();
    let out_dir = tmp.path().join("staged");
    let out_dir = out_dir.to_str().unwrap();
    for stage in ["ingest", "render", "infer", "ensemble", "evaluate"] {
        let out = ctnli(&[stage, "--config", config, "--out", out_dir, "--resume", "--seed", "3"]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", stderr(&out));
    }
    assert!(Path::new(out_dir).join("report.json").exists());
    assert!(!Path::new(out_dir).join("report.md").exists());
    let manifest = fs::read_to_string(Path::new(out_dir).join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
}

#[test]
fn missing_ctr_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ctrs = tmp.path().join("ctrs");
    fs::create_dir(&ctrs).unwrap();
    for name in ["NCT00000001.json", "NCT00000002.json"] {
        fs::copy(toy().join("ctrs").join(name), ctrs.join(name)).unwrap();
    }
    let config = write_config(tmp.path(), &ctrs, "");
    let out = ctnli(&["ingest", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown CTR NCT00000003"), "{}", stderr(&out));

    let out = ctnli(&["run", "--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_without_a_config() {
    let toy = toy();
    let ctrs = toy.join("ctrs");
    let train = format!("train={}", toy.join("train.json").display());
    let control = toy.join("test_control.json");
    let out = ctnli(&[
        "ingest",
        "--ctr-dir",
        ctrs.to_str().unwrap(),
        "--instances",
        &train,
        control.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(value["corpus"]["n_statements"], 3);
}

#[test]
fn unreachable_backend_exits_with_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let extra = format!(
        r#"
[[backends]]
name = "remote"
kind = "wire_protocol"
endpoint = "http://127.0.0.1:{port}"
model_name = "flan-t5-xxl"
max_retries = 0
"#
    );
    let config = write_config(tmp.path(), &toy().join("ctrs"), &extra);
    let out = ctnli(&["infer", "--config", config.to_str().unwrap(), "--backend", "remote"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("stage infer"), "{}", stderr(&out));
}

#[test]
fn strict_coverage_turns_gaps_into_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let partial = tmp.path().join("partial.csv");
    fs::write(
        &partial,
        "instance_id,score_entailment,score_contradiction\nc1,0.9,0.1\nc2,0.2,0.8\nx1,0.6,0.4\n",
    )
    .unwrap();
    let full = tmp.path().join("full.csv");
    fs::write(
        &full,
        "instance_id,score_entailment,score_contradiction\nc1,0.7,0.3\nc2,0.4,0.6\nx1,0.6,0.4\nx2,0.3,0.7\n",
    )
    .unwrap();
    let extra = format!(
        r#"
[[backends]]
name = "partial"
kind = "file_import"
import_path = "{}"
import_format = "scores_csv"

[[backends]]
name = "full"
kind = "file_import"
import_path = "{}"
import_format = "scores_csv"

[[ensembles]]
name = "clf"
members = ["partial", "full"]
method = "soft"
coverage = "lenient"
"#,
        partial.display(),
        full.display()
    );
    let config = write_config(tmp.path(), &toy().join("ctrs"), &extra);
    let config = config.to_str().unwrap();

    let out = ctnli(&["ensemble", "--config", config, "--strict-coverage"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("covers 4 instances, 3 expected"), "{}", stderr(&out));

    let out = ctnli(&["ensemble", "--config", config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    // The lenient ensemble lacks x2, so evaluation cannot score it.
    let out = ctnli(&["evaluate", "--config", config, "--resume"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}
