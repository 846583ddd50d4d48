mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ctnli_core::inference::InferenceError;
use ctnli_core::metrics::EvaluationReport;
use ctnli_core::pipeline::{
    BackendFactory, Pipeline, RunManifest, Stage, MANIFEST_FILE, PROMPTS_FILE, REPORT_JSON,
    REPORT_MD,
};

use common::toy_run_config;

/// Every file under `dir` except the manifest (which carries timestamps).
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let relative = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if relative != MANIFEST_FILE {
                    files.insert(relative, fs::read(&path).unwrap());
                }
            }
        }
    }
    files
}

/// A factory whose backends always fail, counting how often it is used.
fn refusing_factory(calls: Arc<AtomicUsize>) -> BackendFactory {
    Arc::new(move |_| {
        calls.fetch_add(1, Ordering::SeqCst);
        Err(InferenceError::BackendUnreachable("backend must not be queried".into()))
    })
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = Pipeline::new(toy_run_config(a.path(), 11)).unwrap().run().unwrap();
    let mb = Pipeline::new(toy_run_config(b.path(), 11)).unwrap().run().unwrap();
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.corpus_hash, mb.corpus_hash);
    assert_eq!(ma.artifact_hashes(), mb.artifact_hashes());

    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for key in [PROMPTS_FILE, "predictions/hash.json", "predictions/vote.json", REPORT_JSON, REPORT_MD] {
        assert!(sa.contains_key(key), "missing {key}");
    }
    assert_eq!(sa, sb);
}

#[test]
fn manifest_records_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = Pipeline::new(toy_run_config(tmp.path(), 3)).unwrap().run().unwrap();
    assert_eq!(manifest.stages.len(), Stage::ALL.len());
    assert_eq!(manifest.tool_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest.config_hash.len(), 64);
    assert_eq!(manifest.corpus_hash.len(), 64);
    assert!(tmp.path().join(&manifest.cache).exists());
    let on_disk = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, manifest);
    for (path, hash) in manifest.artifact_hashes() {
        let bytes = fs::read(tmp.path().join(&path)).unwrap();
        use sha2::Digest;
        assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), hash, "{path}");
    }
    let infer = &manifest.stages[&Stage::Infer];
    assert!(infer.artifacts.contains_key("predictions/hash.json"));
    assert!(manifest.stages[&Stage::Report].artifacts.contains_key("submissions/vote.json"));
}

#[test]
fn report_has_headline_table() {
    let tmp = tempfile::tempdir().unwrap();
    Pipeline::new(toy_run_config(tmp.path(), 3)).unwrap().run().unwrap();
    let markdown = fs::read_to_string(tmp.path().join(REPORT_MD)).unwrap();
    assert!(markdown.contains("| System | F1 | Faithfulness | Consistency |"), "{markdown}");
    // Always-Yes: F1 2/3 on {E, C}; wrong on the altering (C) instance,
    // right on the preserving (E) one.
    assert!(markdown.contains("| yes | 0.67 | 0.00 | 1.00 |"), "{markdown}");
    assert!(markdown.contains("| no | 0.00 | 1.00 | 0.00 |"), "{markdown}");
    assert!(markdown.contains("vote (h)"), "{markdown}");

    let json = fs::read_to_string(tmp.path().join(REPORT_JSON)).unwrap();
    let report = EvaluationReport::from_json(&json).unwrap();
    assert_eq!(report.to_json(), json);
    assert_eq!(report.systems.len(), 7);
}

#[test]
fn resuming_a_finished_run_skips_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let first = Pipeline::new(toy_run_config(tmp.path(), 5)).unwrap().run().unwrap();
    let before = snapshot(tmp.path());

    let calls = Arc::new(AtomicUsize::new(0));
    let mut again = Pipeline::new(toy_run_config(tmp.path(), 5))
        .unwrap()
        .resume(true)
        .with_backend_factory(refusing_factory(calls.clone()));
    let second = again.run().unwrap();
    assert!(again.executed_stages().is_empty());
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(first.stages, second.stages);
    assert_eq!(snapshot(tmp.path()), before);
}

#[test]
fn evaluation_resumes_after_a_crash_without_querying_backends() {
    let tmp = tempfile::tempdir().unwrap();
    // The run dies right after inference.
    Pipeline::new(toy_run_config(tmp.path(), 8))
        .unwrap()
        .run_until(Stage::Infer)
        .unwrap();
    assert!(!tmp.path().join(REPORT_JSON).exists());

    let calls = Arc::new(AtomicUsize::new(0));
    let mut resumed = Pipeline::new(toy_run_config(tmp.path(), 8))
        .unwrap()
        .resume(true)
        .with_backend_factory(refusing_factory(calls.clone()));
    resumed.run().unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(
        resumed.executed_stages(),
        &[Stage::Ensemble, Stage::Evaluate, Stage::Report]
    );
    assert!(tmp.path().join(REPORT_MD).exists());

    // The uninterrupted run gives the same report.
    let fresh = tempfile::tempdir().unwrap();
    Pipeline::new(toy_run_config(fresh.path(), 8)).unwrap().run().unwrap();
    assert_eq!(
        fs::read(tmp.path().join(REPORT_JSON)).unwrap(),
        fs::read(fresh.path().join(REPORT_JSON)).unwrap()
    );
}

#[test]
fn warm_cache_rerun_sends_no_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let mut first = Pipeline::new(toy_run_config(tmp.path(), 9)).unwrap();
    first.run().unwrap();
    assert_eq!(first.infer_stats()["hash"].requests, 4);

    let mut second = Pipeline::new(toy_run_config(tmp.path(), 9)).unwrap();
    second.run().unwrap();
    assert_eq!(second.executed_stages().len(), Stage::ALL.len());
    for stats in second.infer_stats().values() {
        assert_eq!(stats.requests, 0);
        assert_eq!(stats.cache_hits, stats.prompts);
    }
}

#[test]
fn tampered_artifacts_are_recomputed() {
    let tmp = tempfile::tempdir().unwrap();
    Pipeline::new(toy_run_config(tmp.path(), 4)).unwrap().run().unwrap();
    let report = tmp.path().join(REPORT_JSON);
    let original = fs::read(&report).unwrap();
    fs::write(&report, "{}").unwrap();

    let mut resumed = Pipeline::new(toy_run_config(tmp.path(), 4)).unwrap().resume(true);
    resumed.run().unwrap();
    assert_eq!(resumed.executed_stages(), &[Stage::Evaluate, Stage::Report]);
    assert_eq!(fs::read(&report).unwrap(), original);
}

#[test]
fn a_new_seed_invalidates_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    Pipeline::new(toy_run_config(tmp.path(), 1)).unwrap().run().unwrap();
    let mut other = Pipeline::new(toy_run_config(tmp.path(), 2)).unwrap().resume(true);
    other.run().unwrap();
    assert_eq!(other.executed_stages().len(), Stage::ALL.len());
    assert_eq!(other.manifest().seed, 2);
}
