mod common;

use std::fs;

use ctnli_core::corpus::{
    compute_stats, load_corpus, write_contrast_mapping, write_ctr_dir, write_instance_file,
    attach_contrast_mapping, CorpusError, InstanceSource, Label, Semantics, Split,
};
use ctnli_core::tokenize::TokenizerConfig;

use common::{load_toy, toy_dir};

#[test]
fn toy_corpus_loads() {
    let (corpus, instances) = load_toy();
    assert_eq!(corpus.len(), 3);
    assert_eq!(instances.len(), 6);
    let x2 = instances.iter().find(|i| i.id == "x2").unwrap();
    let meta = x2.contrast_meta.as_ref().unwrap();
    assert_eq!(meta.semantics, Semantics::Altering);
    assert_eq!(meta.original_instance_id, "c1");
    let c2 = instances.iter().find(|i| i.id == "c2").unwrap();
    assert_eq!(c2.secondary_ctr_id.as_deref(), Some("NCT00000003"));
    assert_eq!(c2.gold_label, Some(Label::Contradiction));
}

#[test]
fn load_serialize_load_round_trip() {
    let (corpus, instances) = load_toy();
    let tmp = tempfile::tempdir().unwrap();
    write_ctr_dir(&corpus, &tmp.path().join("ctrs")).unwrap();
    let mut sources = Vec::new();
    for split in [Split::Train, Split::Dev, Split::TestControl, Split::TestContrast] {
        let path = tmp.path().join(format!("{split}.json"));
        write_instance_file(instances.iter().filter(|i| i.split == split), &path).unwrap();
        sources.push(InstanceSource::new(path, split));
    }
    let mapping = tmp.path().join("mapping.json");
    write_contrast_mapping(&instances, &mapping).unwrap();

    let (corpus2, mut instances2) = load_corpus(&tmp.path().join("ctrs"), &sources).unwrap();
    attach_contrast_mapping(&mut instances2, &mapping).unwrap();
    assert_eq!(corpus, corpus2);
    let mut a = instances.clone();
    let mut b = instances2;
    a.sort_by(|x, y| x.id.cmp(&y.id));
    b.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(a, b);
}

#[test]
fn dangling_ctr_reference_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let ctrs = tmp.path().join("ctrs");
    fs::create_dir(&ctrs).unwrap();
    for name in ["NCT00000001.json", "NCT00000002.json"] {
        fs::copy(toy_dir().join("ctrs").join(name), ctrs.join(name)).unwrap();
    }
    let source = InstanceSource::new(toy_dir().join("test_control.json"), Split::TestControl);
    let err = load_corpus(&ctrs, &[source]).unwrap_err();
    match &err {
        CorpusError::MissingCtr { ctr_id, .. } => assert_eq!(ctr_id, "NCT00000003"),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("NCT00000003"));
}

#[test]
fn duplicate_ids_across_files_are_rejected() {
    let source = InstanceSource::new(toy_dir().join("train.json"), Split::Train);
    let again = InstanceSource::new(toy_dir().join("train.json"), Split::Dev);
    let err = load_corpus(&toy_dir().join("ctrs"), &[source, again]).unwrap_err();
    assert!(matches!(err, CorpusError::DuplicateId { ref id, .. } if id == "t1"));
}

#[test]
fn malformed_records_name_file_and_location() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("train.json");
    fs::write(
        &path,
        r#"{"bad": {"type": "Single", "section_id": "Results", "primary_id": "NCT00000001",
             "statement": "s", "label": "Entailment", "primary_evidence_index": [7]}}"#,
    )
    .unwrap();
    let err = load_corpus(&toy_dir().join("ctrs"), &[InstanceSource::new(&path, Split::Train)])
        .unwrap_err();
    match err {
        CorpusError::MalformedRecord { file, location, .. } => {
            assert_eq!(file, path);
            assert!(location.contains("bad"), "{location}");
        }
        other => panic!("unexpected error {other:?}"),
    }

    fs::write(&path, "{ not json").unwrap();
    let err = load_corpus(&toy_dir().join("ctrs"), &[InstanceSource::new(&path, Split::Train)])
        .unwrap_err();
    assert!(matches!(err, CorpusError::MalformedRecord { .. }));
}

#[test]
fn training_instances_need_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("train.json");
    fs::write(
        &path,
        r#"{"u": {"type": "Single", "section_id": "Results", "primary_id": "NCT00000001", "statement": "s"}}"#,
    )
    .unwrap();
    assert!(load_corpus(&toy_dir().join("ctrs"), &[InstanceSource::new(&path, Split::Train)]).is_err());
    // The same record is fine as an unlabelled test instance.
    assert!(load_corpus(&toy_dir().join("ctrs"), &[InstanceSource::new(&path, Split::TestControl)]).is_ok());
}

#[test]
fn toy_stats() {
    let (corpus, instances) = load_toy();
    let stats = compute_stats(&corpus, &instances, &TokenizerConfig::Whitespace);
    assert_eq!(stats.n_ctrs, 3);
    assert_eq!(stats.n_statements, 6);
    assert_eq!(stats.label_counts[&Split::TestControl][&Label::Entailment], 1);
    assert_eq!(stats.label_counts[&Split::Dev][&Label::Contradiction], 1);
    let text = stats.to_string();
    assert!(text.starts_with("3 CTRs, 6 statements"));
    assert!(text.contains("| Subset | Entailment | Contradiction |"));
}
