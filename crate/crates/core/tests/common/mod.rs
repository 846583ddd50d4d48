#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ctnli_core::corpus::{
    load_corpus, attach_contrast_mapping, ContrastMeta, Corpus, Instance, InstanceSource,
    InstanceType, InterventionType, Label, SectionName, Semantics, Split,
};
use ctnli_core::inference::{Prediction, PredictionSet, Provenance, Scores};
use ctnli_core::pipeline::{CorpusConfig, RunConfig};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn toy_sources() -> Vec<InstanceSource> {
    let dir = toy_dir();
    vec![
        InstanceSource::new(dir.join("train.json"), Split::Train),
        InstanceSource::new(dir.join("dev.json"), Split::Dev),
        InstanceSource::new(dir.join("test_control.json"), Split::TestControl),
        InstanceSource::new(dir.join("test_contrast.json"), Split::TestContrast),
    ]
}

pub fn load_toy() -> (Corpus, Vec<Instance>) {
    let dir = toy_dir();
    let (corpus, mut instances) = load_corpus(&dir.join("ctrs"), &toy_sources()).unwrap();
    attach_contrast_mapping(&mut instances, &dir.join("contrast_mapping.json")).unwrap();
    (corpus, instances)
}

pub fn toy_corpus_config() -> CorpusConfig {
    let dir = toy_dir();
    CorpusConfig {
        ctr_dir: dir.join("ctrs"),
        instances: toy_sources(),
        contrast_mapping: Some(dir.join("contrast_mapping.json")),
        gold_labels: Vec::new(),
    }
}

/// Full toy run: one CoT prompt per test instance, three mock systems, two
/// imported classifiers, and one ensemble per voting method.
pub fn toy_run_config(out: &Path, seed: u64) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
output_dir = "{out}"

[corpus]
ctr_dir = "{dir}/ctrs"
instances = [
  {{ path = "{dir}/train.json", split = "train" }},
  {{ path = "{dir}/dev.json", split = "dev" }},
  {{ path = "{dir}/test_control.json", split = "test_control" }},
  {{ path = "{dir}/test_contrast.json", split = "test_contrast" }},
]
contrast_mapping = "{dir}/contrast_mapping.json"

[prompt]
n_shots = 1
style = "cot"

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
mock = {{ kind = "constant", text = "Answer: no." }}

[[backends]]
name = "clf_a"
kind = "file_import"
import_path = "{dir}/classifier_a.csv"
import_format = "scores_csv"

[[backends]]
name = "clf_b"
kind = "file_import"
import_path = "{dir}/classifier_b.csv"
import_format = "scores_csv"

[[ensembles]]
name = "vote"
members = ["hash", "yes", "no"]
method = "hard"

[[ensembles]]
name = "soft"
members = ["clf_a", "clf_b"]
method = "soft"
"#,
        out = out.display(),
        dir = toy_dir().display(),
    );
    RunConfig::from_toml(&text).unwrap()
}

pub fn synthetic(id: &str, label: Label, split: Split) -> Instance {
    Instance {
        id: id.to_string(),
        instance_type: InstanceType::Single,
        section: SectionName::Results,
        primary_ctr_id: "NCT00000001".into(),
        secondary_ctr_id: None,
        statement: format!("statement {id}"),
        gold_label: Some(label),
        primary_evidence: Some(vec![0]),
        secondary_evidence: None,
        split,
        contrast_meta: None,
    }
}

/// `n_entail` Entailment then `n_contra` Contradiction control instances.
pub fn control_set(n_entail: usize, n_contra: usize) -> Vec<Instance> {
    (0..n_entail)
        .map(|i| synthetic(&format!("e{i}"), Label::Entailment, Split::TestControl))
        .chain(
            (0..n_contra).map(|i| synthetic(&format!("c{i}"), Label::Contradiction, Split::TestControl)),
        )
        .collect()
}

pub fn contrast(id: &str, label: Label, semantics: Semantics, original: &str) -> Instance {
    Instance {
        split: Split::TestContrast,
        contrast_meta: Some(ContrastMeta {
            original_instance_id: original.to_string(),
            intervention_type: match semantics {
                Semantics::Preserving => InterventionType::Paraphrase,
                Semantics::Altering => InterventionType::Other("Contradiction".into()),
            },
            semantics,
        }),
        ..synthetic(id, label, Split::TestContrast)
    }
}

/// Contrast set with `altering` Contradiction-labelled semantics-altering
/// instances and a semantics-preserving scope with the given label counts.
pub fn contrast_set(altering: usize, preserving_entail: usize, preserving_contra: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for i in 0..altering {
        out.push(contrast(&format!("alt{i}"), Label::Contradiction, Semantics::Altering, &format!("orig{i}")));
    }
    for i in 0..preserving_entail {
        out.push(contrast(&format!("pe{i}"), Label::Entailment, Semantics::Preserving, &format!("orig{i}")));
    }
    for i in 0..preserving_contra {
        out.push(contrast(&format!("pc{i}"), Label::Contradiction, Semantics::Preserving, &format!("orig{i}")));
    }
    out
}

/// Predicts `label` for every instance.
pub fn constant_predictor<'a>(
    name: &str,
    label: Label,
    instances: impl IntoIterator<Item = &'a Instance>,
) -> PredictionSet {
    PredictionSet::from_predictions(
        name,
        Provenance::Unspecified,
        instances.into_iter().map(|i| Prediction::label_only(i.id.clone(), label)),
    )
}

pub fn labels(name: &str, pairs: &[(&str, Label)]) -> PredictionSet {
    PredictionSet::from_predictions(
        name,
        Provenance::Unspecified,
        pairs.iter().map(|(id, l)| Prediction::label_only(*id, *l)),
    )
}

pub fn scored(name: &str, pairs: &[(&str, f64, f64)]) -> PredictionSet {
    PredictionSet::from_predictions(
        name,
        Provenance::Unspecified,
        pairs
            .iter()
            .map(|(id, e, c)| Prediction::with_scores(*id, Scores::new(*e, *c))),
    )
}

/// Majority by explicit counting; ties resolved toward `on_tie`.
pub fn oracle_majority(votes: &[Label], on_tie: Label) -> Label {
    let e = votes.iter().filter(|l| **l == Label::Entailment).count();
    let c = votes.len() - e;
    if e > c {
        Label::Entailment
    } else if c > e {
        Label::Contradiction
    } else {
        on_tie
    }
}

/// argmax over labels of the summed member probabilities (ties → Contradiction).
pub fn oracle_soft(members: &[(f64, f64)]) -> Label {
    let mut best = (Label::Contradiction, f64::NEG_INFINITY);
    for label in [Label::Contradiction, Label::Entailment] {
        let total: f64 = members
            .iter()
            .map(|(e, c)| if label == Label::Entailment { *e } else { *c })
            .sum();
        if total > best.1 {
            best = (label, total);
        }
    }
    best.0
}

/// All 2^n label patterns for `n` voters.
pub fn vote_patterns(n: usize) -> Vec<Vec<Label>> {
    (0..1u32 << n)
        .map(|bits| {
            (0..n)
                .map(|i| if bits >> i & 1 == 1 { Label::Entailment } else { Label::Contradiction })
                .collect()
        })
        .collect()
}

/// One prediction set per voter, instance `p{k}` carrying pattern `k`.
pub fn pattern_sets(patterns: &[Vec<Label>]) -> Vec<PredictionSet> {
    let n = patterns[0].len();
    (0..n)
        .map(|m| {
            PredictionSet::from_predictions(
                format!("m{m}"),
                Provenance::Unspecified,
                patterns
                    .iter()
                    .enumerate()
                    .map(|(k, p)| Prediction::label_only(format!("p{k:02}"), p[m])),
            )
        })
        .collect()
}
