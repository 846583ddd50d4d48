//! Clinical trial reports, NLI instances, and the loaders that validate them.
//!
//! CTR files hold one trial each; instance files are JSON maps keyed by
//! instance id. Contrast metadata arrives separately and is attached after
//! loading. A loaded [`Corpus`] is immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tokenize::TokenizerConfig;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("instance {instance_id} references unknown CTR {ctr_id}")]
    MissingCtr { instance_id: String, ctr_id: String },
    #[error("malformed record in {file} at {location}: {reason}")]
    MalformedRecord {
        file: PathBuf,
        location: String,
        reason: String,
    },
    #[error("duplicate id {id} (in {file})")]
    DuplicateId { id: String, file: PathBuf },
    #[error("contrast instance {contrast_id}: semantics {semantics} contradicts gold labels ({contrast_label} vs original {original_label})")]
    ContrastLabelMismatch {
        contrast_id: String,
        semantics: Semantics,
        contrast_label: Label,
        original_label: Label,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(file: &Path, location: impl Into<String>, reason: impl Into<String>) -> Self {
        CorpusError::MalformedRecord {
            file: file.to_path_buf(),
            location: location.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One of the four CTR sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionName {
    Intervention,
    Eligibility,
    Results,
    AdverseEvents,
}

impl SectionName {
    pub const ALL: [SectionName; 4] = [
        SectionName::Intervention,
        SectionName::Eligibility,
        SectionName::Results,
        SectionName::AdverseEvents,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionName::Intervention => "Intervention",
            SectionName::Eligibility => "Eligibility",
            SectionName::Results => "Results",
            SectionName::AdverseEvents => "Adverse Events",
        }
    }

    /// Key used for the section in CTR files.
    pub fn file_key(self) -> &'static str {
        match self {
            SectionName::Intervention => "intervention",
            SectionName::Eligibility => "eligibility",
            SectionName::Results => "results",
            SectionName::AdverseEvents => "adverse_events",
        }
    }
}

impl fmt::Display for SectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        match folded.as_str() {
            "intervention" => Ok(SectionName::Intervention),
            "eligibility" => Ok(SectionName::Eligibility),
            "results" => Ok(SectionName::Results),
            "adverseevents" => Ok(SectionName::AdverseEvents),
            _ => Err(format!("unknown section name {s:?}")),
        }
    }
}

impl Serialize for SectionName {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SectionName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Entailment,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Entailment, Label::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "Entailment",
            Label::Contradiction => "Contradiction",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Entailment => Label::Contradiction,
            Label::Contradiction => Label::Entailment,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(Label::Entailment),
            "contradiction" => Ok(Label::Contradiction),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceType {
    Single,
    Comparison,
}

impl fmt::Display for InstanceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceType::Single => "Single",
            InstanceType::Comparison => "Comparison",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    TestControl,
    TestContrast,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::TestControl => "test_control",
            Split::TestContrast => "test_contrast",
        }
    }

    /// Guess the split from an instance file name (`train.json`, `dev.json`,
    /// `*control*.json`, `*contrast*.json`).
    pub fn infer_from_path(path: &Path) -> Option<Split> {
        let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
        if stem.contains("contrast") {
            Some(Split::TestContrast)
        } else if stem.contains("control") || stem.contains("test") {
            Some(Split::TestControl)
        } else if stem.contains("train") {
            Some(Split::Train)
        } else if stem.contains("dev") || stem.contains("valid") {
            Some(Split::Dev)
        } else {
            None
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test_control" | "control" => Ok(Split::TestControl),
            "test_contrast" | "contrast" => Ok(Split::TestContrast),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterventionType {
    Paraphrase,
    NumericalParaphrase,
    Definition,
    Other(String),
}

impl InterventionType {
    pub fn name(&self) -> &str {
        match self {
            InterventionType::Paraphrase => "Paraphrase",
            InterventionType::NumericalParaphrase => "Numerical Paraphrase",
            InterventionType::Definition => "Definition",
            InterventionType::Other(s) => s,
        }
    }
}

impl From<&str> for InterventionType {
    fn from(s: &str) -> Self {
        let folded: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match folded.as_str() {
            "paraphrase" | "para" => InterventionType::Paraphrase,
            "numericalparaphrase" | "np" => InterventionType::NumericalParaphrase,
            "definition" | "def" => InterventionType::Definition,
            _ => InterventionType::Other(s.to_string()),
        }
    }
}

impl fmt::Display for InterventionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for InterventionType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for InterventionType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(InterventionType::from(s.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Semantics {
    Preserving,
    Altering,
}

impl fmt::Display for Semantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Semantics::Preserving => "Preserving",
            Semantics::Altering => "Altering",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastMeta {
    pub original_instance_id: String,
    pub intervention_type: InterventionType,
    pub semantics: Semantics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalTrialRecord {
    pub id: String,
    /// Only non-empty sections are stored.
    pub sections: BTreeMap<SectionName, Vec<String>>,
}

impl ClinicalTrialRecord {
    pub fn section(&self, name: SectionName) -> &[String] {
        self.sections.get(&name).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub instance_type: InstanceType,
    pub section: SectionName,
    pub primary_ctr_id: String,
    pub secondary_ctr_id: Option<String>,
    pub statement: String,
    pub gold_label: Option<Label>,
    pub primary_evidence: Option<Vec<usize>>,
    pub secondary_evidence: Option<Vec<usize>>,
    pub split: Split,
    pub contrast_meta: Option<ContrastMeta>,
}

impl Instance {
    pub fn has_evidence(&self) -> bool {
        let nonempty = |e: &Option<Vec<usize>>| e.as_ref().is_some_and(|v| !v.is_empty());
        nonempty(&self.primary_evidence) || nonempty(&self.secondary_evidence)
    }
}

/// The immutable set of CTRs, keyed by registry id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    ctrs: BTreeMap<String, ClinicalTrialRecord>,
}

impl Corpus {
    pub fn from_records(
        records: impl IntoIterator<Item = ClinicalTrialRecord>,
    ) -> Result<Self, CorpusError> {
        let mut ctrs = BTreeMap::new();
        for record in records {
            if record.id.trim().is_empty() {
                return Err(CorpusError::malformed(
                    Path::new("<memory>"),
                    "clinical_trial_id",
                    "empty CTR id",
                ));
            }
            if ctrs.contains_key(&record.id) {
                return Err(CorpusError::DuplicateId {
                    id: record.id,
                    file: PathBuf::from("<memory>"),
                });
            }
            ctrs.insert(record.id.clone(), record);
        }
        Ok(Corpus { ctrs })
    }

    pub fn get(&self, id: &str) -> Option<&ClinicalTrialRecord> {
        self.ctrs.get(id)
    }

    pub fn len(&self) -> usize {
        self.ctrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctrs.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ClinicalTrialRecord> {
        self.ctrs.values()
    }

    /// Sentences of `section` in CTR `ctr_id`; empty if either is absent.
    pub fn section(&self, ctr_id: &str, section: SectionName) -> &[String] {
        self.get(ctr_id).map(|c| c.section(section)).unwrap_or(&[])
    }
}

/// An instance file together with the split it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSource {
    pub path: PathBuf,
    pub split: Split,
}

impl InstanceSource {
    pub fn new(path: impl Into<PathBuf>, split: Split) -> Self {
        InstanceSource {
            path: path.into(),
            split,
        }
    }
}

impl FromStr for InstanceSource {
    type Err = String;

    /// Accepts `split=path` or a bare path whose split is inferred.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((split, path)) = s.split_once('=') {
            if let Ok(split) = split.parse::<Split>() {
                return Ok(InstanceSource::new(path, split));
            }
        }
        let path = PathBuf::from(s);
        let split = Split::infer_from_path(&path)
            .ok_or_else(|| format!("cannot infer split from {s:?}; use split=path"))?;
        Ok(InstanceSource { path, split })
    }
}

// File schemas.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CtrFile {
    clinical_trial_id: String,
    #[serde(default)]
    intervention: Vec<String>,
    #[serde(default)]
    eligibility: Vec<String>,
    #[serde(default)]
    results: Vec<String>,
    #[serde(default)]
    adverse_events: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    #[serde(rename = "type")]
    instance_type: InstanceType,
    section_id: String,
    primary_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    secondary_id: Option<String>,
    statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    primary_evidence_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    secondary_evidence_index: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContrastRecord {
    original_id: String,
    intervention_type: String,
    semantics: Semantics,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CorpusError::malformed(
            path,
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub fn read_ctr_file(path: &Path) -> Result<ClinicalTrialRecord> {
    let raw: CtrFile = read_json(path)?;
    if raw.clinical_trial_id.trim().is_empty() {
        return Err(CorpusError::malformed(
            path,
            "clinical_trial_id",
            "empty CTR id",
        ));
    }
    let mut sections = BTreeMap::new();
    for (name, sentences) in [
        (SectionName::Intervention, raw.intervention),
        (SectionName::Eligibility, raw.eligibility),
        (SectionName::Results, raw.results),
        (SectionName::AdverseEvents, raw.adverse_events),
    ] {
        if !sentences.is_empty() {
            sections.insert(name, sentences);
        }
    }
    Ok(ClinicalTrialRecord {
        id: raw.clinical_trial_id,
        sections,
    })
}

/// Reads every `*.json` file of `dir` as one CTR, in file-name order.
pub fn load_ctr_dir(dir: &Path) -> Result<Corpus> {
    let entries = fs::read_dir(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CorpusError::io(dir, e))?.path();
        if path.extension().is_some_and(|ext| ext == "json") {
            paths.push(path);
        }
    }
    paths.sort();

    let mut ctrs = BTreeMap::new();
    for path in paths {
        let record = read_ctr_file(&path)?;
        if ctrs.contains_key(&record.id) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                file: path,
            });
        }
        ctrs.insert(record.id.clone(), record);
    }
    Ok(Corpus { ctrs })
}

fn check_evidence(
    file: &Path,
    instance_id: &str,
    field: &str,
    evidence: &Option<Vec<usize>>,
    section_len: usize,
) -> Result<()> {
    if let Some(indices) = evidence {
        let mut seen = BTreeSet::new();
        for &idx in indices {
            if idx >= section_len {
                return Err(CorpusError::malformed(
                    file,
                    format!("{instance_id}.{field}"),
                    format!("evidence index {idx} out of range for section of {section_len} sentences"),
                ));
            }
            if !seen.insert(idx) {
                return Err(CorpusError::malformed(
                    file,
                    format!("{instance_id}.{field}"),
                    format!("evidence index {idx} repeated"),
                ));
            }
        }
    }
    Ok(())
}

fn instance_from_record(
    file: &Path,
    id: String,
    raw: InstanceRecord,
    split: Split,
    corpus: &Corpus,
) -> Result<Instance> {
    let section: SectionName = raw
        .section_id
        .parse()
        .map_err(|e: String| CorpusError::malformed(file, format!("{id}.section_id"), e))?;

    match (raw.instance_type, &raw.secondary_id) {
        (InstanceType::Single, Some(_)) => {
            return Err(CorpusError::malformed(
                file,
                format!("{id}.secondary_id"),
                "Single instance must not name a secondary CTR",
            ))
        }
        (InstanceType::Comparison, None) => {
            return Err(CorpusError::malformed(
                file,
                format!("{id}.secondary_id"),
                "Comparison instance requires a secondary CTR",
            ))
        }
        _ => {}
    }
    if raw.instance_type == InstanceType::Single && raw.secondary_evidence_index.is_some() {
        return Err(CorpusError::malformed(
            file,
            format!("{id}.secondary_evidence_index"),
            "Single instance cannot carry secondary evidence",
        ));
    }
    if matches!(split, Split::Train | Split::Dev) && raw.label.is_none() {
        return Err(CorpusError::malformed(
            file,
            format!("{id}.label"),
            "train/dev instances require a gold label",
        ));
    }

    let primary = corpus
        .get(&raw.primary_id)
        .ok_or_else(|| CorpusError::MissingCtr {
            instance_id: id.clone(),
            ctr_id: raw.primary_id.clone(),
        })?;
    check_evidence(
        file,
        &id,
        "primary_evidence_index",
        &raw.primary_evidence_index,
        primary.section(section).len(),
    )?;
    if let Some(secondary_id) = &raw.secondary_id {
        let secondary = corpus
            .get(secondary_id)
            .ok_or_else(|| CorpusError::MissingCtr {
                instance_id: id.clone(),
                ctr_id: secondary_id.clone(),
            })?;
        check_evidence(
            file,
            &id,
            "secondary_evidence_index",
            &raw.secondary_evidence_index,
            secondary.section(section).len(),
        )?;
    }

    Ok(Instance {
        id,
        instance_type: raw.instance_type,
        section,
        primary_ctr_id: raw.primary_id,
        secondary_ctr_id: raw.secondary_id,
        statement: raw.statement,
        gold_label: raw.label,
        primary_evidence: raw.primary_evidence_index,
        secondary_evidence: raw.secondary_evidence_index,
        split,
        contrast_meta: None,
    })
}

/// Reads one instance file and resolves it against `corpus`.
pub fn load_instance_file(source: &InstanceSource, corpus: &Corpus) -> Result<Vec<Instance>> {
    // BTreeMap keeps instance order independent of JSON key order.
    let raw: BTreeMap<String, InstanceRecord> = read_json(&source.path)?;
    raw.into_iter()
        .map(|(id, record)| instance_from_record(&source.path, id, record, source.split, corpus))
        .collect()
}

/// Loads the CTR directory and every instance file, rejecting duplicates
/// across files and dangling CTR references.
pub fn load_corpus(
    ctr_dir: &Path,
    instance_files: &[InstanceSource],
) -> Result<(Corpus, Vec<Instance>)> {
    let corpus = load_ctr_dir(ctr_dir)?;
    let mut instances = Vec::new();
    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    for source in instance_files {
        for instance in load_instance_file(source, &corpus)? {
            if seen.contains_key(&instance.id) {
                return Err(CorpusError::DuplicateId {
                    id: instance.id,
                    file: source.path.clone(),
                });
            }
            seen.insert(instance.id.clone(), source.path.clone());
            instances.push(instance);
        }
    }
    Ok((corpus, instances))
}

/// Reads a contrast mapping file and attaches [`ContrastMeta`] to the
/// matching instances. Ids absent from `instances` are ignored.
pub fn attach_contrast_mapping(instances: &mut [Instance], path: &Path) -> Result<usize> {
    let raw: BTreeMap<String, ContrastRecord> = read_json(path)?;
    let mut attached = 0;
    for instance in instances.iter_mut() {
        if let Some(rec) = raw.get(&instance.id) {
            instance.contrast_meta = Some(ContrastMeta {
                original_instance_id: rec.original_id.clone(),
                intervention_type: InterventionType::from(rec.intervention_type.as_str()),
                semantics: rec.semantics,
            });
            attached += 1;
        }
    }
    check_contrast_labels(instances)?;
    Ok(attached)
}

/// Reads a gold-label file (`{id: {"label": ...}}`) and fills in missing
/// gold labels. Returns the number of instances updated.
pub fn attach_gold_labels(instances: &mut [Instance], path: &Path) -> Result<usize> {
    #[derive(Deserialize)]
    struct GoldRecord {
        #[serde(alias = "Label", alias = "Prediction")]
        label: Label,
    }
    let raw: BTreeMap<String, GoldRecord> = read_json(path)?;
    let mut updated = 0;
    for instance in instances.iter_mut() {
        if let Some(rec) = raw.get(&instance.id) {
            match instance.gold_label {
                Some(existing) if existing != rec.label => {
                    return Err(CorpusError::malformed(
                        path,
                        instance.id.clone(),
                        format!("gold label {} disagrees with instance file ({existing})", rec.label),
                    ))
                }
                Some(_) => {}
                None => {
                    instance.gold_label = Some(rec.label);
                    updated += 1;
                }
            }
        }
    }
    check_contrast_labels(instances)?;
    Ok(updated)
}

/// Altering interventions flip the gold label; preserving ones keep it.
/// Checked only where both labels are known.
pub fn check_contrast_labels(instances: &[Instance]) -> Result<()> {
    let labels: HashMap<&str, Option<Label>> = instances
        .iter()
        .map(|i| (i.id.as_str(), i.gold_label))
        .collect();
    for instance in instances {
        let Some(meta) = &instance.contrast_meta else {
            continue;
        };
        let (Some(contrast_label), Some(Some(original_label))) = (
            instance.gold_label,
            labels.get(meta.original_instance_id.as_str()),
        ) else {
            continue;
        };
        let consistent = match meta.semantics {
            Semantics::Altering => contrast_label != *original_label,
            Semantics::Preserving => contrast_label == *original_label,
        };
        if !consistent {
            return Err(CorpusError::ContrastLabelMismatch {
                contrast_id: instance.id.clone(),
                semantics: meta.semantics,
                contrast_label,
                original_label: *original_label,
            });
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("corpus types serialize");
    fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}

/// Writes one `<id>.json` per CTR into `dir`.
pub fn write_ctr_dir(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    for record in corpus.records() {
        let file = CtrFile {
            clinical_trial_id: record.id.clone(),
            intervention: record.section(SectionName::Intervention).to_vec(),
            eligibility: record.section(SectionName::Eligibility).to_vec(),
            results: record.section(SectionName::Results).to_vec(),
            adverse_events: record.section(SectionName::AdverseEvents).to_vec(),
        };
        write_json(&dir.join(format!("{}.json", record.id)), &file)?;
    }
    Ok(())
}

/// Writes `instances` as an instance file (split and contrast metadata are
/// not part of this schema).
pub fn write_instance_file<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    path: &Path,
) -> Result<()> {
    let map: BTreeMap<&str, InstanceRecord> = instances
        .into_iter()
        .map(|i| {
            (
                i.id.as_str(),
                InstanceRecord {
                    instance_type: i.instance_type,
                    section_id: i.section.as_str().to_string(),
                    primary_id: i.primary_ctr_id.clone(),
                    secondary_id: i.secondary_ctr_id.clone(),
                    statement: i.statement.clone(),
                    label: i.gold_label,
                    primary_evidence_index: i.primary_evidence.clone(),
                    secondary_evidence_index: i.secondary_evidence.clone(),
                },
            )
        })
        .collect();
    write_json(path, &map)
}

/// Writes the contrast metadata of `instances` as a contrast mapping file.
pub fn write_contrast_mapping<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    path: &Path,
) -> Result<()> {
    let map: BTreeMap<&str, ContrastRecord> = instances
        .into_iter()
        .filter_map(|i| {
            i.contrast_meta.as_ref().map(|m| {
                (
                    i.id.as_str(),
                    ContrastRecord {
                        original_id: m.original_instance_id.clone(),
                        intervention_type: m.intervention_type.name().to_string(),
                        semantics: m.semantics,
                    },
                )
            })
        })
        .collect();
    write_json(path, &map)
}

pub const DEFAULT_POOL_SPLITS: [Split; 2] = [Split::Train, Split::Dev];

/// Train+Dev instances in a seeded random order.
pub fn shuffle_and_pool(instances: &[Instance], seed: u64) -> Vec<Instance> {
    shuffle_and_pool_from(instances, seed, &DEFAULT_POOL_SPLITS)
}

/// Like [`shuffle_and_pool`] with an explicit pool composition. Only Train
/// and Dev are accepted; other splits in `splits` are ignored.
pub fn shuffle_and_pool_from(instances: &[Instance], seed: u64, splits: &[Split]) -> Vec<Instance> {
    let mut pool: Vec<Instance> = instances
        .iter()
        .filter(|i| matches!(i.split, Split::Train | Split::Dev) && splits.contains(&i.split))
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub mean: f64,
    pub max: usize,
}

impl LengthSummary {
    fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return LengthSummary { mean: 0.0, max: 0 };
        }
        let total: usize = lengths.iter().sum();
        LengthSummary {
            mean: total as f64 / lengths.len() as f64,
            max: lengths.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_ctrs: usize,
    pub n_statements: usize,
    pub statement_length: LengthSummary,
    /// Per evidence sentence.
    pub evidence_length: LengthSummary,
    pub label_counts: BTreeMap<Split, BTreeMap<Label, usize>>,
}

pub fn compute_stats(
    corpus: &Corpus,
    instances: &[Instance],
    tokenizer: &TokenizerConfig,
) -> CorpusStats {
    let statement_lengths: Vec<usize> = instances
        .iter()
        .map(|i| tokenizer.count(&i.statement))
        .collect();

    let mut evidence_lengths = Vec::new();
    for instance in instances {
        let sides = [
            (Some(&instance.primary_ctr_id), &instance.primary_evidence),
            (instance.secondary_ctr_id.as_ref(), &instance.secondary_evidence),
        ];
        for (ctr_id, evidence) in sides {
            let (Some(ctr_id), Some(indices)) = (ctr_id, evidence) else {
                continue;
            };
            let section = corpus.section(ctr_id, instance.section);
            for &idx in indices {
                if let Some(sentence) = section.get(idx) {
                    evidence_lengths.push(tokenizer.count(sentence));
                }
            }
        }
    }

    let mut label_counts: BTreeMap<Split, BTreeMap<Label, usize>> = BTreeMap::new();
    for instance in instances {
        if let Some(label) = instance.gold_label {
            *label_counts
                .entry(instance.split)
                .or_default()
                .entry(label)
                .or_default() += 1;
        }
    }

    CorpusStats {
        n_ctrs: corpus.len(),
        n_statements: instances.len(),
        statement_length: LengthSummary::from_lengths(&statement_lengths),
        evidence_length: LengthSummary::from_lengths(&evidence_lengths),
        label_counts,
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} CTRs, {} statements", self.n_ctrs, self.n_statements)?;
        writeln!(f)?;
        writeln!(f, "| Metric | Value |")?;
        writeln!(f, "|---|---|")?;
        writeln!(f, "| Nb. CTRs (documents) | {} |", self.n_ctrs)?;
        writeln!(f, "| Nb. statements | {} |", self.n_statements)?;
        writeln!(f, "| Avg. length statement | {:.1} |", self.statement_length.mean)?;
        writeln!(f, "| Max. length statement | {} |", self.statement_length.max)?;
        writeln!(f, "| Avg. length evidence | {:.1} |", self.evidence_length.mean)?;
        writeln!(f, "| Max. length evidence | {} |", self.evidence_length.max)?;
        writeln!(f)?;
        writeln!(f, "| Subset | Entailment | Contradiction |")?;
        writeln!(f, "|---|---|---|")?;
        for (split, counts) in &self.label_counts {
            let get = |l| counts.get(&l).copied().unwrap_or(0);
            writeln!(
                f,
                "| {split} | {} | {} |",
                get(Label::Entailment),
                get(Label::Contradiction)
            )?;
        }
        Ok(())
    }
}
