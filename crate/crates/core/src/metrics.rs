//! Entailment F1, Faithfulness, Consistency, and accuracy breakdowns.
//!
//! Faithfulness and Consistency are scored on contrast instances that carry
//! [`ContrastMeta`](crate::corpus::ContrastMeta): semantics-altering
//! interventions form the faithfulness scope, semantics-preserving ones the
//! consistency scope. [`RobustnessDefinition`] selects how a scope is
//! scored.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Instance, InstanceType, Label, SectionName, Semantics};
use crate::ensemble::tie_count;
use crate::inference::{PredictionSet, Provenance};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no prediction for instance {0}")]
    MissingPrediction(String),
    #[error("instance {0} has no gold label")]
    MissingGold(String),
    #[error("no contrast metadata available")]
    NoContrastMeta,
    #[error("no {0} instances to score")]
    EmptyScope(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when precision or recall had a zero denominator (reported as 0).
    pub zero_division: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub support: usize,
}

fn gold(instance: &Instance) -> Result<Label> {
    instance
        .gold_label
        .ok_or_else(|| MetricsError::MissingGold(instance.id.clone()))
}

fn predicted(preds: &PredictionSet, instance_id: &str) -> Result<Label> {
    preds
        .label(instance_id)
        .ok_or_else(|| MetricsError::MissingPrediction(instance_id.to_string()))
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision, recall and F1 of the Entailment class. Zero denominators
/// give 0 with `zero_division` set.
pub fn entailment_f1<'a>(
    preds: &PredictionSet,
    instances: impl IntoIterator<Item = &'a Instance>,
) -> Result<F1Score> {
    let (mut tp, mut fp, mut fn_, mut support) = (0, 0, 0, 0);
    for instance in instances {
        let truth = gold(instance)?;
        let guess = predicted(preds, &instance.id)?;
        support += 1;
        match (guess, truth) {
            (Label::Entailment, Label::Entailment) => tp += 1,
            (Label::Entailment, Label::Contradiction) => fp += 1,
            (Label::Contradiction, Label::Entailment) => fn_ += 1,
            (Label::Contradiction, Label::Contradiction) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok(F1Score {
        f1,
        precision: p,
        recall: r,
        zero_division: precision.is_none() || recall.is_none() || p + r == 0.0,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        support,
    })
}

/// Entailment F1 on the control set.
pub fn f1_control<'a>(
    preds: &PredictionSet,
    control: impl IntoIterator<Item = &'a Instance>,
) -> Result<F1Score> {
    entailment_f1(preds, control)
}

/// How a robustness scope is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessDefinition {
    /// Accuracy against the contrast instance's gold label.
    #[default]
    GoldAccuracy,
    /// Compare with the prediction on the original instance: faithfulness
    /// counts changed predictions, consistency counts kept ones.
    PairedPrediction,
}

fn scope<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    semantics: Semantics,
) -> Result<Vec<&'a Instance>> {
    let mut any_meta = false;
    let mut selected = Vec::new();
    for instance in instances {
        if let Some(meta) = &instance.contrast_meta {
            any_meta = true;
            if meta.semantics == semantics {
                selected.push(instance);
            }
        }
    }
    if !any_meta {
        return Err(MetricsError::NoContrastMeta);
    }
    if selected.is_empty() {
        return Err(MetricsError::EmptyScope(match semantics {
            Semantics::Altering => "semantics-altering",
            Semantics::Preserving => "semantics-preserving",
        }));
    }
    Ok(selected)
}

fn score_scope(
    preds: &PredictionSet,
    scope: &[&Instance],
    semantics: Semantics,
    definition: RobustnessDefinition,
) -> Result<f64> {
    let mut hits = 0;
    for instance in scope {
        let guess = predicted(preds, &instance.id)?;
        let hit = match definition {
            RobustnessDefinition::GoldAccuracy => guess == gold(instance)?,
            RobustnessDefinition::PairedPrediction => {
                let meta = instance.contrast_meta.as_ref().expect("scoped instances have meta");
                let original = predicted(preds, &meta.original_instance_id)?;
                match semantics {
                    Semantics::Altering => guess != original,
                    Semantics::Preserving => guess == original,
                }
            }
        };
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / scope.len() as f64)
}

pub fn faithfulness_with<'a>(
    preds: &PredictionSet,
    contrast: impl IntoIterator<Item = &'a Instance>,
    definition: RobustnessDefinition,
) -> Result<f64> {
    let scope = scope(contrast, Semantics::Altering)?;
    score_scope(preds, &scope, Semantics::Altering, definition)
}

pub fn consistency_with<'a>(
    preds: &PredictionSet,
    contrast: impl IntoIterator<Item = &'a Instance>,
    definition: RobustnessDefinition,
) -> Result<f64> {
    let scope = scope(contrast, Semantics::Preserving)?;
    score_scope(preds, &scope, Semantics::Preserving, definition)
}

/// Share of semantics-altering contrast instances predicted with their
/// (changed) gold label.
pub fn faithfulness<'a>(
    preds: &PredictionSet,
    contrast: impl IntoIterator<Item = &'a Instance>,
) -> Result<f64> {
    faithfulness_with(preds, contrast, RobustnessDefinition::GoldAccuracy)
}

/// Share of semantics-preserving contrast instances predicted with their
/// (unchanged) gold label.
pub fn consistency<'a>(
    preds: &PredictionSet,
    contrast: impl IntoIterator<Item = &'a Instance>,
) -> Result<f64> {
    consistency_with(preds, contrast, RobustnessDefinition::GoldAccuracy)
}

/// A table cell with the number of instances behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    /// Percent.
    pub overall_accuracy: Cell,
    /// Percent, keyed by gold label.
    pub accuracy_by_label: BTreeMap<Label, Cell>,
    pub accuracy_by_type: BTreeMap<InstanceType, Cell>,
    pub accuracy_by_section: BTreeMap<SectionName, Cell>,
    /// Entailment F1 (0..1) per intervention type, contrast instances only.
    pub f1_by_intervention: BTreeMap<String, Cell>,
}

#[derive(Default)]
struct Tally {
    correct: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        if hit {
            self.correct += 1;
        }
    }

    fn percent(&self) -> Cell {
        Cell {
            value: 100.0 * self.correct as f64 / self.total as f64,
            support: self.total,
        }
    }
}

fn percents<K: Ord + Clone>(tallies: BTreeMap<K, Tally>) -> BTreeMap<K, Cell> {
    tallies.into_iter().map(|(k, t)| (k, t.percent())).collect()
}

/// Accuracy by gold label, instance type and section, plus Entailment F1
/// per intervention type. Every instance must have a gold label and a
/// prediction.
pub fn breakdowns<'a>(
    preds: &PredictionSet,
    instances: impl IntoIterator<Item = &'a Instance>,
) -> Result<BreakdownReport> {
    let mut overall = Tally::default();
    let mut by_label: BTreeMap<Label, Tally> = BTreeMap::new();
    let mut by_type: BTreeMap<InstanceType, Tally> = BTreeMap::new();
    let mut by_section: BTreeMap<SectionName, Tally> = BTreeMap::new();
    let mut by_intervention: BTreeMap<String, Vec<&Instance>> = BTreeMap::new();

    for instance in instances {
        let truth = gold(instance)?;
        let hit = predicted(preds, &instance.id)? == truth;
        overall.add(hit);
        by_label.entry(truth).or_default().add(hit);
        by_type.entry(instance.instance_type).or_default().add(hit);
        by_section.entry(instance.section).or_default().add(hit);
        if let Some(meta) = &instance.contrast_meta {
            by_intervention
                .entry(meta.intervention_type.name().to_string())
                .or_default()
                .push(instance);
        }
    }
    if overall.total == 0 {
        return Err(MetricsError::EmptyScope("breakdown"));
    }

    let mut f1_by_intervention = BTreeMap::new();
    for (name, group) in by_intervention {
        let score = entailment_f1(preds, group.iter().copied())?;
        f1_by_intervention.insert(
            name,
            Cell {
                value: score.f1,
                support: score.support,
            },
        );
    }

    Ok(BreakdownReport {
        overall_accuracy: overall.percent(),
        accuracy_by_label: percents(by_label),
        accuracy_by_type: percents(by_type),
        accuracy_by_section: percents(by_section),
        f1_by_intervention,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_entailment: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_zero_division: bool,
    pub control_support: usize,
    /// `None` when no contrast metadata was available.
    pub faithfulness: Option<f64>,
    pub consistency: Option<f64>,
    pub fallback_count: usize,
    pub tie_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    /// "s" or "h" for ensembles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<String>,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BreakdownReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub robustness_definition: RobustnessDefinition,
    pub systems: Vec<SystemReport>,
}

fn optional(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::NoContrastMeta | MetricsError::EmptyScope(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores one system. Robustness metrics degrade to `None` without
/// contrast metadata; the breakdown is skipped when `breakdown_scope` is
/// empty.
pub fn evaluate_system(
    preds: &PredictionSet,
    control: &[&Instance],
    contrast: &[&Instance],
    breakdown_scope: &[&Instance],
    definition: RobustnessDefinition,
) -> Result<SystemReport> {
    let f1 = f1_control(preds, control.iter().copied())?;
    let faith = optional(faithfulness_with(preds, contrast.iter().copied(), definition))?;
    let consist = optional(consistency_with(preds, contrast.iter().copied(), definition))?;
    let breakdown = if breakdown_scope.is_empty() {
        None
    } else {
        Some(breakdowns(preds, breakdown_scope.iter().copied())?)
    };
    let voting = match &preds.provenance {
        Provenance::Ensemble(p) => Some(p.method.to_string()),
        _ => None,
    };
    Ok(SystemReport {
        system: preds.system_name.clone(),
        voting,
        metrics: MetricReport {
            f1_entailment: f1.f1,
            precision: f1.precision,
            recall: f1.recall,
            f1_zero_division: f1.zero_division,
            control_support: f1.support,
            faithfulness: faith,
            consistency: consist,
            fallback_count: preds.fallback_count(),
            tie_count: tie_count(preds),
        },
        breakdown,
    })
}

// Emitters

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "—".to_string())
}

fn fmt_percent(cell: Option<&Cell>) -> String {
    cell.map(|c| format!("{:.0} (n={})", c.value, c.support))
        .unwrap_or_else(|| "—".to_string())
}

fn fmt_f1_cell(cell: Option<&Cell>) -> String {
    cell.map(|c| format!("{:.2} (n={})", c.value, c.support))
        .unwrap_or_else(|| "—".to_string())
}

fn system_title(s: &SystemReport) -> String {
    match &s.voting {
        Some(v) => format!("{} ({v})", s.system),
        None => s.system.clone(),
    }
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let systems = &self.systems;
        let _ = writeln!(md, "## Scores\n");
        let _ = writeln!(md, "| System | F1 | Faithfulness | Consistency |");
        let _ = writeln!(md, "|---|---|---|---|");
        for s in systems {
            let m = &s.metrics;
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                system_title(s),
                fmt_metric(Some(m.f1_entailment)),
                fmt_metric(m.faithfulness),
                fmt_metric(m.consistency)
            );
        }

        let _ = writeln!(md, "\n## Parse fallbacks and voting ties\n");
        let _ = writeln!(md, "| System | Fallbacks | Ties |");
        let _ = writeln!(md, "|---|---|---|");
        for s in systems {
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                system_title(s),
                s.metrics.fallback_count,
                s.metrics.tie_count
            );
        }

        let with_breakdown: Vec<(&SystemReport, &BreakdownReport)> = systems
            .iter()
            .filter_map(|s| s.breakdown.as_ref().map(|b| (s, b)))
            .collect();
        if with_breakdown.is_empty() {
            return md;
        }

        let _ = writeln!(md, "\n## Accuracy (%) per label\n");
        let _ = writeln!(md, "| System | Entailment | Contradict. |");
        let _ = writeln!(md, "|---|---|---|");
        for (s, b) in &with_breakdown {
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                system_title(s),
                fmt_percent(b.accuracy_by_label.get(&Label::Entailment)),
                fmt_percent(b.accuracy_by_label.get(&Label::Contradiction))
            );
        }

        let _ = writeln!(md, "\n## Accuracy (%) per CTR type\n");
        let _ = writeln!(md, "| System | Single | Comparison |");
        let _ = writeln!(md, "|---|---|---|");
        for (s, b) in &with_breakdown {
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                system_title(s),
                fmt_percent(b.accuracy_by_type.get(&InstanceType::Single)),
                fmt_percent(b.accuracy_by_type.get(&InstanceType::Comparison))
            );
        }

        let _ = writeln!(md, "\n## Accuracy (%) per CTR section\n");
        let _ = writeln!(md, "| System | AE | Int. | Elig. | Res. |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for (s, b) in &with_breakdown {
            let cell = |name| fmt_percent(b.accuracy_by_section.get(&name));
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                system_title(s),
                cell(SectionName::AdverseEvents),
                cell(SectionName::Intervention),
                cell(SectionName::Eligibility),
                cell(SectionName::Results)
            );
        }

        let mut interventions: Vec<&String> = with_breakdown
            .iter()
            .flat_map(|(_, b)| b.f1_by_intervention.keys())
            .collect();
        interventions.sort();
        interventions.dedup();
        if !interventions.is_empty() {
            let _ = writeln!(md, "\n## F1 per intervention type\n");
            let header: Vec<&str> = interventions.iter().map(|s| s.as_str()).collect();
            let _ = writeln!(md, "| System | {} |", header.join(" | "));
            let _ = writeln!(md, "|---|{}", "---|".repeat(header.len()));
            for (s, b) in &with_breakdown {
                let cells: Vec<String> = interventions
                    .iter()
                    .map(|k| fmt_f1_cell(b.f1_by_intervention.get(*k)))
                    .collect();
                let _ = writeln!(md, "| {} | {} |", system_title(s), cells.join(" | "));
            }
        }
        md
    }

    /// One row per cell: `system,table,group,value,support`.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["system", "table", "group", "value", "support"])
            .expect("in-memory csv");
        let mut row = |system: &str, table: &str, group: &str, value: Option<f64>, support: usize| {
            writer
                .write_record([
                    system.to_string(),
                    table.to_string(),
                    group.to_string(),
                    value.map(|v| v.to_string()).unwrap_or_default(),
                    support.to_string(),
                ])
                .expect("in-memory csv");
        };
        for s in &self.systems {
            let name = system_title(s);
            let m = &s.metrics;
            row(&name, "scores", "f1", Some(m.f1_entailment), m.control_support);
            row(&name, "scores", "precision", Some(m.precision), m.control_support);
            row(&name, "scores", "recall", Some(m.recall), m.control_support);
            row(&name, "scores", "faithfulness", m.faithfulness, 0);
            row(&name, "scores", "consistency", m.consistency, 0);
            row(&name, "counts", "fallbacks", Some(m.fallback_count as f64), 0);
            row(&name, "counts", "ties", Some(m.tie_count as f64), 0);
            if let Some(b) = &s.breakdown {
                row(&name, "accuracy", "overall", Some(b.overall_accuracy.value), b.overall_accuracy.support);
                for (k, c) in &b.accuracy_by_label {
                    row(&name, "accuracy_by_label", k.as_str(), Some(c.value), c.support);
                }
                for (k, c) in &b.accuracy_by_type {
                    row(&name, "accuracy_by_type", &k.to_string(), Some(c.value), c.support);
                }
                for (k, c) in &b.accuracy_by_section {
                    row(&name, "accuracy_by_section", k.as_str(), Some(c.value), c.support);
                }
                for (k, c) in &b.f1_by_intervention {
                    row(&name, "f1_by_intervention", k, Some(c.value), c.support);
                }
            }
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }
}

/// Leaderboard submission: `{id: {"Prediction": label}}`.
pub fn submission_json(preds: &PredictionSet) -> String {
    #[derive(Serialize)]
    struct Entry {
        #[serde(rename = "Prediction")]
        prediction: Label,
    }
    let map: BTreeMap<&str, Entry> = preds
        .predictions
        .iter()
        .map(|(id, p)| (id.as_str(), Entry { prediction: p.label }))
        .collect();
    let mut text = serde_json::to_string_pretty(&map).expect("submission serializes");
    text.push('\n');
    text
}

pub fn write_submission(preds: &PredictionSet, path: &Path) -> Result<()> {
    fs::write(path, submission_json(preds)).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Instances grouped by id, for callers that hold owned instances.
pub fn index_by_id(instances: &[Instance]) -> HashMap<&str, &Instance> {
    instances.iter().map(|i| (i.id.as_str(), i)).collect()
}
