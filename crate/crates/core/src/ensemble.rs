//! Hard (majority) and soft (summed-score) voting over prediction sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::inference::{Prediction, PredictionSet, Provenance, Scores};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble {0} needs at least two members")]
    TooFewMembers(String),
    #[error("member {0} listed twice")]
    DuplicateMember(String),
    #[error("no prediction set named {0}")]
    UnknownMember(String),
    #[error("member {member} covers {found} instances, {expected} expected (first difference: {example})")]
    CoverageMismatch {
        member: String,
        expected: usize,
        found: usize,
        example: String,
    },
    #[error("member {member} has no scores for instance {instance}")]
    MissingScores { member: String, instance: String },
    #[error("members share no instances")]
    EmptyIntersection,
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    FavorContradiction,
    FavorEntailment,
    /// Compare summed member scores; falls back to Contradiction when any
    /// member lacks scores or the sums are equal.
    BySummedScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMethod {
    Hard,
    Soft,
}

impl fmt::Display for VotingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VotingMethod::Hard => "h",
            VotingMethod::Soft => "s",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    #[default]
    Strict,
    /// Vote on the instances every member covers; others are dropped.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub name: String,
    pub members: Vec<String>,
    pub method: VotingMethod,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default)]
    pub coverage: Coverage,
}

impl EnsembleSpec {
    pub fn new(name: impl Into<String>, members: &[&str], method: VotingMethod) -> Self {
        EnsembleSpec {
            name: name.into(),
            members: members.iter().map(|m| m.to_string()).collect(),
            method,
            tie_break: TieBreak::default(),
            coverage: Coverage::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(self.name.clone()));
        }
        let mut seen = BTreeSet::new();
        for member in &self.members {
            if !seen.insert(member) {
                return Err(EnsembleError::DuplicateMember(member.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCount {
    #[serde(rename = "Entailment")]
    pub entailment: usize,
    #[serde(rename = "Contradiction")]
    pub contradiction: usize,
}

/// Recorded alongside every ensemble output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub members: Vec<String>,
    pub method: VotingMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreak>,
    pub coverage: Coverage,
    pub tie_count: usize,
    pub dropped_instances: usize,
    /// Hard voting: per-instance label tallies. Soft voting: per-instance
    /// summed scores.
    pub votes: BTreeMap<String, Votes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Votes {
    Count(VoteCount),
    Sum(Scores),
}

/// Order-independent sum: adding in sorted order fixes the rounding.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

struct Members<'a> {
    sets: Vec<&'a PredictionSet>,
    scope: Vec<String>,
    dropped: usize,
}

fn resolve<'a>(spec: &EnsembleSpec, sets: &'a [PredictionSet]) -> Result<Members<'a>> {
    spec.validate()?;
    let members: Vec<&PredictionSet> = spec
        .members
        .iter()
        .map(|name| {
            sets.iter()
                .find(|s| &s.system_name == name)
                .ok_or_else(|| EnsembleError::UnknownMember(name.clone()))
        })
        .collect::<Result<_>>()?;

    let first: BTreeSet<&String> = members[0].predictions.keys().collect();
    let mut intersection = first.clone();
    let mut union = first.clone();
    for member in &members[1..] {
        let ids: BTreeSet<&String> = member.predictions.keys().collect();
        if spec.coverage == Coverage::Strict && ids != first {
            let example = ids
                .symmetric_difference(&first)
                .next()
                .map(|s| s.to_string())
                .unwrap_or_default();
            return Err(EnsembleError::CoverageMismatch {
                member: member.system_name.clone(),
                expected: first.len(),
                found: ids.len(),
                example,
            });
        }
        intersection = intersection.intersection(&ids).copied().collect();
        union.extend(ids);
    }
    if intersection.is_empty() && !union.is_empty() {
        return Err(EnsembleError::EmptyIntersection);
    }
    let dropped = union.len() - intersection.len();
    if dropped > 0 {
        log::warn!(
            "ensemble {}: {dropped} instances not covered by every member were dropped",
            spec.name
        );
    }
    Ok(Members {
        sets: members,
        scope: intersection.into_iter().cloned().collect(),
        dropped,
    })
}

fn member_predictions<'a>(members: &'a Members<'_>, id: &str) -> Vec<(&'a str, &'a Prediction)> {
    members
        .sets
        .iter()
        .map(|s| (s.system_name.as_str(), &s.predictions[id]))
        .collect()
}

fn break_tie(tie_break: TieBreak, predictions: &[(&str, &Prediction)]) -> Label {
    match tie_break {
        TieBreak::FavorContradiction => Label::Contradiction,
        TieBreak::FavorEntailment => Label::Entailment,
        TieBreak::BySummedScores => {
            let scores: Option<Vec<Scores>> = predictions.iter().map(|(_, p)| p.scores).collect();
            match scores {
                Some(scores) => {
                    let e = canonical_sum(scores.iter().map(|s| s.entailment).collect());
                    let c = canonical_sum(scores.iter().map(|s| s.contradiction).collect());
                    if e > c {
                        Label::Entailment
                    } else {
                        Label::Contradiction
                    }
                }
                None => Label::Contradiction,
            }
        }
    }
}

/// Majority label per instance; exact ties go through `spec.tie_break`.
pub fn hard_vote(spec: &EnsembleSpec, sets: &[PredictionSet]) -> Result<PredictionSet> {
    let members = resolve(spec, sets)?;
    let mut votes = BTreeMap::new();
    let mut out = Vec::with_capacity(members.scope.len());
    let mut tie_count = 0;

    for id in &members.scope {
        let predictions = member_predictions(&members, id);
        let mut count = VoteCount::default();
        for (_, p) in &predictions {
            match p.label {
                Label::Entailment => count.entailment += 1,
                Label::Contradiction => count.contradiction += 1,
            }
        }
        let label = match count.entailment.cmp(&count.contradiction) {
            std::cmp::Ordering::Greater => Label::Entailment,
            std::cmp::Ordering::Less => Label::Contradiction,
            std::cmp::Ordering::Equal => {
                tie_count += 1;
                break_tie(spec.tie_break, &predictions)
            }
        };
        votes.insert(id.clone(), Votes::Count(count));
        out.push(Prediction::label_only(id.clone(), label));
    }

    let provenance = EnsembleProvenance {
        members: spec.members.clone(),
        method: VotingMethod::Hard,
        tie_break: Some(spec.tie_break),
        coverage: spec.coverage,
        tie_count,
        dropped_instances: members.dropped,
        votes,
    };
    Ok(PredictionSet::from_predictions(
        spec.name.clone(),
        Provenance::Ensemble(provenance),
        out,
    ))
}

/// Argmax of summed member scores per instance (scores used as supplied).
/// Equal sums go to Contradiction and are counted as ties. Output scores
/// are the member means.
pub fn soft_vote(spec: &EnsembleSpec, sets: &[PredictionSet]) -> Result<PredictionSet> {
    let members = resolve(spec, sets)?;
    let n = members.sets.len() as f64;
    let mut votes = BTreeMap::new();
    let mut out = Vec::with_capacity(members.scope.len());
    let mut tie_count = 0;

    for id in &members.scope {
        let predictions = member_predictions(&members, id);
        let scores: Vec<Scores> = predictions
            .iter()
            .map(|(member, p)| {
                p.scores.ok_or_else(|| EnsembleError::MissingScores {
                    member: member.to_string(),
                    instance: id.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let sum = Scores::new(
            canonical_sum(scores.iter().map(|s| s.entailment).collect()),
            canonical_sum(scores.iter().map(|s| s.contradiction).collect()),
        );
        if sum.entailment == sum.contradiction {
            tie_count += 1;
        }
        let mean = Scores::new(sum.entailment / n, sum.contradiction / n);
        votes.insert(id.clone(), Votes::Sum(sum));
        out.push(Prediction {
            label: sum.argmax(),
            ..Prediction::with_scores(id.clone(), mean)
        });
    }

    let provenance = EnsembleProvenance {
        members: spec.members.clone(),
        method: VotingMethod::Soft,
        tie_break: None,
        coverage: spec.coverage,
        tie_count,
        dropped_instances: members.dropped,
        votes,
    };
    Ok(PredictionSet::from_predictions(
        spec.name.clone(),
        Provenance::Ensemble(provenance),
        out,
    ))
}

pub fn ensemble(spec: &EnsembleSpec, sets: &[PredictionSet]) -> Result<PredictionSet> {
    match spec.method {
        VotingMethod::Hard => hard_vote(spec, sets),
        VotingMethod::Soft => soft_vote(spec, sets),
    }
}

/// Number of tied instances recorded in an ensemble's provenance (0 for
/// non-ensemble sets).
pub fn tie_count(set: &PredictionSet) -> usize {
    match &set.provenance {
        Provenance::Ensemble(p) => p.tie_count,
        _ => 0,
    }
}
