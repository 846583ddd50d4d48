//! Prompt rendering: premises, n-shot demonstrations, chain-of-thought and
//! contrastive chain-of-thought explanations.
//!
//! Layout of a rendered prompt (blocks joined by a single `\n`):
//!
//! ```text
//! Premise: <premise>                 \
//! Statement: <statement>              | one block group per demonstration
//! Explanation: <evidence>             |   (CoT only)
//! Correct explanation: <evidence>     |   (CCoT only)
//! Incorrect explanation: <other>      |   (CCoT only)
//! Answer: Yes                        /
//! Premise: <premise>
//! Statement: <statement>
//! Based on this premise, is the hypothesis true? OPTIONS: -'Yes' -'No'
//! ```
//!
//! Templates 4 and 5 put the instruction first and the statement before the
//! premise. Everything a prompt depends on is captured in its [`Recipe`], so
//! [`PromptBuilder::replay`] reproduces the text byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, Instance, InstanceType, Label, SectionName};
use crate::tokenize::TokenizerConfig;

pub const YES_NO_OPTIONS: &str = "OPTIONS: -'Yes' -'No'";
pub const PRIMARY_MARKER: &str = "Primary trial: ";
pub const SECONDARY_MARKER: &str = "Secondary trial: ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instance {instance_id}: CTR {ctr_id} not in corpus")]
    MissingCtr { instance_id: String, ctr_id: String },
    #[error("CTR {ctr_id} has no sentences in section {section}")]
    EmptySection { ctr_id: String, section: SectionName },
    #[error("demonstration pool too small: need {requested}, have {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("instance {0} has no evidence; CoT/CCoT demonstrations need evidence")]
    NoEvidence(String),
    #[error("instance {0} has no gold label and cannot be a demonstration")]
    MissingGold(String),
    #[error("incompatible prompt plan: {0}")]
    IncompatiblePlan(String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("prompt length report over zero prompts")]
    EmptyReport,
    #[error("{path}: {reason}")]
    Dump { path: String, reason: String },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

/// Word pair used for answers, both in demonstrations and when parsing
/// generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerVocabulary {
    YesNo,
    EntailContradict,
}

impl AnswerVocabulary {
    pub fn word(self, label: Label) -> &'static str {
        match (self, label) {
            (AnswerVocabulary::YesNo, Label::Entailment) => "Yes",
            (AnswerVocabulary::YesNo, Label::Contradiction) => "No",
            (AnswerVocabulary::EntailContradict, Label::Entailment) => "entailment",
            (AnswerVocabulary::EntailContradict, Label::Contradiction) => "contradiction",
        }
    }

    pub fn answer_line(self, label: Label) -> String {
        format!("Answer: {}", self.word(label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    FlanSimple,
    Alt1,
    Alt2,
    Alt3,
    Alt4,
    Alt5Persona,
}

const ALT4_INSTRUCTION: &str = "From the following statement and premise, would you say there is a contradiction or an entailment between the statement and the premise? Just answer by saying 'contradiction' or 'entailment'.";

const PERSONA_PREFIX: &str = "Imagine you are a medical practitioner and you are reviewing clinical trials. You are given a statement and a premise. You should determine if there is an entailment or a contradiction between the premise and the statement. There is necessarily an entailment or a contradiction, no neutral case.";

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::FlanSimple,
        TemplateId::Alt1,
        TemplateId::Alt2,
        TemplateId::Alt3,
        TemplateId::Alt4,
        TemplateId::Alt5Persona,
    ];

    pub fn vocabulary(self) -> AnswerVocabulary {
        match self {
            TemplateId::Alt4 | TemplateId::Alt5Persona => AnswerVocabulary::EntailContradict,
            _ => AnswerVocabulary::YesNo,
        }
    }

    fn statement_first(self) -> bool {
        matches!(self, TemplateId::Alt4 | TemplateId::Alt5Persona)
    }

    /// Question line that follows premise and statement (premise-first
    /// templates only).
    fn question(self) -> Option<&'static str> {
        match self {
            TemplateId::FlanSimple => Some("Based on this premise, is the hypothesis true?"),
            TemplateId::Alt1 => Some("Does the premise entail the hypothesis?"),
            TemplateId::Alt2 => Some("Is the hypothesis entailed by the premise?"),
            TemplateId::Alt3 => Some(
                "If this premise is true, what does that tell us about whether it entails the hypothesis?",
            ),
            TemplateId::Alt4 | TemplateId::Alt5Persona => None,
        }
    }

    /// Instruction block that precedes statement and premise
    /// (statement-first templates only).
    fn instruction(self) -> Option<String> {
        match self {
            TemplateId::Alt4 => Some(ALT4_INSTRUCTION.to_string()),
            TemplateId::Alt5Persona => Some(format!("{PERSONA_PREFIX} {ALT4_INSTRUCTION}")),
            _ => None,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::FlanSimple => "flan_simple",
            TemplateId::Alt1 => "alt1",
            TemplateId::Alt2 => "alt2",
            TemplateId::Alt3 => "alt3",
            TemplateId::Alt4 => "alt4",
            TemplateId::Alt5Persona => "alt5_persona",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationStyle {
    #[default]
    Plain,
    #[serde(rename = "cot")]
    CoT,
    #[serde(rename = "ccot")]
    CCoT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShotPlan {
    pub n_shots: u8,
    #[serde(default)]
    pub style: ExplanationStyle,
    pub seed: u64,
    #[serde(default)]
    pub stratify_by_label: bool,
}

impl ShotPlan {
    pub fn zero_shot(seed: u64) -> Self {
        ShotPlan {
            n_shots: 0,
            style: ExplanationStyle::Plain,
            seed,
            stratify_by_label: false,
        }
    }

    pub fn new(n_shots: u8, style: ExplanationStyle, seed: u64) -> Self {
        ShotPlan {
            n_shots,
            style,
            seed,
            stratify_by_label: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shots > 2 {
            return Err(PromptError::IncompatiblePlan(format!(
                "n_shots must be 0, 1 or 2 (got {})",
                self.n_shots
            )));
        }
        if self.style != ExplanationStyle::Plain && self.n_shots == 0 {
            return Err(PromptError::IncompatiblePlan(
                "CoT/CCoT explanations live in demonstrations; n_shots must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Short name in the style of `ZS`, `1S`, `2S-CCOT`.
    pub fn label(&self) -> String {
        let shots = if self.n_shots == 0 {
            "ZS".to_string()
        } else {
            format!("{}S", self.n_shots)
        };
        match self.style {
            ExplanationStyle::Plain => shots,
            ExplanationStyle::CoT => format!("{shots}-COT"),
            ExplanationStyle::CCoT => format!("{shots}-CCOT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialSide {
    Primary,
    Secondary,
}

/// One premise sentence used as (part of) an explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationSentence {
    pub side: TrialSide,
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Explanations {
    pub correct: Option<Vec<ExplanationSentence>>,
    pub incorrect: Option<Vec<ExplanationSentence>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub source_instance_id: String,
    pub premise_text: String,
    pub statement: String,
    pub answer: Label,
    pub correct_explanation: Option<Vec<String>>,
    pub incorrect_explanation: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub template_id: TemplateId,
    pub shot_plan: ShotPlan,
    pub demonstration_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub instance_id: String,
    pub text: String,
    pub recipe: Recipe,
    pub token_count: usize,
}

/// Stable 64-bit seed from a global seed and a list of ids. Hash-based so
/// the result does not depend on iteration or thread order.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn section_of<'c>(
    corpus: &'c Corpus,
    instance: &Instance,
    ctr_id: &str,
) -> Result<&'c [String]> {
    let record = corpus.get(ctr_id).ok_or_else(|| PromptError::MissingCtr {
        instance_id: instance.id.clone(),
        ctr_id: ctr_id.to_string(),
    })?;
    let sentences = record.section(instance.section);
    if sentences.is_empty() {
        return Err(PromptError::EmptySection {
            ctr_id: ctr_id.to_string(),
            section: instance.section,
        });
    }
    Ok(sentences)
}

/// The whole referenced section, sentences joined by single spaces. For
/// comparisons both trials appear, primary first, on separate lines.
pub fn build_premise(instance: &Instance, corpus: &Corpus) -> Result<String> {
    let primary = section_of(corpus, instance, &instance.primary_ctr_id)?.join(" ");
    match (&instance.instance_type, &instance.secondary_ctr_id) {
        (InstanceType::Comparison, Some(secondary_id)) => {
            let secondary = section_of(corpus, instance, secondary_id)?.join(" ");
            Ok(format!(
                "{PRIMARY_MARKER}{primary}\n{SECONDARY_MARKER}{secondary}"
            ))
        }
        _ => Ok(primary),
    }
}

/// Gold evidence (CoT) and, for CCoT, an equal number of non-evidence
/// sentences from the same section(s). Both lists are in document order.
pub fn build_cot_explanations(
    instance: &Instance,
    corpus: &Corpus,
    style: ExplanationStyle,
    seed: u64,
) -> Result<Explanations> {
    if style == ExplanationStyle::Plain {
        return Ok(Explanations::default());
    }
    if !instance.has_evidence() {
        return Err(PromptError::NoEvidence(instance.id.clone()));
    }

    let mut sides = vec![(
        TrialSide::Primary,
        instance.primary_ctr_id.as_str(),
        instance.primary_evidence.as_deref().unwrap_or(&[]),
    )];
    if let Some(secondary) = &instance.secondary_ctr_id {
        sides.push((
            TrialSide::Secondary,
            secondary.as_str(),
            instance.secondary_evidence.as_deref().unwrap_or(&[]),
        ));
    }

    let mut correct = Vec::new();
    let mut distractors = Vec::new();
    for (side, ctr_id, evidence) in sides {
        let sentences = section_of(corpus, instance, ctr_id)?;
        let evidence: BTreeSet<usize> = evidence.iter().copied().collect();
        for (index, text) in sentences.iter().enumerate() {
            let sentence = ExplanationSentence {
                side,
                index,
                text: text.clone(),
            };
            if evidence.contains(&index) {
                correct.push(sentence);
            } else {
                distractors.push(sentence);
            }
        }
    }

    if style == ExplanationStyle::CoT {
        return Ok(Explanations {
            correct: Some(correct),
            incorrect: None,
        });
    }

    let k = correct.len().min(distractors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, distractors.len(), k).into_vec();
    picked.sort_unstable();
    let incorrect = picked.into_iter().map(|i| distractors[i].clone()).collect();
    Ok(Explanations {
        correct: Some(correct),
        incorrect: Some(incorrect),
    })
}

fn texts(sentences: Option<Vec<ExplanationSentence>>) -> Option<Vec<String>> {
    sentences.map(|v| v.into_iter().map(|s| s.text).collect())
}

/// Builds the demonstration for one solved instance.
pub fn build_demonstration(
    source: &Instance,
    corpus: &Corpus,
    style: ExplanationStyle,
    seed: u64,
) -> Result<Demonstration> {
    let answer = source
        .gold_label
        .ok_or_else(|| PromptError::MissingGold(source.id.clone()))?;
    let explanations = build_cot_explanations(source, corpus, style, seed)?;
    Ok(Demonstration {
        source_instance_id: source.id.clone(),
        premise_text: build_premise(source, corpus)?,
        statement: source.statement.clone(),
        answer,
        correct_explanation: texts(explanations.correct),
        incorrect_explanation: texts(explanations.incorrect),
    })
}

/// Seed used for the explanation sampling of one demonstration inside the
/// prompt of `target_id`.
fn demonstration_seed(plan: &ShotPlan, target_id: &str, demo_id: &str) -> u64 {
    derive_seed(plan.seed, &[target_id, demo_id])
}

/// Picks demonstration sources from `pool`, never `exclude_id`.
pub fn select_demonstrations<'p>(
    pool: &'p [Instance],
    plan: &ShotPlan,
    exclude_id: &str,
) -> Result<Vec<&'p Instance>> {
    let n = plan.n_shots as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<&Instance> = pool.iter().filter(|i| i.id != exclude_id).collect();
    if candidates.len() < n {
        return Err(PromptError::PoolTooSmall {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[exclude_id]));

    if plan.stratify_by_label && n == 2 {
        let by_label = |label| -> Vec<&Instance> {
            candidates
                .iter()
                .copied()
                .filter(|i| i.gold_label == Some(label))
                .collect()
        };
        let entail = by_label(Label::Entailment);
        let contra = by_label(Label::Contradiction);
        if entail.is_empty() || contra.is_empty() {
            return Err(PromptError::PoolTooSmall {
                requested: 1,
                available: 0,
            });
        }
        let e = entail[rng.random_range(0..entail.len())];
        let c = contra[rng.random_range(0..contra.len())];
        return Ok(if rng.random_bool(0.5) { vec![e, c] } else { vec![c, e] });
    }

    Ok(index::sample(&mut rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Seeded draw of `plan.n_shots` demonstrations for the instance
/// `exclude_id`, with explanations per `plan.style`.
pub fn sample_demonstrations(
    pool: &[Instance],
    corpus: &Corpus,
    plan: &ShotPlan,
    exclude_id: &str,
) -> Result<Vec<Demonstration>> {
    select_demonstrations(pool, plan, exclude_id)?
        .into_iter()
        .map(|source| {
            build_demonstration(
                source,
                corpus,
                plan.style,
                demonstration_seed(plan, exclude_id, &source.id),
            )
        })
        .collect()
}

fn push_demonstration(blocks: &mut Vec<String>, demo: &Demonstration, template: TemplateId) {
    let premise = format!("Premise: {}", demo.premise_text);
    let statement = format!("Statement: {}", demo.statement);
    if template.statement_first() {
        blocks.push(statement);
        blocks.push(premise);
    } else {
        blocks.push(premise);
        blocks.push(statement);
    }
    match (&demo.correct_explanation, &demo.incorrect_explanation) {
        (Some(correct), None) => blocks.push(format!("Explanation: {}", correct.join(" "))),
        (Some(correct), Some(incorrect)) => {
            blocks.push(format!("Correct explanation: {}", correct.join(" ")));
            if incorrect.is_empty() {
                blocks.push("Incorrect explanation:".to_string());
            } else {
                blocks.push(format!("Incorrect explanation: {}", incorrect.join(" ")));
            }
        }
        _ => {}
    }
    blocks.push(template.vocabulary().answer_line(demo.answer));
}

/// Assembles the final prompt text from already-built parts.
pub fn assemble(
    template: TemplateId,
    demonstrations: &[Demonstration],
    premise: &str,
    statement: &str,
) -> String {
    let mut blocks = Vec::new();
    for demo in demonstrations {
        push_demonstration(&mut blocks, demo, template);
    }
    if let Some(instruction) = template.instruction() {
        blocks.push(instruction);
        blocks.push(format!("Statement: {statement}"));
        blocks.push(format!("Premise: {premise}"));
    } else {
        blocks.push(format!("Premise: {premise}"));
        blocks.push(format!("Statement: {statement}"));
        let question = template.question().expect("premise-first template has a question");
        blocks.push(format!("{question} {YES_NO_OPTIONS}"));
    }
    blocks.join("\n")
}

fn check_compatible(template: TemplateId, plan: &ShotPlan) -> Result<()> {
    plan.validate()?;
    if plan.style != ExplanationStyle::Plain && template != TemplateId::FlanSimple {
        return Err(PromptError::IncompatiblePlan(format!(
            "{} explanations are only rendered with the flan_simple template (got {template})",
            plan.label()
        )));
    }
    Ok(())
}

/// Renders prompts against one corpus and demonstration pool.
pub struct PromptBuilder<'a> {
    corpus: &'a Corpus,
    pool: &'a [Instance],
    by_id: HashMap<&'a str, &'a Instance>,
    tokenizer: TokenizerConfig,
}

impl<'a> PromptBuilder<'a> {
    /// `instances` is every instance a recipe may name (targets and
    /// demonstrations); `pool` is the ordered demonstration pool.
    pub fn new(
        corpus: &'a Corpus,
        instances: &'a [Instance],
        pool: &'a [Instance],
        tokenizer: TokenizerConfig,
    ) -> Self {
        let mut by_id: HashMap<&str, &Instance> =
            instances.iter().map(|i| (i.id.as_str(), i)).collect();
        for instance in pool {
            by_id.entry(instance.id.as_str()).or_insert(instance);
        }
        PromptBuilder {
            corpus,
            pool,
            by_id,
            tokenizer,
        }
    }

    pub fn instance(&self, id: &str) -> Result<&'a Instance> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| PromptError::UnknownInstance(id.to_string()))
    }

    /// Draws demonstrations for `instance` and renders the full prompt.
    pub fn render(
        &self,
        instance: &Instance,
        template: TemplateId,
        plan: &ShotPlan,
    ) -> Result<RenderedPrompt> {
        check_compatible(template, plan)?;
        let demonstration_ids = select_demonstrations(self.pool, plan, &instance.id)?
            .into_iter()
            .map(|i| i.id.clone())
            .collect();
        let recipe = Recipe {
            template_id: template,
            shot_plan: *plan,
            demonstration_ids,
        };
        self.render_recipe(instance, recipe)
    }

    /// Re-renders a stored prompt from its recipe.
    pub fn replay(&self, instance_id: &str, recipe: &Recipe) -> Result<RenderedPrompt> {
        let instance = self.instance(instance_id)?;
        self.render_recipe(instance, recipe.clone())
    }

    fn render_recipe(&self, instance: &Instance, recipe: Recipe) -> Result<RenderedPrompt> {
        check_compatible(recipe.template_id, &recipe.shot_plan)?;
        if recipe.demonstration_ids.len() != recipe.shot_plan.n_shots as usize {
            return Err(PromptError::IncompatiblePlan(format!(
                "recipe lists {} demonstrations for a {}-shot plan",
                recipe.demonstration_ids.len(),
                recipe.shot_plan.n_shots
            )));
        }
        let mut demonstrations = Vec::with_capacity(recipe.demonstration_ids.len());
        for demo_id in &recipe.demonstration_ids {
            if demo_id == &instance.id {
                return Err(PromptError::IncompatiblePlan(format!(
                    "instance {demo_id} cannot demonstrate itself"
                )));
            }
            let source = self.instance(demo_id)?;
            demonstrations.push(build_demonstration(
                source,
                self.corpus,
                recipe.shot_plan.style,
                demonstration_seed(&recipe.shot_plan, &instance.id, demo_id),
            )?);
        }
        let premise = build_premise(instance, self.corpus)?;
        let text = assemble(
            recipe.template_id,
            &demonstrations,
            &premise,
            &instance.statement,
        );
        let token_count = self.tokenizer.count(&text);
        Ok(RenderedPrompt {
            instance_id: instance.id.clone(),
            text,
            recipe,
            token_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLengthRow {
    pub template_id: TemplateId,
    pub plan: String,
    pub count: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

/// Mean/min/max token counts grouped by template and plan (seed ignored).
pub fn prompt_length_report(rendered: &[RenderedPrompt]) -> Result<Vec<PromptLengthRow>> {
    if rendered.is_empty() {
        return Err(PromptError::EmptyReport);
    }
    let mut groups: BTreeMap<(TemplateId, u8, ExplanationStyle), Vec<usize>> = BTreeMap::new();
    for prompt in rendered {
        let plan = &prompt.recipe.shot_plan;
        groups
            .entry((prompt.recipe.template_id, plan.n_shots, plan.style))
            .or_default()
            .push(prompt.token_count);
    }
    Ok(groups
        .into_iter()
        .map(|((template_id, n_shots, style), counts)| {
            let total: usize = counts.iter().sum();
            PromptLengthRow {
                template_id,
                plan: ShotPlan::new(n_shots, style, 0).label(),
                count: counts.len(),
                mean: total as f64 / counts.len() as f64,
                min: *counts.iter().min().expect("non-empty group"),
                max: *counts.iter().max().expect("non-empty group"),
            }
        })
        .collect())
}

pub fn write_prompt_dump(path: &Path, prompts: &[RenderedPrompt]) -> Result<()> {
    let dump_err = |e: std::io::Error| PromptError::Dump {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut out = Vec::new();
    for prompt in prompts {
        serde_json::to_writer(&mut out, prompt).expect("prompt serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(dump_err)?;
    file.write_all(&out).map_err(dump_err)
}

pub fn read_prompt_dump(path: &Path) -> Result<Vec<RenderedPrompt>> {
    let dump_err = |reason: String| PromptError::Dump {
        path: path.display().to_string(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| dump_err(e.to_string()))?;
    let mut prompts = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| dump_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(
            serde_json::from_str(&line).map_err(|e| dump_err(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClinicalTrialRecord, Split};

    fn corpus() -> Corpus {
        let mut a = BTreeMap::new();
        a.insert(
            SectionName::Eligibility,
            vec!["S0.".to_string(), "S1.".into(), "S2.".into(), "S3.".into()],
        );
        let mut b = BTreeMap::new();
        b.insert(SectionName::Eligibility, vec!["T0.".to_string(), "T1.".into()]);
        Corpus::from_records([
            ClinicalTrialRecord {
                id: "A".into(),
                sections: a,
            },
            ClinicalTrialRecord {
                id: "B".into(),
                sections: b,
            },
        ])
        .unwrap()
    }

    fn single(id: &str, evidence: Option<Vec<usize>>, label: Label) -> Instance {
        Instance {
            id: id.into(),
            instance_type: InstanceType::Single,
            section: SectionName::Eligibility,
            primary_ctr_id: "A".into(),
            secondary_ctr_id: None,
            statement: format!("statement {id}"),
            gold_label: Some(label),
            primary_evidence: evidence,
            secondary_evidence: None,
            split: Split::Train,
            contrast_meta: None,
        }
    }

    #[test]
    fn single_premise_joins_with_spaces() {
        let inst = single("x", None, Label::Entailment);
        assert_eq!(build_premise(&inst, &corpus()).unwrap(), "S0. S1. S2. S3.");
    }

    #[test]
    fn comparison_premise_primary_first() {
        let mut inst = single("x", None, Label::Entailment);
        inst.instance_type = InstanceType::Comparison;
        inst.primary_ctr_id = "B".into();
        inst.secondary_ctr_id = Some("A".into());
        assert_eq!(
            build_premise(&inst, &corpus()).unwrap(),
            "Primary trial: T0. T1.\nSecondary trial: S0. S1. S2. S3."
        );
    }

    #[test]
    fn empty_section_is_an_error() {
        let mut inst = single("x", None, Label::Entailment);
        inst.section = SectionName::Results;
        assert!(matches!(
            build_premise(&inst, &corpus()),
            Err(PromptError::EmptySection { .. })
        ));
    }

    #[test]
    fn cot_selects_evidence_in_index_order() {
        let inst = single("x", Some(vec![2, 0]), Label::Entailment);
        let ex = build_cot_explanations(&inst, &corpus(), ExplanationStyle::CoT, 1).unwrap();
        let correct: Vec<_> = ex.correct.unwrap().into_iter().map(|s| s.text).collect();
        assert_eq!(correct, vec!["S0.", "S2."]);
        assert!(ex.incorrect.is_none());
    }

    #[test]
    fn plain_has_no_explanations() {
        let inst = single("x", None, Label::Entailment);
        let ex = build_cot_explanations(&inst, &corpus(), ExplanationStyle::Plain, 1).unwrap();
        assert_eq!(ex, Explanations::default());
    }

    #[test]
    fn ccot_incorrect_is_disjoint_and_sized() {
        let inst = single("x", Some(vec![1]), Label::Entailment);
        for seed in 0..50 {
            let ex = build_cot_explanations(&inst, &corpus(), ExplanationStyle::CCoT, seed).unwrap();
            let incorrect = ex.incorrect.unwrap();
            assert_eq!(incorrect.len(), 1);
            assert_ne!(incorrect[0].index, 1);
        }
        // k is capped by the number of non-evidence sentences.
        let inst = single("y", Some(vec![0, 1, 2]), Label::Entailment);
        let ex = build_cot_explanations(&inst, &corpus(), ExplanationStyle::CCoT, 3).unwrap();
        assert_eq!(ex.incorrect.unwrap().iter().map(|s| s.index).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn cot_without_evidence_fails() {
        let inst = single("x", None, Label::Entailment);
        assert!(matches!(
            build_cot_explanations(&inst, &corpus(), ExplanationStyle::CCoT, 0),
            Err(PromptError::NoEvidence(_))
        ));
    }

    #[test]
    fn plan_validation() {
        assert!(ShotPlan::new(0, ExplanationStyle::CoT, 0).validate().is_err());
        assert!(ShotPlan::new(3, ExplanationStyle::Plain, 0).validate().is_err());
        assert!(ShotPlan::new(2, ExplanationStyle::CCoT, 0).validate().is_ok());
        assert_eq!(ShotPlan::new(2, ExplanationStyle::CCoT, 0).label(), "2S-CCOT");
        assert_eq!(ShotPlan::zero_shot(0).label(), "ZS");
    }

    #[test]
    fn cot_requires_flan_template() {
        let c = corpus();
        let pool = vec![single("d", Some(vec![0]), Label::Entailment)];
        let target = single("t", None, Label::Contradiction);
        let all = vec![target.clone()];
        let builder = PromptBuilder::new(&c, &all, &pool, TokenizerConfig::Whitespace);
        let err = builder
            .render(&target, TemplateId::Alt1, &ShotPlan::new(1, ExplanationStyle::CoT, 0))
            .unwrap_err();
        assert!(matches!(err, PromptError::IncompatiblePlan(_)));
        // Plain n-shot is fine with any template.
        builder
            .render(&target, TemplateId::Alt4, &ShotPlan::new(1, ExplanationStyle::Plain, 0))
            .unwrap();
    }

    #[test]
    fn sampling_never_returns_excluded_and_checks_size() {
        let pool: Vec<Instance> = (0..5)
            .map(|i| single(&format!("p{i}"), Some(vec![0]), Label::Entailment))
            .collect();
        for seed in 0..100 {
            let plan = ShotPlan::new(2, ExplanationStyle::Plain, seed);
            let picked = select_demonstrations(&pool, &plan, "p3").unwrap();
            assert_eq!(picked.len(), 2);
            assert!(picked.iter().all(|i| i.id != "p3"));
            assert_ne!(picked[0].id, picked[1].id);
        }
        let err = select_demonstrations(&pool[..2], &ShotPlan::new(2, ExplanationStyle::Plain, 0), "p0")
            .unwrap_err();
        assert!(matches!(err, PromptError::PoolTooSmall { requested: 2, available: 1 }));
        assert!(select_demonstrations(&[], &ShotPlan::zero_shot(0), "x").unwrap().is_empty());
    }

    #[test]
    fn stratified_two_shot_has_both_labels() {
        let mut pool: Vec<Instance> = (0..9)
            .map(|i| single(&format!("e{i}"), Some(vec![0]), Label::Entailment))
            .collect();
        pool.push(single("c0", Some(vec![0]), Label::Contradiction));
        let mut plan = ShotPlan::new(2, ExplanationStyle::Plain, 0);
        plan.stratify_by_label = true;
        for seed in 0..50 {
            plan.seed = seed;
            let picked = select_demonstrations(&pool, &plan, "t").unwrap();
            let labels: BTreeSet<_> = picked.iter().map(|i| i.gold_label.unwrap()).collect();
            assert_eq!(labels.len(), 2);
        }
    }

    #[test]
    fn length_report_groups_and_rejects_empty() {
        assert!(matches!(prompt_length_report(&[]), Err(PromptError::EmptyReport)));
        let prompt = RenderedPrompt {
            instance_id: "x".into(),
            text: String::new(),
            recipe: Recipe {
                template_id: TemplateId::FlanSimple,
                shot_plan: ShotPlan::zero_shot(1),
                demonstration_ids: vec![],
            },
            token_count: 573,
        };
        let rows = prompt_length_report(&[prompt]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].mean, rows[0].min, rows[0].max), (573.0, 573, 573));
        assert_eq!(rows[0].plan, "ZS");
    }

    #[test]
    fn derive_seed_separates_parts() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
        assert_eq!(derive_seed(9, &["x"]), derive_seed(9, &["x"]));
    }
}
