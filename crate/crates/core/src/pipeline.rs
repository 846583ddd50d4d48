//! Declarative experiment runs: ingest → render → infer → ensemble →
//! evaluate → report, each stage resumable from its recorded artifacts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    self, compute_stats, shuffle_and_pool_from, Corpus, CorpusError, CorpusStats, Instance,
    InstanceSource, Split,
};
use crate::ensemble::{self, Coverage, EnsembleError, EnsembleSpec};
use crate::inference::{
    self, BackendConfig, BackendKind, CompletionBackend, CompletionRequest, HttpBackend,
    ImportFormat, InferenceError, MockBackend, MockScript, PredictionSet, ResponseCache, RunStats,
};
use crate::metrics::{self, EvaluationReport, MetricsError, RobustnessDefinition};
use crate::prompt::{
    prompt_length_report, read_prompt_dump, write_prompt_dump, ExplanationStyle, PromptBuilder,
    PromptError, ShotPlan, TemplateId,
};
use crate::tokenize::TokenizerConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ENDPOINT_ENV_PREFIX: &str = "CTNLI_ENDPOINT_";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Process exit code: 1 metric/coverage failure, 2 input error,
    /// 3 backend error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { source, .. } => source.exit_code(),
            PipelineError::Inference(
                InferenceError::BackendUnreachable(_)
                | InferenceError::BackendError { .. }
                | InferenceError::Timeout(_),
            ) => 3,
            PipelineError::Ensemble(_) => 1,
            PipelineError::Metrics(MetricsError::Io { .. }) => 2,
            PipelineError::Metrics(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Render,
    Infer,
    Ensemble,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Render,
        Stage::Infer,
        Stage::Ensemble,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Render => "render",
            Stage::Infer => "infer",
            Stage::Ensemble => "ensemble",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub ctr_dir: PathBuf,
    #[serde(default)]
    pub instances: Vec<InstanceSource>,
    #[serde(default)]
    pub contrast_mapping: Option<PathBuf>,
    #[serde(default)]
    pub gold_labels: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(default = "default_template")]
    pub template: TemplateId,
    #[serde(default)]
    pub n_shots: u8,
    #[serde(default)]
    pub style: ExplanationStyle,
    #[serde(default)]
    pub stratify_by_label: bool,
    /// Splits the demonstration pool is drawn from.
    #[serde(default = "default_pool_splits")]
    pub pool_splits: Vec<Split>,
    /// Splits whose instances get prompts.
    #[serde(default = "default_target_splits")]
    pub target_splits: Vec<Split>,
}

fn default_template() -> TemplateId {
    TemplateId::FlanSimple
}
fn default_pool_splits() -> Vec<Split> {
    corpus::DEFAULT_POOL_SPLITS.to_vec()
}
fn default_target_splits() -> Vec<Split> {
    vec![Split::TestControl, Split::TestContrast]
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            template: default_template(),
            n_shots: 0,
            style: ExplanationStyle::Plain,
            stratify_by_label: false,
            pool_splits: default_pool_splits(),
            target_splits: default_target_splits(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_control")]
    pub control_split: Split,
    #[serde(default = "default_contrast")]
    pub contrast_split: Split,
    #[serde(default)]
    pub robustness: RobustnessDefinition,
    #[serde(default = "yes")]
    pub breakdowns: bool,
}

fn default_control() -> Split {
    Split::TestControl
}
fn default_contrast() -> Split {
    Split::TestContrast
}
fn yes() -> bool {
    true
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            control_split: default_control(),
            contrast_split: default_contrast(),
            robustness: RobustnessDefinition::default(),
            breakdowns: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub ensembles: Vec<EnsembleSpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config, resolves relative paths against its directory,
    /// and applies `CTNLI_ENDPOINT_<BACKEND>` overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.apply_env_overrides(|key| std::env::var(key).ok());
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.ctr_dir);
        self.corpus.instances.iter_mut().for_each(|s| fix(&mut s.path));
        if let Some(p) = &mut self.corpus.contrast_mapping {
            fix(p);
        }
        self.corpus.gold_labels.iter_mut().for_each(fix);
        for backend in &mut self.backends {
            if let Some(p) = &mut backend.import_path {
                fix(p);
            }
        }
    }

    /// Endpoint overrides for wire-protocol backends.
    pub fn apply_env_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for backend in &mut self.backends {
            if backend.kind != BackendKind::WireProtocol {
                continue;
            }
            let key = format!(
                "{ENDPOINT_ENV_PREFIX}{}",
                backend.name.to_ascii_uppercase().replace(['-', '.', ' '], "_")
            );
            if let Some(endpoint) = lookup(&key) {
                backend.endpoint = Some(endpoint);
            }
        }
    }

    pub fn shot_plan(&self) -> ShotPlan {
        ShotPlan {
            n_shots: self.prompt.n_shots,
            style: self.prompt.style,
            seed: self.seed,
            stratify_by_label: self.prompt.stratify_by_label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shot_plan().validate()?;
        if self.prompt.style != ExplanationStyle::Plain && self.prompt.template != TemplateId::FlanSimple {
            return Err(PipelineError::Config(
                "CoT/CCoT require the flan_simple template".into(),
            ));
        }
        let mut names = HashSet::new();
        for backend in &self.backends {
            backend.validate()?;
            if !names.insert(backend.name.as_str()) {
                return Err(PipelineError::Config(format!(
                    "duplicate system name {}",
                    backend.name
                )));
            }
            if backend.kind == BackendKind::Mock && backend.mock.is_none() {
                return Err(PipelineError::Config(format!(
                    "mock backend {} needs a `mock` script",
                    backend.name
                )));
            }
        }
        for spec in &self.ensembles {
            spec.validate()?;
            for member in &spec.members {
                if !names.contains(member.as_str()) {
                    return Err(PipelineError::Config(format!(
                        "ensemble {} references unknown system {member}",
                        spec.name
                    )));
                }
            }
            if !names.insert(spec.name.as_str()) {
                return Err(PipelineError::Config(format!(
                    "duplicate system name {}",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the named backend and the ensembles that can still be
    /// formed without the others.
    pub fn restrict_to_backend(&mut self, name: &str) -> Result<()> {
        if !self.backends.iter().any(|b| b.name == name) {
            return Err(PipelineError::Config(format!("no backend named {name}")));
        }
        self.backends.retain(|b| b.name == name);
        let mut available: HashSet<String> = [name.to_string()].into();
        self.ensembles.retain(|spec| {
            let ok = spec.members.iter().all(|m| available.contains(m));
            if ok {
                available.insert(spec.name.clone());
            }
            ok
        });
        Ok(())
    }

    pub fn force_strict_coverage(&mut self) {
        for spec in &mut self.ensembles {
            spec.coverage = Coverage::Strict;
        }
    }

    /// Hash of the configuration, independent of where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

// Backends selected at run time

pub enum AnyBackend {
    Http(HttpBackend),
    Mock(MockBackend),
}

impl CompletionBackend for AnyBackend {
    async fn complete(&self, request: &CompletionRequest) -> inference::Result<String> {
        match self {
            AnyBackend::Http(b) => b.complete(request).await,
            AnyBackend::Mock(b) => b.complete(request).await,
        }
    }

    fn requests_sent(&self) -> usize {
        match self {
            AnyBackend::Http(b) => b.requests_sent(),
            AnyBackend::Mock(b) => b.requests_sent(),
        }
    }
}

pub type BackendFactory = Arc<dyn Fn(&BackendConfig) -> inference::Result<AnyBackend> + Send + Sync>;

pub fn default_backend(config: &BackendConfig) -> inference::Result<AnyBackend> {
    match config.kind {
        BackendKind::WireProtocol => {
            let endpoint = config.endpoint.as_deref().ok_or_else(|| {
                InferenceError::Config(format!("{}: missing endpoint", config.name))
            })?;
            Ok(AnyBackend::Http(HttpBackend::new(endpoint, config.timeout())?))
        }
        BackendKind::Mock => {
            let script = config.mock.clone().unwrap_or(MockScript::PromptHash);
            Ok(AnyBackend::Mock(MockBackend::from_script(&script)))
        }
        BackendKind::FileImport => Err(InferenceError::Config(format!(
            "{} imports predictions and has no completion backend",
            config.name
        ))),
    }
}

// Manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    /// Path relative to the output directory → sha256 of its content.
    pub artifacts: BTreeMap<String, String>,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Response cache shared by all inference backends of the run.
    pub cache: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub created_at: String,
    pub updated_at: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_FILE: &str = "cache/responses.json";

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Artifact path → hash over all completed stages.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|r| r.artifacts.clone())
            .collect()
    }

    pub fn artifact_path(&self, relative: &str) -> PathBuf {
        self.output_dir.join(relative)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash over every input file of the corpus configuration.
pub fn corpus_hash(config: &CorpusConfig) -> Result<String> {
    let mut files = Vec::new();
    let entries = fs::read_dir(&config.ctr_dir).map_err(io_err(&config.ctr_dir))?;
    for entry in entries {
        let path = entry.map_err(io_err(&config.ctr_dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    let mut add = |label: &str, path: &Path| -> Result<()> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        hasher.update(label.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(())
    };
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        add(&format!("ctr:{name}"), path)?;
    }
    for source in &config.instances {
        add(&format!("instances:{}", source.split), &source.path)?;
    }
    if let Some(p) = &config.contrast_mapping {
        add("contrast", p)?;
    }
    for p in &config.gold_labels {
        add("gold", p)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Loads the corpus described by `config`, attaching gold labels and
/// contrast metadata when configured.
pub fn load_configured_corpus(config: &CorpusConfig) -> Result<(Corpus, Vec<Instance>)> {
    let (corpus, mut instances) = corpus::load_corpus(&config.ctr_dir, &config.instances)?;
    for gold in &config.gold_labels {
        corpus::attach_gold_labels(&mut instances, gold)?;
    }
    if let Some(mapping) = &config.contrast_mapping {
        corpus::attach_contrast_mapping(&mut instances, mapping)?;
    }
    Ok((corpus, instances))
}

// Artifact paths

pub const STATS_FILE: &str = "corpus_stats.json";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const PROMPT_LENGTHS_FILE: &str = "prompt_lengths.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

pub fn predictions_file(system: &str) -> String {
    format!("predictions/{system}.json")
}

pub fn submission_file(system: &str) -> String {
    format!("submissions/{system}.json")
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// One experiment run rooted at `config.output_dir`.
pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    resume: bool,
    factory: BackendFactory,
    manifest: RunManifest,
    data: Option<(Corpus, Vec<Instance>)>,
    infer_stats: BTreeMap<String, RunStats>,
    executed: Vec<Stage>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(out.join("predictions")).map_err(io_err(&out))?;
        fs::create_dir_all(out.join("cache")).map_err(io_err(&out))?;
        let config_hash = config.hash();
        let corpus_hash = corpus_hash(&config.corpus)?;

        let manifest_path = out.join(MANIFEST_FILE);
        let previous = if manifest_path.exists() {
            RunManifest::load(&manifest_path).ok()
        } else {
            None
        };
        let manifest = match previous {
            Some(m) if m.config_hash == config_hash && m.corpus_hash == corpus_hash => m,
            _ => {
                let stamp = now();
                RunManifest {
                    tool_version: TOOL_VERSION.to_string(),
                    config_hash,
                    corpus_hash,
                    seed: config.seed,
                    output_dir: out.clone(),
                    cache: CACHE_FILE.to_string(),
                    stages: BTreeMap::new(),
                    created_at: stamp.clone(),
                    updated_at: stamp,
                }
            }
        };
        Ok(Pipeline {
            config,
            out,
            resume: false,
            factory: Arc::new(default_backend),
            manifest,
            data: None,
            infer_stats: BTreeMap::new(),
            executed: Vec::new(),
        })
    }

    /// Skip stages whose recorded artifacts still hash-match.
    pub fn resume(mut self, resume: bool) -> Self {
        self.resume = resume;
        self
    }

    pub fn with_backend_factory(mut self, factory: BackendFactory) -> Self {
        self.factory = factory;
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Stages executed (not skipped) by this pipeline object.
    pub fn executed_stages(&self) -> &[Stage] {
        &self.executed
    }

    /// Per-backend counters of the last inference stage.
    pub fn infer_stats(&self) -> &BTreeMap<String, RunStats> {
        &self.infer_stats
    }

    pub fn data(&mut self) -> Result<&(Corpus, Vec<Instance>)> {
        if self.data.is_none() {
            self.data = Some(load_configured_corpus(&self.config.corpus)?);
        }
        Ok(self.data.as_ref().expect("just loaded"))
    }

    pub fn run(&mut self) -> Result<RunManifest> {
        self.run_until(Stage::Report)
    }

    /// Runs every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<RunManifest> {
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            self.run_stage(stage).map_err(|e| match e {
                PipelineError::Stage { .. } => e,
                other => PipelineError::Stage {
                    stage,
                    source: Box::new(other),
                },
            })?;
        }
        Ok(self.manifest.clone())
    }

    fn input_hash(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.manifest.config_hash.as_bytes());
        hasher.update(self.manifest.corpus_hash.as_bytes());
        hasher.update(stage.as_str().as_bytes());
        for (earlier, record) in self.manifest.stages.range(..stage) {
            hasher.update(earlier.as_str().as_bytes());
            for (path, hash) in &record.artifacts {
                hasher.update(path.as_bytes());
                hasher.update(hash.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn up_to_date(&self, stage: Stage, input_hash: &str) -> bool {
        let Some(record) = self.manifest.stages.get(&stage) else {
            return false;
        };
        record.input_hash == input_hash
            && record.artifacts.iter().all(|(path, hash)| {
                sha256_file(&self.out.join(path)).is_ok_and(|actual| &actual == hash)
            })
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let input_hash = self.input_hash(stage);
        if self.resume && self.up_to_date(stage, &input_hash) {
            log::info!("{stage}: up to date, skipped");
            return Ok(());
        }
        log::info!("{stage}: running");
        // Later stages depend on this one; drop their records first so a
        // failure here cannot leave stale successors looking valid.
        let stale: Vec<Stage> = self.manifest.stages.range(stage..).map(|(s, _)| *s).collect();
        for s in stale {
            self.manifest.stages.remove(&s);
        }

        let artifacts = match stage {
            Stage::Ingest => self.stage_ingest()?,
            Stage::Render => self.stage_render()?,
            Stage::Infer => self.stage_infer()?,
            Stage::Ensemble => self.stage_ensemble()?,
            Stage::Evaluate => self.stage_evaluate()?,
            Stage::Report => self.stage_report()?,
        };
        let mut hashes = BTreeMap::new();
        for relative in artifacts {
            let hash = sha256_file(&self.out.join(&relative))?;
            hashes.insert(relative, hash);
        }
        let stamp = now();
        self.manifest.stages.insert(
            stage,
            StageRecord {
                input_hash,
                artifacts: hashes,
                completed_at: stamp.clone(),
            },
        );
        self.manifest.updated_at = stamp;
        self.manifest.save(&self.out)?;
        self.executed.push(stage);
        Ok(())
    }

    fn stage_ingest(&mut self) -> Result<Vec<String>> {
        let tokenizer = self.config.tokenizer;
        let (corpus, instances) = self.data()?;
        let stats = compute_stats(corpus, instances, &tokenizer);
        write_pretty(&self.out.join(STATS_FILE), &stats)?;
        Ok(vec![STATS_FILE.to_string()])
    }

    fn stage_render(&mut self) -> Result<Vec<String>> {
        let plan = self.config.shot_plan();
        let template = self.config.prompt.template;
        let tokenizer = self.config.tokenizer;
        let targets_splits = self.config.prompt.target_splits.clone();
        let pool_splits = self.config.prompt.pool_splits.clone();
        let seed = self.config.seed;
        let (corpus, instances) = self.data()?;

        let pool = shuffle_and_pool_from(instances, seed, &pool_splits);
        let builder = PromptBuilder::new(corpus, instances, &pool, tokenizer);
        let mut targets: Vec<&Instance> = instances
            .iter()
            .filter(|i| targets_splits.contains(&i.split))
            .collect();
        targets.sort_by(|a, b| a.id.cmp(&b.id));
        let prompts = targets
            .into_iter()
            .map(|instance| builder.render(instance, template, &plan))
            .collect::<Result<Vec<_>, _>>()?;

        write_prompt_dump(&self.out.join(PROMPTS_FILE), &prompts)?;
        let mut artifacts = vec![PROMPTS_FILE.to_string()];
        if !prompts.is_empty() {
            write_pretty(&self.out.join(PROMPT_LENGTHS_FILE), &prompt_length_report(&prompts)?)?;
            artifacts.push(PROMPT_LENGTHS_FILE.to_string());
        }
        Ok(artifacts)
    }

    fn stage_infer(&mut self) -> Result<Vec<String>> {
        let prompts = read_prompt_dump(&self.out.join(PROMPTS_FILE))?;
        let known: Vec<String> = self.data()?.1.iter().map(|i| i.id.clone()).collect();
        let cache_path = self.out.join(CACHE_FILE);
        let cache = ResponseCache::load(&cache_path)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(io_err(&self.out))?;

        self.infer_stats.clear();
        let mut artifacts = Vec::new();
        for config in self.config.backends.clone() {
            let mut set = match config.kind {
                BackendKind::FileImport => {
                    let path = config.import_path.as_ref().expect("validated");
                    let format = config.import_format.unwrap_or(ImportFormat::PredictionsJson);
                    let mut set = inference::import_predictions(path, format)?;
                    set.validate_ids(known.iter().map(String::as_str))?;
                    set.system_name = config.name.clone();
                    set
                }
                _ => {
                    let backend = (self.factory)(&config)?;
                    let outcome = runtime.block_on(inference::run_backend(
                        &prompts, &config, &backend, &cache,
                    ));
                    // Keep whatever was answered, even when the run failed.
                    cache.save(&cache_path)?;
                    let (set, stats) = outcome?;
                    log::info!(
                        "{}: {} prompts, {} cache hits, {} requests, {} fallbacks",
                        config.name,
                        stats.prompts,
                        stats.cache_hits,
                        stats.requests,
                        stats.fallbacks
                    );
                    self.infer_stats.insert(config.name.clone(), stats);
                    set
                }
            };
            set.system_name = config.name.clone();
            let relative = predictions_file(&config.name);
            let path = self.out.join(&relative);
            fs::write(&path, inference::predictions_to_json(&set)).map_err(io_err(&path))?;
            artifacts.push(relative);
        }
        Ok(artifacts)
    }

    fn read_predictions(&self, system: &str) -> Result<PredictionSet> {
        let relative = predictions_file(system);
        let path = self.out.join(&relative);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(relative));
        }
        Ok(inference::import_predictions(&path, ImportFormat::PredictionsJson)?)
    }

    fn system_names(&self) -> Vec<String> {
        self.config
            .backends
            .iter()
            .map(|b| b.name.clone())
            .chain(self.config.ensembles.iter().map(|e| e.name.clone()))
            .collect()
    }

    fn stage_ensemble(&mut self) -> Result<Vec<String>> {
        let mut available: Vec<PredictionSet> = self
            .config
            .backends
            .iter()
            .map(|b| self.read_predictions(&b.name))
            .collect::<Result<_>>()?;
        let mut artifacts = Vec::new();
        for spec in &self.config.ensembles {
            let set = ensemble::ensemble(spec, &available)?;
            let relative = predictions_file(&spec.name);
            let path = self.out.join(&relative);
            fs::write(&path, inference::predictions_to_json(&set)).map_err(io_err(&path))?;
            artifacts.push(relative);
            available.push(set);
        }
        Ok(artifacts)
    }

    fn stage_evaluate(&mut self) -> Result<Vec<String>> {
        let systems: Vec<PredictionSet> = self
            .system_names()
            .iter()
            .map(|name| self.read_predictions(name))
            .collect::<Result<_>>()?;
        let eval = self.config.evaluation.clone();
        let (_, instances) = self.data()?;
        let control: Vec<&Instance> = instances
            .iter()
            .filter(|i| i.split == eval.control_split)
            .collect();
        let contrast: Vec<&Instance> = instances
            .iter()
            .filter(|i| i.split == eval.contrast_split)
            .collect();
        let breakdown_scope: Vec<&Instance> = if eval.breakdowns {
            control.iter().chain(contrast.iter()).copied().collect()
        } else {
            Vec::new()
        };
        let reports = systems
            .iter()
            .map(|set| {
                metrics::evaluate_system(set, &control, &contrast, &breakdown_scope, eval.robustness)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = EvaluationReport {
            robustness_definition: eval.robustness,
            systems: reports,
        };
        let path = self.out.join(REPORT_JSON);
        fs::write(&path, report.to_json()).map_err(io_err(&path))?;
        Ok(vec![REPORT_JSON.to_string()])
    }

    fn stage_report(&mut self) -> Result<Vec<String>> {
        let mut artifacts = write_report_files(&self.out, &ReportFormat::ALL)?;
        fs::create_dir_all(self.out.join("submissions")).map_err(io_err(&self.out))?;
        for name in self.system_names() {
            let set = self.read_predictions(&name)?;
            let relative = submission_file(&name);
            metrics::write_submission(&set, &self.out.join(&relative))?;
            artifacts.push(relative);
        }
        Ok(artifacts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json];

    fn file(self) -> &'static str {
        match self {
            ReportFormat::Markdown => REPORT_MD,
            ReportFormat::Csv => REPORT_CSV,
            ReportFormat::Json => REPORT_JSON,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

/// Renders `report.json` under `out` into the requested formats and
/// returns the relative paths written.
pub fn write_report_files(out: &Path, formats: &[ReportFormat]) -> Result<Vec<String>> {
    let json_path = out.join(REPORT_JSON);
    if !json_path.exists() {
        return Err(PipelineError::MissingArtifact(REPORT_JSON.to_string()));
    }
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let report = EvaluationReport::from_json(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", json_path.display())))?;
    let mut written = Vec::new();
    for format in formats {
        let content = match format {
            ReportFormat::Markdown => report.to_markdown(),
            ReportFormat::Csv => report.to_csv(),
            // Already on disk; re-serialized to normalize.
            ReportFormat::Json => report.to_json(),
        };
        let path = out.join(format.file());
        fs::write(&path, content).map_err(io_err(&path))?;
        written.push(format.file().to_string());
    }
    Ok(written)
}

/// `report` subcommand over an existing manifest.
pub fn report_from_manifest(manifest_path: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::load(manifest_path)?;
    if !manifest.stages.contains_key(&Stage::Evaluate) {
        return Err(PipelineError::MissingArtifact(REPORT_JSON.to_string()));
    }
    let out = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.output_dir.clone());
    Ok(write_report_files(&out, formats)?
        .into_iter()
        .map(|p| out.join(p))
        .collect())
}

/// Corpus statistics for the `ingest`/`stats` subcommands.
pub fn corpus_stats(config: &CorpusConfig, tokenizer: &TokenizerConfig) -> Result<CorpusStats> {
    let (corpus, instances) = load_configured_corpus(config)?;
    Ok(compute_stats(&corpus, &instances, tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
output_dir = "out"

[corpus]
ctr_dir = "ctrs"
instances = [{ path = "train.json", split = "train" }]

[prompt]
n_shots = 1
style = "cot"

[[backends]]
name = "flan"
kind = "wire_protocol"
endpoint = "http://localhost:9"
model_name = "flan-t5-large"

[[backends]]
name = "mock"
kind = "mock"
mock = { kind = "constant", text = "Yes" }

[[ensembles]]
name = "both"
members = ["flan", "mock"]
method = "hard"
tie_break = "favor_entailment"
"#;

    #[test]
    fn parses_config() {
        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.shot_plan(), ShotPlan::new(1, ExplanationStyle::CoT, 7));
        assert_eq!(config.backends[0].max_in_flight, 4);
        assert_eq!(config.evaluation.control_split, Split::TestControl);

        config.resolve_paths(Path::new("/data/run"));
        assert_eq!(config.corpus.ctr_dir, Path::new("/data/run/ctrs"));
        assert_eq!(config.output_dir, Path::new("/data/run/out"));
    }

    #[test]
    fn seed_is_mandatory() {
        let without_seed = MINIMAL.replace("seed = 7\n", "");
        assert!(RunConfig::from_toml(&without_seed).is_err());
    }

    #[test]
    fn env_overrides_endpoint() {
        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.apply_env_overrides(|key| {
            (key == "CTNLI_ENDPOINT_FLAN").then(|| "http://gpu:8000".to_string())
        });
        assert_eq!(config.backends[0].endpoint.as_deref(), Some("http://gpu:8000"));
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_unknown_ensemble_member_and_bad_plans() {
        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.ensembles[0].members[1] = "ghost".into();
        assert!(config.validate().is_err());

        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.prompt.template = TemplateId::Alt2;
        assert!(config.validate().is_err());
    }

    #[test]
    fn restricting_backends_drops_unformable_ensembles() {
        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.restrict_to_backend("mock").unwrap();
        assert_eq!(config.backends.len(), 1);
        assert!(config.ensembles.is_empty());
        assert!(config.restrict_to_backend("nope").is_err());
    }

    #[test]
    fn exit_codes() {
        let backend = PipelineError::Stage {
            stage: Stage::Infer,
            source: Box::new(PipelineError::Inference(InferenceError::Timeout(
                std::time::Duration::ZERO,
            ))),
        };
        assert_eq!(backend.exit_code(), 3);
        assert_eq!(
            PipelineError::Ensemble(EnsembleError::EmptyIntersection).exit_code(),
            1
        );
        assert_eq!(
            PipelineError::Metrics(MetricsError::MissingPrediction("x".into())).exit_code(),
            1
        );
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
    }
}
