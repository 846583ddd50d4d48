//! Backends, answer parsing, and prediction sets.
//!
//! A [`PredictionSet`] is the common currency between inference, voting and
//! scoring. It comes either from [`run_backend`] (generated text parsed into
//! labels) or from [`import_predictions`] (labels and scores produced
//! elsewhere, e.g. fine-tuned classifiers).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Label;
use crate::ensemble::EnsembleProvenance;
use crate::prompt::{AnswerVocabulary, RenderedPrompt};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend returned status {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("{path}:{line}: malformed prediction: {reason}")]
    MalformedPrediction {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("prediction for unknown instance {0}")]
    UnknownInstanceId(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl InferenceError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            InferenceError::BackendUnreachable(_) | InferenceError::Timeout(_) => true,
            InferenceError::BackendError { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

// Answer parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    Parsed,
    Fallback,
}

fn is_edge_noise(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”' | '«' | '»')
}

fn normalize(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let mut text = lowered.trim_matches(is_edge_noise);
    if let Some(rest) = text.strip_prefix("answer") {
        let rest = rest.trim_start();
        if let Some(rest) = rest.strip_prefix(':') {
            text = rest;
        }
    }
    text.trim_matches(is_edge_noise).to_string()
}

fn match_token(token: &str, vocabulary: AnswerVocabulary) -> Option<Label> {
    match vocabulary {
        AnswerVocabulary::YesNo => match token {
            "yes" => Some(Label::Entailment),
            "no" => Some(Label::Contradiction),
            _ => None,
        },
        AnswerVocabulary::EntailContradict => {
            if token.starts_with("entail") {
                Some(Label::Entailment)
            } else if token.starts_with("contradict") {
                Some(Label::Contradiction)
            } else {
                None
            }
        }
    }
}

/// Maps generated text to a label. Never fails: text without a recognisable
/// answer word yields `(fallback, Fallback)`.
pub fn parse_answer(raw: &str, vocabulary: AnswerVocabulary, fallback: Label) -> (Label, ParseStatus) {
    let normalized = normalize(raw);
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|t| match_token(t, vocabulary))
        .map(|label| (label, ParseStatus::Parsed))
        .unwrap_or((fallback, ParseStatus::Fallback))
}

// Predictions

/// Per-label scores, e.g. class probabilities of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "Entailment")]
    pub entailment: f64,
    #[serde(rename = "Contradiction")]
    pub contradiction: f64,
}

impl Scores {
    pub fn new(entailment: f64, contradiction: f64) -> Self {
        Scores {
            entailment,
            contradiction,
        }
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Entailment => self.entailment,
            Label::Contradiction => self.contradiction,
        }
    }

    pub fn one_hot(label: Label) -> Self {
        match label {
            Label::Entailment => Scores::new(1.0, 0.0),
            Label::Contradiction => Scores::new(0.0, 1.0),
        }
    }

    fn in_unit_range(&self) -> bool {
        [self.entailment, self.contradiction]
            .iter()
            .all(|s| s.is_finite() && (0.0..=1.0).contains(s))
    }

    /// Higher-scoring label; exact ties go to Contradiction.
    pub fn argmax(&self) -> Label {
        if self.entailment > self.contradiction {
            Label::Entailment
        } else {
            Label::Contradiction
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instance_id: String,
    pub label: Label,
    pub scores: Option<Scores>,
    pub raw_output: Option<String>,
    pub parse_status: ParseStatus,
}

impl Prediction {
    pub fn label_only(instance_id: impl Into<String>, label: Label) -> Self {
        Prediction {
            instance_id: instance_id.into(),
            label,
            scores: None,
            raw_output: None,
            parse_status: ParseStatus::Parsed,
        }
    }

    pub fn with_scores(instance_id: impl Into<String>, scores: Scores) -> Self {
        Prediction {
            instance_id: instance_id.into(),
            label: scores.argmax(),
            scores: Some(scores),
            raw_output: None,
            parse_status: ParseStatus::Parsed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportFormat {
    PredictionsJson,
    ScoresCsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    WireProtocol,
    Mock,
    FileImport,
}

/// Where a prediction set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Backend {
        kind: BackendKind,
        model_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        endpoint: Option<String>,
        max_new_tokens: u32,
        temperature: f64,
        fallback_label: Label,
    },
    Import {
        path: String,
        format: ImportFormat,
    },
    Ensemble(EnsembleProvenance),
    Unspecified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub system_name: String,
    pub provenance: Provenance,
    pub predictions: BTreeMap<String, Prediction>,
}

impl PredictionSet {
    pub fn new(system_name: impl Into<String>, provenance: Provenance) -> Self {
        PredictionSet {
            system_name: system_name.into(),
            provenance,
            predictions: BTreeMap::new(),
        }
    }

    /// Builds a set from predictions; a repeated instance id keeps the last.
    pub fn from_predictions(
        system_name: impl Into<String>,
        provenance: Provenance,
        predictions: impl IntoIterator<Item = Prediction>,
    ) -> Self {
        PredictionSet {
            system_name: system_name.into(),
            provenance,
            predictions: predictions
                .into_iter()
                .map(|p| (p.instance_id.clone(), p))
                .collect(),
        }
    }

    pub fn get(&self, instance_id: &str) -> Option<&Prediction> {
        self.predictions.get(instance_id)
    }

    pub fn label(&self, instance_id: &str) -> Option<Label> {
        self.get(instance_id).map(|p| p.label)
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.predictions
            .values()
            .filter(|p| p.parse_status == ParseStatus::Fallback)
            .count()
    }

    /// Errors on the first prediction whose id is not in `known`.
    pub fn validate_ids<'a>(&self, known: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let known: HashSet<&str> = known.into_iter().collect();
        match self.predictions.keys().find(|id| !known.contains(id.as_str())) {
            Some(id) => Err(InferenceError::UnknownInstanceId(id.clone())),
            None => Ok(()),
        }
    }
}

// PredictionsJson wire format

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_output: Option<String>,
    #[serde(default = "parsed", skip_serializing_if = "is_parsed")]
    parse_status: ParseStatus,
}

fn parsed() -> ParseStatus {
    ParseStatus::Parsed
}

fn is_parsed(status: &ParseStatus) -> bool {
    *status == ParseStatus::Parsed
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionsFile {
    system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    predictions: BTreeMap<String, PredictionRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InferenceError + '_ {
    move |source| InferenceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> InferenceError {
    InferenceError::MalformedPrediction {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Serializes a set in the PredictionsJson format (pretty, key-sorted).
pub fn predictions_to_json(set: &PredictionSet) -> String {
    let file = PredictionsFile {
        system: set.system_name.clone(),
        provenance: match set.provenance {
            Provenance::Unspecified => None,
            ref p => Some(p.clone()),
        },
        predictions: set
            .predictions
            .iter()
            .map(|(id, p)| {
                (
                    id.clone(),
                    PredictionRecord {
                        label: p.label,
                        scores: p.scores,
                        raw_output: p.raw_output.clone(),
                        parse_status: p.parse_status,
                    },
                )
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("prediction set serializes");
    text.push('\n');
    text
}

pub fn export_predictions(set: &PredictionSet, path: &Path, format: ImportFormat) -> Result<()> {
    let text = match format {
        ImportFormat::PredictionsJson => predictions_to_json(set),
        ImportFormat::ScoresCsv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer
                .write_record(["instance_id", "score_entailment", "score_contradiction"])
                .expect("in-memory csv");
            for (id, p) in &set.predictions {
                let scores = p.scores.ok_or_else(|| {
                    InferenceError::Config(format!(
                        "cannot export {id} as scores CSV: prediction has no scores"
                    ))
                })?;
                writer
                    .write_record([
                        id.clone(),
                        scores.entailment.to_string(),
                        scores.contradiction.to_string(),
                    ])
                    .expect("in-memory csv");
            }
            String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf8 csv")
        }
    };
    fs::write(path, text).map_err(io_err(path))
}

fn predictions_from_json(path: &Path, text: &str) -> Result<PredictionSet> {
    let file: PredictionsFile = serde_json::from_str(text)
        .map_err(|e| malformed(path, e.line(), e.to_string()))?;
    let mut predictions = BTreeMap::new();
    for (id, rec) in file.predictions {
        if let Some(scores) = &rec.scores {
            if !scores.in_unit_range() {
                return Err(malformed(
                    path,
                    0,
                    format!("{id}: scores must lie in [0, 1]"),
                ));
            }
        }
        if rec.parse_status == ParseStatus::Fallback && rec.raw_output.is_none() {
            return Err(malformed(
                path,
                0,
                format!("{id}: fallback prediction without raw_output"),
            ));
        }
        predictions.insert(
            id.clone(),
            Prediction {
                instance_id: id,
                label: rec.label,
                scores: rec.scores,
                raw_output: rec.raw_output,
                parse_status: rec.parse_status,
            },
        );
    }
    Ok(PredictionSet {
        system_name: file.system,
        provenance: file.provenance.unwrap_or(Provenance::Import {
            path: path.display().to_string(),
            format: ImportFormat::PredictionsJson,
        }),
        predictions,
    })
}

fn predictions_from_csv(path: &Path, text: &str) -> Result<PredictionSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| malformed(path, 1, e.to_string()))?
        .clone();
    let expected = ["instance_id", "score_entailment", "score_contradiction"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(malformed(
            path,
            1,
            format!("header must be {}", expected.join(",")),
        ));
    }

    let mut predictions = BTreeMap::new();
    for (n, row) in reader.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| malformed(path, line, e.to_string()))?;
        let id = row[0].to_string();
        let score = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|e| malformed(path, line, format!("{:?}: {e}", &row[i])))
        };
        let scores = Scores::new(score(1)?, score(2)?);
        if !scores.in_unit_range() {
            return Err(malformed(path, line, "scores must lie in [0, 1]"));
        }
        if id.is_empty() {
            return Err(malformed(path, line, "empty instance_id"));
        }
        if predictions.contains_key(&id) {
            return Err(malformed(path, line, format!("duplicate instance_id {id}")));
        }
        predictions.insert(id.clone(), Prediction::with_scores(id, scores));
    }
    let system = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("imported")
        .to_string();
    Ok(PredictionSet {
        system_name: system,
        provenance: Provenance::Import {
            path: path.display().to_string(),
            format: ImportFormat::ScoresCsv,
        },
        predictions,
    })
}

pub fn import_predictions(path: &Path, format: ImportFormat) -> Result<PredictionSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match format {
        ImportFormat::PredictionsJson => predictions_from_json(path, &text),
        ImportFormat::ScoresCsv => predictions_from_csv(path, &text),
    }
}

// Backends

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Responses of the in-process mock backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockScript {
    /// The same text for every prompt.
    Constant { text: String },
    /// A yes/no answer derived from a hash of the prompt text. Prompts that
    /// ask for 'contradiction' or 'entailment' get those words instead.
    PromptHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_fallback")]
    pub fallback_label: Label,
    #[serde(default)]
    pub mock: Option<MockScript>,
    #[serde(default)]
    pub import_path: Option<PathBuf>,
    #[serde(default)]
    pub import_format: Option<ImportFormat>,
}

fn default_model() -> String {
    "mock".into()
}
fn default_max_new_tokens() -> u32 {
    16
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_in_flight() -> usize {
    4
}
fn default_fallback() -> Label {
    Label::Contradiction
}

impl BackendConfig {
    pub fn mock(name: impl Into<String>, script: MockScript) -> Self {
        BackendConfig {
            name: name.into(),
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: default_model(),
            max_new_tokens: default_max_new_tokens(),
            temperature: 0.0,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
            fallback_label: default_fallback(),
            mock: Some(script),
            import_path: None,
            import_format: None,
        }
    }

    pub fn wire(name: impl Into<String>, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::WireProtocol,
            endpoint: Some(endpoint.into()),
            model_name: model.into(),
            mock: None,
            ..BackendConfig::mock(name, MockScript::PromptHash)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(InferenceError::Config(format!("{}: {msg}", self.name)));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail(format!("temperature must be >= 0 (got {})", self.temperature));
        }
        if self.max_in_flight < 1 {
            return fail("max_in_flight must be >= 1".into());
        }
        if (self.kind == BackendKind::WireProtocol) != self.endpoint.is_some() {
            return fail("endpoint is required for, and only for, wire_protocol backends".into());
        }
        if (self.kind == BackendKind::FileImport) != self.import_path.is_some() {
            return fail("import_path is required for, and only for, file_import backends".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::Backend {
            kind: self.kind,
            model_name: self.model_name.clone(),
            endpoint: self.endpoint.clone(),
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            fallback_label: self.fallback_label,
        }
    }
}

/// Anything that turns a completion request into generated text.
pub trait CompletionBackend: Send + Sync {
    fn complete(
        &self,
        request: &CompletionRequest,
    ) -> impl Future<Output = Result<String>> + Send;

    /// Requests issued so far (cache hits never reach the backend).
    fn requests_sent(&self) -> usize;
}

/// Client for `POST /v1/complete`.
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    requests: AtomicUsize,
}

impl HttpBackend {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| InferenceError::Config(e.to_string()))?;
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/v1/complete") {
            base.to_string()
        } else {
            format!("{base}/v1/complete")
        };
        Ok(HttpBackend {
            client,
            url,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl CompletionBackend for HttpBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let response = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    InferenceError::Timeout(Duration::ZERO)
                } else {
                    InferenceError::BackendUnreachable(e.to_string())
                }
            })?;
        let status = response.status();
        let body = response.text().await.map_err(|e| {
            if e.is_timeout() {
                InferenceError::Timeout(Duration::ZERO)
            } else {
                InferenceError::BackendUnreachable(e.to_string())
            }
        })?;
        if !status.is_success() {
            let body = serde_json::from_str::<ErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or(body);
            return Err(InferenceError::BackendError {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str::<CompletionResponse>(&body)
            .map(|r| r.text)
            .map_err(|e| InferenceError::BackendError {
                status: status.as_u16(),
                body: format!("invalid completion body ({e}): {body}"),
            })
    }

    fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

type ScriptFn = dyn Fn(&CompletionRequest) -> Result<String> + Send + Sync;

/// In-process scripted backend.
#[derive(Clone)]
pub struct MockBackend {
    script: Arc<ScriptFn>,
    requests: Arc<AtomicUsize>,
}

impl MockBackend {
    pub fn from_script(script: &MockScript) -> Self {
        match script.clone() {
            MockScript::Constant { text } => MockBackend::from_fn(move |_| Ok(text.clone())),
            MockScript::PromptHash => MockBackend::from_fn(|req| Ok(hashed_answer(&req.prompt))),
        }
    }

    pub fn from_fn(f: impl Fn(&CompletionRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        MockBackend {
            script: Arc::new(f),
            requests: Arc::new(AtomicUsize::new(0)),
        }
    }
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("requests", &self.requests_sent())
            .finish()
    }
}

fn hashed_answer(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    let entail = digest[0] & 1 == 1;
    if prompt.contains("'contradiction' or 'entailment'") {
        if entail { "entailment" } else { "contradiction" }.to_string()
    } else {
        if entail { "Yes" } else { "No" }.to_string()
    }
}

impl CompletionBackend for MockBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        (self.script)(request)
    }

    fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Generated text keyed by a hash of (backend, model, decoding parameters,
/// prompt). The backend name keeps differently scripted or deployed
/// backends that report the same model apart.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<BTreeMap<String, String>>,
}

impl ResponseCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(backend: &str, request: &CompletionRequest) -> String {
        let mut hasher = Sha256::new();
        for part in [
            backend,
            request.model.as_str(),
            &request.max_new_tokens.to_string(),
            &request.temperature.to_string(),
            request.prompt.as_str(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn get(&self, backend: &str, request: &CompletionRequest) -> Option<String> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&Self::key(backend, request))
            .cloned()
    }

    pub fn insert(&self, backend: &str, request: &CompletionRequest, text: String) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert(Self::key(backend, request), text);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads a cache file; a missing file yields an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let entries: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| malformed(path, e.line(), e.to_string()))?;
        Ok(ResponseCache {
            entries: Mutex::new(entries),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = {
            let entries = self.entries.lock().expect("cache lock");
            serde_json::to_string_pretty(&*entries).expect("cache serializes")
        };
        fs::write(path, text).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub prompts: usize,
    pub cache_hits: usize,
    pub requests: usize,
    pub retries: usize,
    pub fallbacks: usize,
}

async fn complete_with_retry<B: CompletionBackend>(
    backend: &B,
    request: &CompletionRequest,
    config: &BackendConfig,
    retries: &AtomicUsize,
) -> Result<String> {
    let mut attempt = 0u32;
    loop {
        let outcome = match tokio::time::timeout(config.timeout(), backend.complete(request)).await {
            Ok(Err(InferenceError::Timeout(_))) | Err(_) => Err(InferenceError::Timeout(config.timeout())),
            Ok(other) => other,
        };
        match outcome {
            Err(e) if e.is_retryable() && attempt < config.max_retries => {
                let delay = config
                    .backoff_base_ms
                    .saturating_mul(1u64 << attempt.min(16))
                    .min(30_000);
                log::warn!(
                    "{}: attempt {} failed ({e}); retrying in {delay} ms",
                    config.name,
                    attempt + 1
                );
                retries.fetch_add(1, Ordering::SeqCst);
                tokio::time::sleep(Duration::from_millis(delay)).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Sends every prompt to `backend` (at most `max_in_flight` at once),
/// parses the answers, and assembles a prediction set named after the
/// config. Cached responses are reused and new ones recorded.
pub async fn run_backend<B: CompletionBackend>(
    prompts: &[RenderedPrompt],
    config: &BackendConfig,
    backend: &B,
    cache: &ResponseCache,
) -> Result<(PredictionSet, RunStats)> {
    config.validate()?;
    if config.temperature > 0.0 {
        log::warn!(
            "{}: sampling at temperature {}; outputs are not reproducible across cache resets",
            config.name,
            config.temperature
        );
    }
    let hits = AtomicUsize::new(0);
    let retries = AtomicUsize::new(0);
    let before = backend.requests_sent();

    let predictions: Vec<Prediction> = stream::iter(prompts)
        .map(|prompt| {
            let hits = &hits;
            let retries = &retries;
            async move {
                let request = CompletionRequest {
                    model: config.model_name.clone(),
                    prompt: prompt.text.clone(),
                    max_new_tokens: config.max_new_tokens,
                    temperature: config.temperature,
                };
                let text = match cache.get(&config.name, &request) {
                    Some(text) => {
                        hits.fetch_add(1, Ordering::SeqCst);
                        text
                    }
                    None => {
                        let text = complete_with_retry(backend, &request, config, retries).await?;
                        cache.insert(&config.name, &request, text.clone());
                        text
                    }
                };
                let vocabulary = prompt.recipe.template_id.vocabulary();
                let (label, parse_status) = parse_answer(&text, vocabulary, config.fallback_label);
                Ok::<_, InferenceError>(Prediction {
                    instance_id: prompt.instance_id.clone(),
                    label,
                    scores: None,
                    raw_output: Some(text),
                    parse_status,
                })
            }
        })
        .buffer_unordered(config.max_in_flight)
        .try_collect()
        .await?;

    let set = PredictionSet::from_predictions(config.name.clone(), config.provenance(), predictions);
    let stats = RunStats {
        prompts: prompts.len(),
        cache_hits: hits.load(Ordering::SeqCst),
        requests: backend.requests_sent() - before,
        retries: retries.load(Ordering::SeqCst),
        fallbacks: set.fallback_count(),
    };
    Ok((set, stats))
}
