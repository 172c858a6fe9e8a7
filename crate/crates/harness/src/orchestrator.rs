//! Two-turn phase-then-go protocol runner, transcript persistence, and replay
//! of offline prediction dumps.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use futures::stream::{self, StreamExt};
use gozone_core::dataset::{DatasetManifest, SplitSelector};
use gozone_core::metrics::{aggregate, EvalReport, MetricsError};
use gozone_core::parsing::{parse_turn1, parse_turn2};
use gozone_core::phasetool::{PhaseTool, ToolDecision, ToolMode};
use gozone_core::rewards::RewardConfig;
use gozone_core::scoring::evaluate_sample;
use gozone_core::{FrameSample, PerSampleEvaluation, SurgicalPhase};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::endpoint::{
    complete_with_retry, image_data_url, AttemptRecord, ChatBackend, ChatMessage, ChatRequest, EndpointConfig,
};

/// First-turn question. Options are listed in canonical letter order so the
/// letter-to-phase mapping never changes.
pub fn turn1_prompt() -> String {
    let mut s = String::from("Identify the current surgical phase.\n");
    for p in SurgicalPhase::ALL {
        s.push_str(&format!("{}) {}\n", p.letter(), p.display_name()));
    }
    s.push_str("Answer with the letter of the correct option.");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointMeta {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl From<&EndpointConfig> for EndpointMeta {
    fn from(c: &EndpointConfig) -> Self {
        Self {
            base_url: c.base_url.clone(),
            model_name: c.model_name.clone(),
            temperature: c.temperature,
            max_tokens: c.max_tokens,
        }
    }
}

/// Everything exchanged for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub turn1_prompt: String,
    pub turn1_raw: Option<String>,
    pub tool_record: Option<ToolDecision>,
    pub turn2_prompt: Option<String>,
    pub turn2_raw: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub endpoint_meta: EndpointMeta,
    pub attempts: Vec<AttemptRecord>,
    pub error: Option<String>,
    pub evaluation: PerSampleEvaluation,
}

/// Append-only JSONL transcript file inside a run directory.
#[derive(Debug)]
pub struct TranscriptStore {
    dir: PathBuf,
    file: Mutex<File>,
}

impl TranscriptStore {
    /// Create `<out>/<UTC timestamp>_<config hash>/transcripts.jsonl`.
    pub fn create(out: &Path, config_hash: &str) -> std::io::Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let dir = out.join(format!("{stamp}_{config_hash}"));
        Self::open(&dir)
    }

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("transcripts.jsonl"))?;
        Ok(Self { dir: dir.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write one record as a single line with one `write_all`.
    pub fn append(&self, transcript: &Transcript) -> std::io::Result<()> {
        let mut line = serde_json::to_string(transcript).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

/// Read back every transcript in a run directory.
pub fn read_transcripts(dir: &Path) -> std::io::Result<Vec<Transcript>> {
    let text = fs::read_to_string(dir.join("transcripts.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Short hex digest of any serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Shared state for a live run.
pub struct RunContext<B> {
    pub backend: B,
    pub endpoint: EndpointConfig,
    pub tool: PhaseTool,
    pub rewards: RewardConfig,
    /// Directory that relative `image_ref`s are resolved against.
    pub image_root: PathBuf,
    pub store: Option<TranscriptStore>,
}

/// Result of one sample. `failure` is set when the endpoint or image could
/// not be used, in which case the evaluation holds worst-case values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub transcript: Transcript,
    pub evaluation: PerSampleEvaluation,
    pub failure: Option<String>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run aborted: {failed} of {total} samples failed (threshold {threshold})")]
    Aborted {
        failed: usize,
        total: usize,
        threshold: f64,
        run_dir: Option<PathBuf>,
        failures: Vec<FailureRecord>,
    },
    #[error("no samples selected")]
    Empty,
    #[error("cannot write transcripts: {0}")]
    Io(#[from] std::io::Error),
}

impl From<MetricsError> for RunError {
    fn from(_: MetricsError) -> Self {
        RunError::Empty
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPolicy {
    /// Abort when the failed fraction strictly exceeds this.
    pub max_failure_rate: f64,
}

impl Default for RunPolicy {
    fn default() -> Self {
        Self { max_failure_rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// Sorted by sample id.
    pub evaluations: Vec<PerSampleEvaluation>,
    pub failures: Vec<FailureRecord>,
    pub run_dir: Option<PathBuf>,
}

fn worst_case(sample: &FrameSample) -> PerSampleEvaluation {
    PerSampleEvaluation::worst_case(sample.sample_id.clone())
}

/// Run both turns for one sample and persist the transcript before
/// returning.
pub async fn run_sample<B: ChatBackend>(
    ctx: &RunContext<B>,
    sample: &FrameSample,
    mode: ToolMode,
) -> Result<SampleOutcome, std::io::Error> {
    let started_at = crate::timestamp();
    let t1_prompt = turn1_prompt();
    let mut transcript = Transcript {
        sample_id: sample.sample_id.clone(),
        turn1_prompt: t1_prompt.clone(),
        turn1_raw: None,
        tool_record: None,
        turn2_prompt: None,
        turn2_raw: None,
        started_at,
        finished_at: String::new(),
        endpoint_meta: EndpointMeta::from(&ctx.endpoint),
        attempts: Vec::new(),
        error: None,
        evaluation: worst_case(sample),
    };

    let result = converse(ctx, sample, mode, &t1_prompt, &mut transcript).await;
    let failure = match result {
        Ok(evaluation) => {
            transcript.evaluation = evaluation;
            None
        }
        Err(message) => {
            transcript.error = Some(message.clone());
            Some(message)
        }
    };
    transcript.finished_at = crate::timestamp();
    if let Some(store) = &ctx.store {
        store.append(&transcript)?;
    }
    Ok(SampleOutcome { evaluation: transcript.evaluation.clone(), transcript, failure })
}

async fn converse<B: ChatBackend>(
    ctx: &RunContext<B>,
    sample: &FrameSample,
    mode: ToolMode,
    t1_prompt: &str,
    transcript: &mut Transcript,
) -> Result<PerSampleEvaluation, String> {
    let image = image_data_url(&sample.image_ref, &ctx.image_root).map_err(|e| e.to_string())?;
    let mut request = ChatRequest {
        model: ctx.endpoint.model_name.clone(),
        messages: vec![ChatMessage::user_with_image(&image, t1_prompt)],
        temperature: ctx.endpoint.temperature,
        max_tokens: ctx.endpoint.max_tokens,
    };
    let policy = &ctx.endpoint.retry_policy;
    let t1_raw = complete_with_retry(&ctx.backend, &request, policy, 1, &mut transcript.attempts)
        .await
        .map_err(|e| e.to_string())?;
    transcript.turn1_raw = Some(t1_raw.clone());
    let turn1 = parse_turn1(&t1_raw);

    let decision = ctx
        .tool
        .decide(turn1.predicted_phase, Some(sample.phase), mode)
        .map_err(|e| e.to_string())?;
    let t2_prompt = ctx.tool.prompt(&decision);
    transcript.tool_record = Some(decision);
    transcript.turn2_prompt = Some(t2_prompt.clone());

    request.messages.push(ChatMessage::assistant(&t1_raw));
    request.messages.push(ChatMessage::user_with_image(&image, &t2_prompt));
    let t2_raw = complete_with_retry(&ctx.backend, &request, policy, 2, &mut transcript.attempts)
        .await
        .map_err(|e| e.to_string())?;
    transcript.turn2_raw = Some(t2_raw.clone());

    Ok(evaluate_sample(sample, &turn1, &parse_turn2(&t2_raw), &ctx.rewards))
}

/// Run every selected sample with at most `max_concurrency` in flight and
/// aggregate the results.
pub async fn run_dataset<B: ChatBackend>(
    ctx: &RunContext<B>,
    manifest: &DatasetManifest,
    selector: SplitSelector,
    mode: ToolMode,
    policy: &RunPolicy,
) -> Result<RunOutcome, RunError> {
    let samples = manifest.select(selector);
    if samples.is_empty() {
        return Err(RunError::Empty);
    }
    let concurrency = ctx.endpoint.max_concurrency.max(1);
    let results: Vec<Result<SampleOutcome, std::io::Error>> = stream::iter(samples)
        .map(|s| run_sample(ctx, s, mode))
        .buffer_unordered(concurrency)
        .collect()
        .await;
    let mut outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    outcomes.sort_by(|a, b| a.evaluation.sample_id.cmp(&b.evaluation.sample_id));

    let failures: Vec<FailureRecord> = outcomes
        .iter()
        .filter_map(|o| {
            o.failure.as_ref().map(|e| FailureRecord {
                sample_id: o.evaluation.sample_id.clone(),
                error: e.clone(),
            })
        })
        .collect();
    let run_dir = ctx.store.as_ref().map(|s| s.dir().to_path_buf());
    let total = outcomes.len();
    if failures.len() as f64 / total as f64 > policy.max_failure_rate {
        return Err(RunError::Aborted {
            failed: failures.len(),
            total,
            threshold: policy.max_failure_rate,
            run_dir,
            failures,
        });
    }
    let evaluations: Vec<PerSampleEvaluation> = outcomes.into_iter().map(|o| o.evaluation).collect();
    let report = aggregate(&evaluations)?;
    Ok(RunOutcome { report, evaluations, failures, run_dir })
}

/// One line of a predictions dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub turn1_raw: String,
    pub turn2_raw: String,
}

/// Dump lines for every transcript that completed both turns, sorted by
/// sample id.
pub fn predictions_from_transcripts(transcripts: &[Transcript]) -> Vec<PredictionRecord> {
    let mut out: Vec<PredictionRecord> = transcripts
        .iter()
        .filter_map(|t| {
            Some(PredictionRecord {
                sample_id: t.sample_id.clone(),
                turn1_raw: t.turn1_raw.clone()?,
                turn2_raw: t.turn2_raw.clone()?,
            })
        })
        .collect();
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    fs::write(path, text)
}

#[derive(Debug, Error)]
pub enum OfflineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEvaluation {
    /// One entry per selected sample, sorted by sample id.
    pub evaluations: Vec<PerSampleEvaluation>,
    /// Selected samples absent from the dump, scored at worst case.
    pub missing: Vec<String>,
    /// Dump entries for samples outside the selection; ignored.
    pub skipped: Vec<String>,
}

/// Parse a predictions dump and score every selected sample.
///
/// Sample ids that are not in the manifest at all, and duplicate ids, are
/// errors. Selected samples with no line are scored at worst case.
pub fn load_offline_predictions(
    path: &Path,
    manifest: &DatasetManifest,
    selector: SplitSelector,
    rewards: &RewardConfig,
) -> Result<OfflineEvaluation, OfflineError> {
    let file = File::open(path).map_err(|source| OfflineError::Io { path: path.to_path_buf(), source })?;
    let mut records = std::collections::BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| OfflineError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| OfflineError::Parse { line: line_no, message: e.to_string() })?;
        if manifest.sample(&rec.sample_id).is_none() {
            return Err(OfflineError::Parse {
                line: line_no,
                message: format!("unknown sample_id {:?}", rec.sample_id),
            });
        }
        if records.contains_key(&rec.sample_id) {
            return Err(OfflineError::Parse {
                line: line_no,
                message: format!("duplicate sample_id {:?}", rec.sample_id),
            });
        }
        records.insert(rec.sample_id.clone(), rec);
    }

    let selected = manifest.select(selector);
    let selected_ids: BTreeSet<&str> = selected.iter().map(|s| s.sample_id.as_str()).collect();
    let skipped: Vec<String> = records
        .keys()
        .filter(|id| !selected_ids.contains(id.as_str()))
        .cloned()
        .collect();
    if !skipped.is_empty() {
        tracing::warn!(count = skipped.len(), "dump entries outside the selected split were ignored");
    }

    let mut missing = Vec::new();
    let mut evaluations = Vec::with_capacity(selected.len());
    for sample in selected {
        match records.get(&sample.sample_id) {
            Some(rec) => evaluations.push(evaluate_sample(
                sample,
                &parse_turn1(&rec.turn1_raw),
                &parse_turn2(&rec.turn2_raw),
                rewards,
            )),
            None => {
                missing.push(sample.sample_id.clone());
                evaluations.push(worst_case(sample));
            }
        }
    }
    if !missing.is_empty() {
        tracing::warn!(
            count = missing.len(),
            first = %missing[0],
            "samples missing from the dump were scored at worst case"
        );
    }
    evaluations.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(OfflineEvaluation { evaluations, missing, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turn1_prompt_lists_options_in_order() {
        let p = turn1_prompt();
        assert!(p.starts_with("Identify the current surgical phase.\nA) Preparation of the Go Zone\n"));
        assert!(p.contains("\nD) Gallbladder Dissection from Liver Bed\n"));
        let letters: Vec<usize> = ["A)", "B)", "C)", "D)"].iter().map(|l| p.find(l).unwrap()).collect();
        assert!(letters.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_hash_is_stable() {
        let c = EndpointConfig::default();
        assert_eq!(config_hash(&c), config_hash(&c.clone()));
        assert_eq!(config_hash(&c).len(), 12);
        let mut d = c.clone();
        d.model_name = "other".into();
        assert_ne!(config_hash(&c), config_hash(&d));
    }
}
