//! Chat-completion access to classifier and expert models.
//!
//! Remote endpoints speak the OpenAI-compatible chat-completions shape;
//! deterministic mocks stand in for them under test. Long runs append
//! every completion to a line-delimited checkpoint, fsync'd per line, so
//! interrupted runs resume without repeating work.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub prompt: String,
    /// Work-item identity (the question id); scripted mocks key on it.
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> ChatRequest {
        ChatRequest {
            prompt: prompt.into(),
            tag: None,
        }
    }

    pub fn tagged(prompt: impl Into<String>, tag: impl Into<String>) -> ChatRequest {
        ChatRequest {
            prompt: prompt.into(),
            tag: Some(tag.into()),
        }
    }
}

pub trait ChatModel: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

/// One model endpoint. API keys are referenced by environment variable
/// name and never stored in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    #[serde(flatten)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_max_tokens() -> u32 {
    2048
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    Remote {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
    /// Always returns the same text.
    MockFixed { text: String },
    /// Returns the scripted text for the request tag.
    MockScript {
        responses: HashMap<String, String>,
        #[serde(default)]
        default: Option<String>,
    },
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "endpoint `{}`: temperature must be >= 0",
                self.name
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn ChatModel>> {
        self.validate()?;
        match &self.provider {
            ProviderConfig::Remote {
                base_url,
                model,
                api_key_env,
            } => Ok(Box::new(RemoteChat::new(
                self.name.clone(),
                base_url,
                model,
                api_key_env.as_deref(),
                self.temperature,
                self.max_tokens,
                Duration::from_secs(self.timeout_secs),
                self.max_retries,
                self.backoff_ms,
            )?)),
            ProviderConfig::MockFixed { text } => {
                Ok(Box::new(FixedChat::new(self.name.clone(), text.clone())))
            }
            ProviderConfig::MockScript { responses, default } => Ok(Box::new(ScriptedChat::new(
                self.name.clone(),
                responses.clone(),
                default.clone(),
            ))),
        }
    }
}

/// Runs `f` with exponential backoff, retrying transport errors up to
/// `max_retries` times. Content-filter rejections never retry.
pub fn with_retries<T>(
    max_retries: u32,
    backoff_ms: u64,
    f: impl Fn() -> Result<T>,
) -> Result<T> {
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        match f() {
            Ok(v) => return Ok(v),
            Err(Error::Transport { message, .. }) => {
                if attempts > max_retries {
                    return Err(Error::Transport { attempts, message });
                }
                std::thread::sleep(Duration::from_millis(backoff_ms << (attempts - 1).min(6)));
            }
            Err(e) => return Err(e),
        }
    }
}

pub struct RemoteChat {
    name: String,
    base_url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
    max_retries: u32,
    backoff_ms: u64,
    client: reqwest::blocking::Client,
}

impl RemoteChat {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        base_url: &str,
        model: &str,
        api_key_env: Option<&str>,
        temperature: f64,
        max_tokens: u32,
        timeout: Duration,
        max_retries: u32,
        backoff_ms: u64,
    ) -> Result<RemoteChat> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("api key environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        Ok(RemoteChat {
            name,
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            temperature,
            max_tokens,
            max_retries,
            backoff_ms,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        })
    }

    fn request_once(&self, req: &ChatRequest) -> Result<String> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut request = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let resp = request.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("{status} from {url}"),
            });
        }
        if !status.is_success() {
            if text.contains("content_filter") || text.contains("content management policy") {
                return Err(Error::ContentFilter(format!("{status} from {url}")));
            }
            return Err(Error::Config(format!("{status} from {url}: {text}")));
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("malformed response body: {e}"),
        })?;
        if parsed["choices"][0]["finish_reason"] == "content_filter" {
            return Err(Error::ContentFilter(format!("response from {url}")));
        }
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: "response carried no message content".into(),
            })
    }
}

impl ChatModel for RemoteChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        with_retries(self.max_retries, self.backoff_ms, || self.request_once(req))
    }
}

/// Mock model that always answers with the same text.
pub struct FixedChat {
    name: String,
    text: String,
}

impl FixedChat {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> FixedChat {
        FixedChat {
            name: name.into(),
            text: text.into(),
        }
    }
}

impl ChatModel for FixedChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, _req: &ChatRequest) -> Result<String> {
        Ok(self.text.clone())
    }
}

/// Mock model with a per-tag response table.
pub struct ScriptedChat {
    name: String,
    responses: HashMap<String, String>,
    default: Option<String>,
}

impl ScriptedChat {
    pub fn new(
        name: impl Into<String>,
        responses: HashMap<String, String>,
        default: Option<String>,
    ) -> ScriptedChat {
        ScriptedChat {
            name: name.into(),
            responses,
            default,
        }
    }
}

impl ChatModel for ScriptedChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let tag = req.tag.as_deref().unwrap_or("");
        if let Some(text) = self.responses.get(tag) {
            return Ok(text.clone());
        }
        self.default.clone().ok_or_else(|| {
            Error::Config(format!(
                "scripted model `{}` has no response for tag `{tag}`",
                self.name
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classify,
    Answer,
}

/// One durably recorded completion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub question_id: String,
    pub stage: Stage,
    pub raw: String,
    pub parsed: Value,
    pub timestamp: String,
}

/// Append-only, line-delimited completion log. Each append is flushed
/// and fsync'd before the runner moves on, so a crash loses at most the
/// in-flight item.
pub struct Checkpoint {
    path: PathBuf,
    completed: Mutex<HashMap<(String, Stage), CheckpointRecord>>,
    writer: Mutex<std::fs::File>,
}

impl Checkpoint {
    pub fn open(path: &Path) -> Result<Checkpoint> {
        let mut completed = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(path)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CheckpointRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Checkpoint {
                        line: i + 1,
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                completed.insert((rec.question_id.clone(), rec.stage), rec);
            }
        }
        let writer = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Checkpoint {
            path: path.to_path_buf(),
            completed: Mutex::new(completed),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, question_id: &str, stage: Stage) -> Option<CheckpointRecord> {
        self.completed
            .lock()
            .unwrap()
            .get(&(question_id.to_string(), stage))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.completed.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&self, rec: CheckpointRecord) -> Result<()> {
        let line = serde_json::to_string(&rec)?;
        {
            let mut w = self.writer.lock().unwrap();
            writeln!(w, "{line}")?;
            w.flush()?;
            w.sync_data()?;
        }
        self.completed
            .lock()
            .unwrap()
            .insert((rec.question_id.clone(), rec.stage), rec);
        Ok(())
    }

    /// Returns the recorded completion for (question, stage), running
    /// and durably appending it first if absent.
    pub fn complete_or_skip(
        &self,
        question_id: &str,
        stage: Stage,
        run: impl FnOnce() -> Result<(String, Value)>,
    ) -> Result<CheckpointRecord> {
        if let Some(rec) = self.get(question_id, stage) {
            return Ok(rec);
        }
        let (raw, parsed) = run()?;
        let rec = CheckpointRecord {
            question_id: question_id.to_string(),
            stage,
            raw,
            parsed,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        self.append(rec.clone())?;
        Ok(rec)
    }
}

/// Runs `f` over `items` with at most `parallelism` worker threads,
/// preserving item order in the results.
pub fn run_parallel<I, R, F>(items: &[I], parallelism: usize, f: F) -> Result<Vec<R>>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> Result<R> + Sync,
{
    let parallelism = parallelism.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker completed every claimed item"))
        .collect()
}

/// A single-stage unit of work: one prompt for one question.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub question_id: String,
    pub prompt: String,
}

/// Completes every item not already in the checkpoint, with bounded
/// parallelism, returning records in item order. Already-checkpointed
/// items cost no provider calls.
pub fn run_with_checkpoint(
    model: &dyn ChatModel,
    items: &[WorkItem],
    stage: Stage,
    ckpt: &Checkpoint,
    parallelism: usize,
    parse: impl Fn(&str) -> Value + Sync,
) -> Result<Vec<CheckpointRecord>> {
    {
        let mut ids = HashSet::new();
        for item in items {
            if !ids.insert(item.question_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate work item `{}`",
                    item.question_id
                )));
            }
        }
    }
    run_parallel(items, parallelism, |item| {
        ckpt.complete_or_skip(&item.question_id, stage, || {
            let raw = model.complete(&ChatRequest::tagged(&item.prompt, &item.question_id))?;
            let parsed = parse(&raw);
            Ok((raw, parsed))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn fixed_chat_always_returns_its_text() {
        let m = FixedChat::new("m", "The answer is: (A)");
        let got = m.complete(&ChatRequest::new("anything")).unwrap();
        assert_eq!(got, "The answer is: (A)");
        assert_eq!(m.name(), "m");
    }

    #[test]
    fn scripted_chat_keys_on_request_tag() {
        let responses: HashMap<String, String> = (0..100)
            .map(|i| (format!("q{i}"), format!("reply {i}")))
            .collect();
        let m = ScriptedChat::new("s", responses, None);
        for i in [0usize, 17, 99] {
            let got = m
                .complete(&ChatRequest::tagged("prompt", format!("q{i}")))
                .unwrap();
            assert_eq!(got, format!("reply {i}"));
        }
    }

    #[test]
    fn scripted_chat_missing_tag_without_default_is_config_error() {
        let m = ScriptedChat::new("s", HashMap::new(), None);
        let err = m.complete(&ChatRequest::tagged("p", "absent")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scripted_chat_missing_tag_falls_back_to_default() {
        let m = ScriptedChat::new("s", HashMap::new(), Some("fallback".into()));
        let got = m.complete(&ChatRequest::tagged("p", "absent")).unwrap();
        assert_eq!(got, "fallback");
    }

    #[test]
    fn retries_exhaust_and_report_attempt_count() {
        let calls = AtomicUsize::new(0);
        let err = with_retries(3, 1, || -> Result<()> {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(Error::Transport {
                attempts: 1,
                message: "503".into(),
            })
        })
        .unwrap_err();
        // Initial attempt plus three retries.
        assert_eq!(calls.load(Ordering::SeqCst), 4);
        match err {
            Error::Transport { attempts, .. } => assert_eq!(attempts, 4),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn retries_recover_after_transient_failures() {
        let calls = AtomicUsize::new(0);
        let got = with_retries(3, 1, || -> Result<&str> {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(Error::Transport {
                    attempts: 1,
                    message: "timeout".into(),
                })
            } else {
                Ok("done")
            }
        })
        .unwrap();
        assert_eq!(got, "done");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn non_transport_errors_never_retry() {
        let calls = AtomicUsize::new(0);
        let err = with_retries(5, 1, || -> Result<()> {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(Error::ContentFilter("blocked".into()))
        })
        .unwrap_err();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert!(matches!(err, Error::ContentFilter(_)));
    }

    #[test]
    fn endpoint_config_json_round_trip_and_defaults() {
        let json = r#"{"name":"clf","kind":"mock-fixed","text":"hi"}"#;
        let cfg: EndpointConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.name, "clf");
        assert_eq!(cfg.max_tokens, 2048);
        assert_eq!(cfg.timeout_secs, 60);
        assert_eq!(cfg.max_retries, 3);
        assert_eq!(cfg.backoff_ms, 500);
        let model = cfg.build().unwrap();
        assert_eq!(model.complete(&ChatRequest::new("x")).unwrap(), "hi");
        let back: EndpointConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.name, cfg.name);
    }

    #[test]
    fn remote_endpoint_with_unset_key_env_is_config_error() {
        let cfg = EndpointConfig {
            name: "r".into(),
            provider: ProviderConfig::Remote {
                base_url: "http://localhost:9".into(),
                model: "m".into(),
                api_key_env: Some("OPSROUTE_TEST_KEY_THAT_IS_UNSET".into()),
            },
            temperature: 0.0,
            max_tokens: 16,
            timeout_secs: 1,
            max_retries: 0,
            backoff_ms: 1,
        };
        match cfg.build() {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error"),
        }
    }

    fn items(n: usize) -> Vec<WorkItem> {
        (0..n)
            .map(|i| WorkItem {
                question_id: format!("q{i}"),
                prompt: format!("prompt {i}"),
            })
            .collect()
    }

    #[test]
    fn run_parallel_preserves_item_order() {
        let input: Vec<usize> = (0..50).collect();
        let out = run_parallel(&input, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
    }

    struct CountingChat {
        calls: AtomicUsize,
    }

    impl ChatModel for CountingChat {
        fn name(&self) -> &str {
            "counting"
        }
        fn complete(&self, req: &ChatRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(format!("echo:{}", req.tag.as_deref().unwrap_or("")))
        }
    }

    #[test]
    fn checkpoint_records_fresh_run_and_skips_on_resume() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.ckpt");
        let work = items(8);
        let model = CountingChat {
            calls: AtomicUsize::new(0),
        };

        let ckpt = Checkpoint::open(&path).unwrap();
        let recs = run_with_checkpoint(&model, &work, Stage::Answer, &ckpt, 2, |raw| {
            serde_json::json!({ "raw_len": raw.len() })
        })
        .unwrap();
        assert_eq!(recs.len(), 8);
        assert_eq!(model.calls.load(Ordering::SeqCst), 8);
        assert_eq!(recs[3].question_id, "q3");
        assert_eq!(recs[3].raw, "echo:q3");

        // Reopening replays the log; no further model calls happen.
        let ckpt2 = Checkpoint::open(&path).unwrap();
        assert_eq!(ckpt2.len(), 8);
        let again = run_with_checkpoint(&model, &work, Stage::Answer, &ckpt2, 2, |raw| {
            serde_json::json!({ "raw_len": raw.len() })
        })
        .unwrap();
        assert_eq!(model.calls.load(Ordering::SeqCst), 8);
        for (a, b) in recs.iter().zip(&again) {
            assert_eq!(a.raw, b.raw);
            assert_eq!(a.timestamp, b.timestamp);
        }
    }

    #[test]
    fn checkpoint_partial_resume_only_completes_the_remainder() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.ckpt");
        let work = items(6);
        let model = CountingChat {
            calls: AtomicUsize::new(0),
        };
        {
            let ckpt = Checkpoint::open(&path).unwrap();
            run_with_checkpoint(&model, &work[..4], Stage::Answer, &ckpt, 1, |_| {
                serde_json::json!(null)
            })
            .unwrap();
        }
        assert_eq!(model.calls.load(Ordering::SeqCst), 4);
        let ckpt = Checkpoint::open(&path).unwrap();
        let recs = run_with_checkpoint(&model, &work, Stage::Answer, &ckpt, 1, |_| {
            serde_json::json!(null)
        })
        .unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(model.calls.load(Ordering::SeqCst), 6);
    }

    #[test]
    fn checkpoint_keys_on_stage_as_well_as_id() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.ckpt");
        let ckpt = Checkpoint::open(&path).unwrap();
        ckpt.complete_or_skip("q0", Stage::Classify, || {
            Ok(("classified".into(), serde_json::json!(null)))
        })
        .unwrap();
        assert!(ckpt.get("q0", Stage::Classify).is_some());
        assert!(ckpt.get("q0", Stage::Answer).is_none());
        ckpt.complete_or_skip("q0", Stage::Answer, || {
            Ok(("answered".into(), serde_json::json!(null)))
        })
        .unwrap();
        assert_eq!(ckpt.get("q0", Stage::Answer).unwrap().raw, "answered");
        assert_eq!(ckpt.get("q0", Stage::Classify).unwrap().raw, "classified");
    }

    #[test]
    fn corrupt_checkpoint_line_errors_with_its_line_number() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.ckpt");
        {
            let ckpt = Checkpoint::open(&path).unwrap();
            ckpt.complete_or_skip("q0", Stage::Answer, || {
                Ok(("ok".into(), serde_json::json!(null)))
            })
            .unwrap();
        }
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        drop(f);
        match Checkpoint::open(&path) {
            Err(Error::Checkpoint { line, .. }) => assert_eq!(line, 2),
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("expected checkpoint error"),
        }
    }

    #[test]
    fn duplicate_work_item_ids_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let ckpt = Checkpoint::open(&dir.path().join("run.ckpt")).unwrap();
        let model = FixedChat::new("m", "x");
        let mut work = items(2);
        work[1].question_id = "q0".into();
        let err = run_with_checkpoint(&model, &work, Stage::Answer, &ckpt, 1, |_| {
            serde_json::json!(null)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }
}
