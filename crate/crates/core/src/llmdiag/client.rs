use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_records_jsonl, stub_diagnose, DiagnosisRecord, PromptPair, RecordSource, Stage};
use crate::alignment::EntityKind;
use crate::dataset::ResponseLog;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub offline: bool,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub concurrency: usize,
    /// Input prompts longer than this drop their oldest log entries.
    pub char_limit: Option<usize>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: None,
            api_key: None,
            chat_model: "gpt-3.5-turbo-16k".to_string(),
            embed_model: "text-embedding-3-small".to_string(),
            offline: false,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            concurrency: 4,
            char_limit: Some(24_000),
        }
    }
}

impl EndpointConfig {
    /// Reads `COGDIAG_BASE_URL`, `COGDIAG_API_KEY`, `COGDIAG_CHAT_MODEL`,
    /// `COGDIAG_EMBED_MODEL` and `COGDIAG_OFFLINE`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = Self::default();
        cfg.base_url = var("COGDIAG_BASE_URL");
        cfg.api_key = var("COGDIAG_API_KEY");
        if let Some(m) = var("COGDIAG_CHAT_MODEL") {
            cfg.chat_model = m;
        }
        if let Some(m) = var("COGDIAG_EMBED_MODEL") {
            cfg.embed_model = m;
        }
        cfg.offline = var("COGDIAG_OFFLINE").is_some_and(|v| !matches!(v.as_str(), "0" | "false" | "no"));
        cfg
    }

    /// Offline when asked to be or when no endpoint is configured.
    pub fn is_offline(&self) -> bool {
        self.offline || self.base_url.is_none()
    }

    pub(crate) fn url(&self, path: &str) -> Result<String> {
        let base = self
            .base_url
            .as_deref()
            .ok_or_else(|| Error::config("no endpoint base URL configured"))?;
        Ok(format!("{}/{path}", base.trim_end_matches('/')))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: connection failures, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("bad JSON body: {e}"))),
            429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

/// Calls `transport` with exponential backoff on transient failures.
pub(crate) fn post_with_retry(
    transport: &dyn Transport,
    cfg: &EndpointConfig,
    url: &str,
    body: &Value,
) -> Result<Value> {
    let mut attempt = 0;
    loop {
        match transport.post_json(url, cfg.api_key.as_deref(), body) {
            Ok(v) => return Ok(v),
            Err(TransportError::Fatal(m)) => return Err(Error::Transport(m)),
            Err(TransportError::Transient(m)) if attempt < cfg.max_retries => {
                let wait = cfg.backoff_ms.saturating_mul(1 << attempt);
                log::warn!("{url}: {m}; retrying in {wait} ms");
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
            Err(TransportError::Transient(m)) => {
                return Err(Error::Transport(format!(
                    "{url}: giving up after {} retries: {m}",
                    cfg.max_retries
                )))
            }
        }
    }
}

/// Append-only record cache keyed by prompt digest.
pub struct DiagnosisCache {
    records: Mutex<HashMap<String, DiagnosisRecord>>,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl DiagnosisCache {
    pub fn in_memory() -> Self {
        Self {
            records: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
            path: None,
        }
    }

    /// Opens (or creates) a JSON-lines cache; existing records are loaded.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        if path.exists() {
            for r in parse_records_jsonl(&std::fs::read_to_string(path)?)? {
                records.insert(r.prompt_digest.clone(), r);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Mutex::new(records),
            writer: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, digest: &str) -> Option<DiagnosisRecord> {
        self.records.lock().expect("cache lock").get(digest).cloned()
    }

    pub fn insert(&self, record: DiagnosisRecord) -> Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(file) = writer.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
            file.flush()?;
        }
        self.records
            .lock()
            .expect("cache lock")
            .insert(record.prompt_digest.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct DiagnosisRequest<'a> {
    pub kind: EntityKind,
    pub id: &'a str,
    pub stage: Stage,
    pub prompt: PromptPair,
    /// Logs the prompt was built from, used by the offline stub.
    pub logs: &'a [&'a ResponseLog],
}

#[derive(Deserialize)]
struct ModelAnswer {
    diagnosis: Value,
    #[serde(default)]
    reason: Value,
}

fn as_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Serves a prompt from the cache, the offline stub, or the endpoint.
pub fn chat_complete(
    cfg: &EndpointConfig,
    transport: &dyn Transport,
    cache: &DiagnosisCache,
    req: &DiagnosisRequest<'_>,
) -> Result<DiagnosisRecord> {
    let digest = req.prompt.digest();
    if let Some(hit) = cache.get(&digest) {
        return Ok(hit);
    }
    let record = if cfg.is_offline() {
        DiagnosisRecord {
            prompt_digest: digest,
            ..stub_diagnose(req.kind, req.id, req.logs, req.stage)?
        }
    } else {
        let body = json!({
            "model": cfg.chat_model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": req.prompt.system_prompt },
                { "role": "user", "content": req.prompt.input_prompt },
            ],
        });
        let resp = post_with_retry(transport, cfg, &cfg.url("chat/completions")?, &body)?;
        let content = resp["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Transport("chat response has no message content".into()))?
            .to_string();
        let (text, reason) = match req.stage {
            Stage::Collab => (content, String::new()),
            Stage::Diagnosis => match serde_json::from_str::<ModelAnswer>(strip_fences(&content)) {
                Ok(a) => (as_text(&a.diagnosis), as_text(&a.reason)),
                Err(e) => {
                    log::warn!(
                        "{} {:?}: diagnosis is not the requested JSON ({e}); keeping raw text",
                        req.kind,
                        req.id
                    );
                    (content, String::new())
                }
            },
        };
        if text.trim().is_empty() {
            return Err(Error::Transport(format!(
                "empty completion for {} {:?}",
                req.kind, req.id
            )));
        }
        DiagnosisRecord {
            kind: req.kind,
            id: req.id.to_string(),
            stage: req.stage,
            text,
            reason,
            prompt_digest: digest,
            source: RecordSource::Remote,
        }
    };
    cache.insert(record.clone())?;
    Ok(record)
}
