//! Chat-completion backends: a remote HTTP client, a scripted backend for
//! tests, and transcript record/replay.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "TOOLREC_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: usize, reason: String },
    #[error("script exhausted at call {0}")]
    ScriptExhausted(usize),
    #[error("scripted reply {index} expects the last user turn to contain `{pattern}`")]
    ScriptGateMismatch { index: usize, pattern: String },
    #[error("replay diverged at turn {turn}: request digest {found} does not match recorded {expected}")]
    ReplayDivergence { turn: usize, expected: String, found: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("backend config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A chat-completion policy. Implementations are shareable across threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        (**self).complete(turns)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        (**self).complete(turns)
    }
}

fn check_request(turns: &[ChatTurn]) -> Result<(), LlmError> {
    match turns.first() {
        Some(t) if t.role == Role::System => Ok(()),
        _ => Err(LlmError::InvalidRequest("history must start with a system turn".into())),
    }
}

/// Stable request digest: SHA-256 over `role:content` pairs with runs of
/// whitespace collapsed, so whitespace-only edits do not count as changes.
pub fn request_digest(turns: &[ChatTurn]) -> String {
    let mut h = Sha256::new();
    for t in turns {
        h.update(t.role.as_str().as_bytes());
        h.update(b":");
        let collapsed: Vec<&str> = t.content.split_whitespace().collect();
        h.update(collapsed.join(" ").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Remote,
    Scripted,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(BackendKind::Remote),
            "scripted" => Ok(BackendKind::Scripted),
            "replay" => Ok(BackendKind::Replay),
            other => Err(LlmError::Config(format!("unknown backend kind `{other}`"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Remote => "remote",
            BackendKind::Scripted => "scripted",
            BackendKind::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// `None` leaves the provider default in place.
    pub temperature: Option<f64>,
    pub timeout_secs: u64,
    pub retries: usize,
    pub backoff_ms: u64,
    pub api_key_env: String,
    pub script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub strict: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: None,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
            api_key_env: API_KEY_ENV.into(),
            script: None,
            transcript: None,
            strict: true,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl BackendConfig {
    /// Overlays recognised keys from a `key=value` map onto `self`.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<(), LlmError> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, LlmError> {
            v.parse().map_err(|_| LlmError::Config(format!("invalid value for `{k}`: `{v}`")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "kind" | "backend" => self.kind = v.parse()?,
                "endpoint" => self.endpoint = v.clone(),
                "model" => self.model = v.clone(),
                "temperature" => self.temperature = if v.is_empty() || v == "default" { None } else { Some(num(k, v)?) },
                "timeout_secs" => self.timeout_secs = num(k, v)?,
                "retries" => self.retries = num(k, v)?,
                "backoff_ms" => self.backoff_ms = num(k, v)?,
                "api_key_env" => self.api_key_env = v.clone(),
                "script" => self.script = Some(v.into()),
                "transcript" => self.transcript = Some(v.into()),
                "strict" => self.strict = num(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::Io { path: path.into(), source })?;
        let kv = parse_key_values(&text).map_err(LlmError::Config)?;
        let mut c = Self::default();
        c.apply(&kv)?;
        Ok(c)
    }

    /// Builds the configured backend.
    pub fn build(&self) -> Result<Box<dyn ChatBackend>, LlmError> {
        match self.kind {
            BackendKind::Remote => Ok(Box::new(RemoteBackend::from_config(self)?)),
            BackendKind::Scripted => {
                let p = self.script.as_ref().ok_or_else(|| LlmError::Config("scripted backend needs `script`".into()))?;
                Ok(Box::new(ScriptedBackend::from_file(p)?))
            }
            BackendKind::Replay => {
                let p = self.transcript.as_ref().ok_or_else(|| LlmError::Config("replay backend needs `transcript`".into()))?;
                Ok(Box::new(ReplayBackend::new(load_transcript(p)?, self.strict)))
            }
        }
    }
}

/// OpenAI-style chat-completions client with bounded retries.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    temperature: Option<f64>,
    api_key: String,
    retries: usize,
    backoff: Duration,
    gate: Mutex<()>,
}

impl RemoteBackend {
    pub fn from_config(c: &BackendConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&c.api_key_env)
            .map_err(|_| LlmError::Config(format!("remote backend needs credentials in ${}", c.api_key_env)))?;
        Ok(Self::new(&c.endpoint, &c.model, c.temperature, &api_key, c.timeout_secs, c.retries, c.backoff_ms))
    }

    pub fn new(endpoint: &str, model: &str, temperature: Option<f64>, api_key: &str, timeout_secs: u64, retries: usize, backoff_ms: u64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            temperature,
            api_key: api_key.to_string(),
            retries,
            backoff: Duration::from_millis(backoff_ms),
            gate: Mutex::new(()),
        }
    }

    fn body(&self, turns: &[ChatTurn]) -> Value {
        let messages: Vec<Value> = turns.iter().map(|t| json!({"role": t.role.as_str(), "content": t.content})).collect();
        let mut body = json!({"model": self.model, "messages": messages});
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        match v["choices"][0]["message"]["content"].as_str() {
            Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
            _ => Err("response has no message content".into()),
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        check_request(turns)?;
        let _serial = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        let body = self.body(turns);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * (1u32 << (attempt - 1).min(16)));
            }
            match self.attempt(&body) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    log::warn!("remote attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(LlmError::BackendUnavailable { attempts: self.retries + 1, reason: last })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedReply {
    /// Substring the last user turn must contain, when set.
    pub gate: Option<String>,
    pub text: String,
}

/// Replays a fixed list of replies in call order.
///
/// Script file format: each reply starts with a line `=== reply`, optionally
/// followed by ` match=<substring>`; every line up to the next marker is the
/// reply body. Lines before the first marker are ignored.
pub struct ScriptedBackend {
    replies: Vec<ScriptedReply>,
    cursor: Mutex<usize>,
}

pub const REPLY_MARKER: &str = "=== reply";

impl ScriptedBackend {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        Self { replies, cursor: Mutex::new(0) }
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| ScriptedReply { gate: None, text: t.into() }).collect())
    }

    pub fn parse(text: &str) -> Self {
        let mut replies: Vec<ScriptedReply> = Vec::new();
        let mut body: Option<(Option<String>, Vec<&str>)> = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix(REPLY_MARKER) {
                if let Some((gate, lines)) = body.take() {
                    replies.push(ScriptedReply { gate, text: lines.join("\n").trim_end().to_string() });
                }
                let gate = rest.trim().strip_prefix("match=").map(str::to_string);
                body = Some((gate, Vec::new()));
            } else if let Some((_, lines)) = body.as_mut() {
                lines.push(line);
            }
        }
        if let Some((gate, lines)) = body {
            replies.push(ScriptedReply { gate, text: lines.join("\n").trim_end().to_string() });
        }
        Self::new(replies)
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::Io { path: path.into(), source })?;
        Ok(Self::parse(&text))
    }

    pub fn render(replies: &[ScriptedReply]) -> String {
        let mut s = String::new();
        for r in replies {
            s.push_str(REPLY_MARKER);
            if let Some(g) = &r.gate {
                s.push_str(" match=");
                s.push_str(g);
            }
            s.push('\n');
            s.push_str(&r.text);
            s.push('\n');
        }
        s
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn remaining(&self) -> usize {
        self.replies.len() - self.calls()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        check_request(turns)?;
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let index = *cursor;
        let reply = self.replies.get(index).ok_or(LlmError::ScriptExhausted(index))?;
        if let Some(pattern) = &reply.gate {
            let last_user = turns.iter().rev().find(|t| t.role == Role::User).map(|t| t.content.as_str()).unwrap_or("");
            if !last_user.contains(pattern.as_str()) {
                return Err(LlmError::ScriptGateMismatch { index, pattern: pattern.clone() });
            }
        }
        *cursor += 1;
        Ok(reply.text.clone())
    }
}

/// Backend that always fails as unavailable; useful for failure-path runs.
pub struct UnavailableBackend;

impl ChatBackend for UnavailableBackend {
    fn complete(&self, _turns: &[ChatTurn]) -> Result<String, LlmError> {
        Err(LlmError::BackendUnavailable { attempts: 1, reason: "backend disabled".into() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptRecord {
    pub turn: usize,
    pub digest: String,
    pub reply: String,
}

const FIELD_SEP: char = '\u{1f}';
const RECORD_END: &str = "\u{1e}\n";

/// One record per call: `turn US digest US reply RS LF`. The unit separator
/// keeps reply text unescaped; the record separator allows multi-line replies.
pub fn render_transcript(records: &[TranscriptRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{}{FIELD_SEP}{}{FIELD_SEP}{}{RECORD_END}", r.turn, r.digest, r.reply));
    }
    s
}

pub fn parse_transcript(text: &str, path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let mut out = Vec::new();
    let mut rest = text;
    let mut line = 1;
    while !rest.trim().is_empty() {
        let (rec, tail) = rest.split_once(RECORD_END).ok_or_else(|| LlmError::Format {
            path: path.into(),
            line,
            reason: "unterminated record".into(),
        })?;
        let mut fields = rec.splitn(3, FIELD_SEP);
        let bad = |reason: &str| LlmError::Format { path: path.into(), line, reason: reason.into() };
        let turn = fields.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad turn index"))?;
        let digest = fields.next().ok_or_else(|| bad("missing digest"))?.to_string();
        let reply = fields.next().ok_or_else(|| bad("missing reply"))?.to_string();
        line += rec.matches('\n').count() + 1;
        out.push(TranscriptRecord { turn, digest, reply });
        rest = tail;
    }
    Ok(out)
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let text = fs::read_to_string(path).map_err(|source| LlmError::Io { path: path.into(), source })?;
    parse_transcript(&text, path)
}

pub fn save_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<(), LlmError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| LlmError::Io { path: parent.into(), source })?;
    }
    fs::write(path, render_transcript(records)).map_err(|source| LlmError::Io { path: path.into(), source })
}

/// Wraps a backend and logs every successful call.
pub struct Recorder<B> {
    inner: B,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, records: Mutex::new(Vec::new()) }
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        save_transcript(path, &self.records())
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        let reply = self.inner.complete(turns)?;
        let mut records = self.records.lock().unwrap_or_else(|e| e.into_inner());
        let turn = records.len();
        records.push(TranscriptRecord { turn, digest: request_digest(turns), reply: reply.clone() });
        Ok(reply)
    }
}

/// Serves recorded replies in order, checking each request's digest.
pub struct ReplayBackend {
    records: Vec<TranscriptRecord>,
    strict: bool,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(records: Vec<TranscriptRecord>, strict: bool) -> Self {
        Self { records, strict, cursor: Mutex::new(0) }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        check_request(turns)?;
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let rec = self.records.get(*cursor).ok_or(LlmError::ScriptExhausted(*cursor))?;
        let found = request_digest(turns);
        if found != rec.digest {
            if self.strict {
                return Err(LlmError::ReplayDivergence { turn: rec.turn, expected: rec.digest.clone(), found });
            }
            log::warn!("replay turn {} digest mismatch", rec.turn);
        }
        *cursor += 1;
        Ok(rec.reply.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> Vec<ChatTurn> {
        vec![ChatTurn::system("sys"), ChatTurn::user(user)]
    }

    #[test]
    fn scripted_in_order_then_exhausted() {
        let b = ScriptedBackend::from_texts(["r1", "r2"]);
        assert_eq!(b.complete(&req("a")).unwrap(), "r1");
        assert_eq!(b.complete(&req("a")).unwrap(), "r2");
        assert!(matches!(b.complete(&req("a")), Err(LlmError::ScriptExhausted(2))));
    }

    #[test]
    fn script_file_with_gates() {
        let b = ScriptedBackend::parse("# comment\n=== reply\nThought: x\nAction: Finish\n=== reply match=Please rank\n1. A\n2. B\n");
        assert_eq!(b.replies.len(), 2);
        assert_eq!(b.replies[0].text, "Thought: x\nAction: Finish");
        assert_eq!(b.replies[1].gate.as_deref(), Some("Please rank"));
        assert_eq!(ScriptedBackend::parse(&ScriptedBackend::render(&b.replies)).replies, b.replies);
        b.complete(&req("hi")).unwrap();
        assert!(matches!(b.complete(&req("no")), Err(LlmError::ScriptGateMismatch { index: 1, .. })));
        assert_eq!(b.complete(&req("... Please rank ...")).unwrap(), "1. A\n2. B");
    }

    #[test]
    fn requires_system_turn() {
        let b = ScriptedBackend::from_texts(["r"]);
        assert!(matches!(b.complete(&[ChatTurn::user("x")]), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn digest_ignores_whitespace_only_changes() {
        assert_eq!(request_digest(&req("a  b\n c")), request_digest(&req("a b c ")));
        assert_ne!(request_digest(&req("a b c")), request_digest(&req("a b d")));
    }

    #[test]
    fn transcript_round_trip_with_multiline_replies() {
        let recs = vec![
            TranscriptRecord { turn: 0, digest: "ab".into(), reply: "Thought: x\nAction: Finish".into() },
            TranscriptRecord { turn: 1, digest: "cd".into(), reply: "".into() },
        ];
        let text = render_transcript(&recs);
        assert_eq!(parse_transcript(&text, Path::new("t")).unwrap(), recs);
    }

    #[test]
    fn record_then_replay_and_divergence() {
        let rec = Recorder::new(ScriptedBackend::from_texts(["one", "two"]));
        rec.complete(&req("a")).unwrap();
        rec.complete(&req("b")).unwrap();
        let replay = ReplayBackend::new(rec.records(), true);
        assert_eq!(replay.complete(&req("a")).unwrap(), "one");
        match replay.complete(&req("edited")) {
            Err(LlmError::ReplayDivergence { turn, .. }) => assert_eq!(turn, 1),
            other => panic!("{other:?}"),
        }
        let empty = ReplayBackend::new(vec![], true);
        assert!(matches!(empty.complete(&req("a")), Err(LlmError::ScriptExhausted(0))));
    }

    #[test]
    fn config_overlay() {
        let kv = parse_key_values("# c\nkind = remote\nretries=1\ntemperature=0.0\n").unwrap();
        let mut c = BackendConfig::default();
        c.apply(&kv).unwrap();
        assert_eq!(c.kind, BackendKind::Remote);
        assert_eq!(c.retries, 1);
        assert_eq!(c.temperature, Some(0.0));
        assert!(parse_key_values("novalue").is_err());
    }
}
