use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::grammar::ParseError;

/// Environment variable holding the bearer token for [`HttpBackend`].
pub const API_KEY_ENV: &str = "KNOWTRACE_API_KEY";

/// Appended to a prompt when its previous generation did not parse.
pub const CORRECTIVE_SUFFIX: &str = "Follow the required output format exactly.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("script has no response for prompt fingerprint {0}")]
    ScriptMiss(String),
    #[error("script exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("script: {0}")]
    Script(String),
}

/// A text generator. Implementations must be deterministic: the same prompt
/// yields the same text for the lifetime of the instance.
pub trait GenerationBackend: Send + Sync {
    fn identity(&self) -> &str;

    fn generate(&self, prompt: &str, max_output_tokens: usize) -> Result<String, BackendError>;
}

/// 64-bit FNV-1a of the prompt bytes, as 16 lowercase hex digits.
pub fn fingerprint(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[derive(Debug)]
enum Script {
    Sequence {
        responses: Vec<String>,
        cursor: Mutex<usize>,
    },
    Keyed(HashMap<String, String>),
}

/// Replays canned responses, either in call order or keyed by prompt
/// fingerprint. Keyed scripts are safe under concurrent callers; sequence
/// scripts are only deterministic when calls arrive in a fixed order.
#[derive(Debug)]
pub struct ScriptedBackend {
    identity: String,
    script: Script,
}

#[derive(Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    identity: Option<String>,
    mode: String,
    responses: Value,
}

impl ScriptedBackend {
    pub const DEFAULT_IDENTITY: &'static str = "scripted";

    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            identity: Self::DEFAULT_IDENTITY.to_string(),
            script: Script::Sequence {
                responses: responses.into_iter().map(Into::into).collect(),
                cursor: Mutex::new(0),
            },
        }
    }

    /// Keys are fingerprints (see [`fingerprint`]).
    pub fn keyed(responses: HashMap<String, String>) -> Self {
        Self {
            identity: Self::DEFAULT_IDENTITY.to_string(),
            script: Script::Keyed(responses),
        }
    }

    /// Builds a keyed script from recorded `(prompt, response)` exchanges.
    /// A later exchange for the same prompt overrides an earlier one.
    pub fn from_exchanges<I, P, R>(exchanges: I) -> Self
    where
        I: IntoIterator<Item = (P, R)>,
        P: AsRef<str>,
        R: AsRef<str>,
    {
        Self::keyed(
            exchanges
                .into_iter()
                .map(|(p, r)| (fingerprint(p.as_ref()), r.as_ref().to_string()))
                .collect(),
        )
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    /// A fresh copy of the same script under another identity.
    pub fn relabeled(&self, identity: impl Into<String>) -> Self {
        let script = match &self.script {
            Script::Sequence { responses, .. } => Script::Sequence {
                responses: responses.clone(),
                cursor: Mutex::new(0),
            },
            Script::Keyed(map) => Script::Keyed(map.clone()),
        };
        Self {
            identity: identity.into(),
            script,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))?;
        let bad = |msg: &str| BackendError::Script(msg.to_string());
        let backend = match file.mode.as_str() {
            "sequence" => {
                let responses = match file.responses {
                    Value::Array(items) => items
                        .into_iter()
                        .map(|v| v.as_str().map(str::to_string))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad("sequence responses must be strings"))?,
                    Value::Object(map) => {
                        let mut indexed = map
                            .into_iter()
                            .map(|(k, v)| {
                                let index: usize = k
                                    .parse()
                                    .map_err(|_| bad("sequence keys must be indices"))?;
                                let text = v
                                    .as_str()
                                    .ok_or_else(|| bad("sequence responses must be strings"))?;
                                Ok((index, text.to_string()))
                            })
                            .collect::<Result<Vec<_>, BackendError>>()?;
                        indexed.sort_by_key(|(i, _)| *i);
                        if indexed.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                            return Err(bad("sequence indices must be 0..n without gaps"));
                        }
                        indexed.into_iter().map(|(_, t)| t).collect()
                    }
                    _ => return Err(bad("responses must be an array or object")),
                };
                Self::sequence(responses)
            }
            "keyed" => {
                let Value::Object(map) = file.responses else {
                    return Err(bad("keyed responses must be an object"));
                };
                let responses = map
                    .into_iter()
                    .map(|(k, v)| {
                        let valid = k.len() == 16 && k.chars().all(|c| c.is_ascii_hexdigit());
                        if !valid {
                            return Err(bad("keyed script keys must be 16 hex digits"));
                        }
                        let text = v.as_str().ok_or_else(|| bad("responses must be strings"))?;
                        Ok((k.to_ascii_lowercase(), text.to_string()))
                    })
                    .collect::<Result<HashMap<_, _>, BackendError>>()?;
                Self::keyed(responses)
            }
            other => return Err(bad(&format!("unknown script mode {other:?}"))),
        };
        Ok(match file.identity {
            Some(id) => backend.with_identity(id),
            None => backend,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Serializes the script (keyed entries sorted by fingerprint).
    pub fn to_json(&self) -> String {
        let (mode, responses) = match &self.script {
            Script::Sequence { responses, .. } => ("sequence", json!(responses)),
            Script::Keyed(map) => {
                let sorted: std::collections::BTreeMap<_, _> = map.iter().collect();
                ("keyed", json!(sorted))
            }
        };
        let file = ScriptFile {
            identity: Some(self.identity.clone()),
            mode: mode.to_string(),
            responses,
        };
        serde_json::to_string_pretty(&file).expect("script serializes")
    }
}

impl GenerationBackend for ScriptedBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn generate(&self, prompt: &str, _max_output_tokens: usize) -> Result<String, BackendError> {
        match &self.script {
            Script::Sequence { responses, cursor } => {
                let mut cursor = cursor.lock().expect("script cursor poisoned");
                let response = responses
                    .get(*cursor)
                    .cloned()
                    .ok_or(BackendError::ScriptExhausted(responses.len()))?;
                *cursor += 1;
                Ok(response)
            }
            Script::Keyed(map) => {
                let key = fingerprint(prompt);
                map.get(&key).cloned().ok_or(BackendError::ScriptMiss(key))
            }
        }
    }
}

/// Completion-style HTTP endpoint (`{"model", "prompt", "temperature",
/// "max_tokens"}` in, `choices[0].text` out).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Reads the bearer token from [`API_KEY_ENV`] when it is set.
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        Self::with_api_key(url, model, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_api_key(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            model: model.into(),
            api_key: api_key.filter(|k| !k.is_empty()),
            client,
        })
    }

    /// Same endpoint, different model name.
    pub fn relabeled(&self, model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            ..self.clone()
        }
    }

    pub fn request_body(&self, prompt: &str, max_output_tokens: usize) -> Value {
        json!({
            "model": self.model,
            "prompt": prompt,
            "temperature": 0.0,
            "max_tokens": max_output_tokens,
        })
    }
}

impl GenerationBackend for HttpBackend {
    fn identity(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str, max_output_tokens: usize) -> Result<String, BackendError> {
        let mut request = self
            .client
            .post(&self.url)
            .json(&self.request_body(prompt, max_output_tokens));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        let body: Value = response
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        body.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("response has no choices[0].text".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub prompt: String,
    pub raw: String,
}

#[derive(Debug, Clone)]
pub struct Retried<T> {
    pub value: T,
    /// Prompt that produced the accepted generation.
    pub prompt: String,
    pub raw: String,
    /// Attempts that failed to parse, in order.
    pub failed: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LmError {
    #[error("no parseable generation after {} attempts", attempts.len())]
    GenerationFormat {
        attempts: Vec<Attempt>,
        last_error: ParseError,
    },
    #[error("backend failed: {source}")]
    Backend {
        source: BackendError,
        failed: Vec<Attempt>,
    },
}

/// Generates and parses, re-asking with [`CORRECTIVE_SUFFIX`] up to
/// `retries` more times when the output does not parse.
pub fn generate_with_retry<T, F>(
    backend: &dyn GenerationBackend,
    prompt: &str,
    parse: F,
    retries: usize,
    max_output_tokens: usize,
) -> Result<Retried<T>, LmError>
where
    F: Fn(&str) -> Result<T, ParseError>,
{
    let corrective = format!("{prompt}\n\n{CORRECTIVE_SUFFIX}");
    let mut failed = Vec::new();
    let mut last_error = None;
    for attempt in 0..=retries {
        let current = if attempt == 0 {
            prompt
        } else {
            corrective.as_str()
        };
        let raw = match backend.generate(current, max_output_tokens) {
            Ok(raw) => raw,
            Err(source) => return Err(LmError::Backend { source, failed }),
        };
        match parse(&raw) {
            Ok(value) => {
                return Ok(Retried {
                    value,
                    prompt: current.to_string(),
                    raw,
                    failed,
                })
            }
            Err(err) => {
                last_error = Some(err);
                failed.push(Attempt {
                    prompt: current.to_string(),
                    raw,
                });
            }
        }
    }
    Err(LmError::GenerationFormat {
        attempts: failed,
        last_error: last_error.expect("at least one attempt"),
    })
}
