//! Wire contract for remote backends (scorers, generators, judges, prompt
//! rewriters): line-delimited JSON over a local TCP socket.
//!
//! Framing: the client writes one JSON request per line and reads one JSON
//! response line. Each call opens a fresh connection; in-flight calls are
//! bounded by a configurable limit. Timeouts and transport failures are
//! errors, never default scores.
//!
//! Field-by-field schema:
//!
//! - request `{"type": ...}` is one of
//!   - `score`: `channel` (string: `clip|hps|dino|subject-vlm|relation-vlm`),
//!     `prompt` (string: the node's canonical prompt text), `payload`
//!     (float array: the sample latent), `reference` (optional float array:
//!     reference latent for similarity channels)
//!   - `generate`: `prompt` (string), `embedding` (float array),
//!     `references` (array of float arrays, dependency outputs in plan
//!     order), `seed` (u64)
//!   - `judge`: `family` (string: `exist|attribute|relationship`), `prompt`
//!     (string: the filled evaluation question), `payload` (float array)
//!   - `rewrite`: `template` (string: template name), `fields` (string map
//!     of placeholder values)
//! - response `{"type": ...}` mirrors the request:
//!   - `score`: `score` (float), `rubric` (optional integer 0..=4),
//!     `rationale` (string)
//!   - `generate`: `latent` (float array)
//!   - `judge`: `answer` (string: `Yes|No|Unclear`), `description`
//!     (string), `reason` (string)
//!   - `rewrite`: `text` (string)
//!   - `error`: `message` (string)

use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub channel: String,
    pub prompt: String,
    pub payload: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<u8>,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub embedding: Vec<f64>,
    pub references: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub family: String,
    pub prompt: String,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub answer: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub template: String,
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Request {
    Score(ScoreRequest),
    Generate(GenerateRequest),
    Judge(JudgeRequest),
    Rewrite(RewriteRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Response {
    Score(ScoreResponse),
    Generate(GenerateResponse),
    Judge(JudgeResponse),
    Rewrite(RewriteResponse),
    Error { message: String },
}

/// Declared retry policy of a client: attempts = 1 + retries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            timeout_ms: 2000,
        }
    }
}

struct InFlightGate {
    count: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl InFlightGate {
    fn acquire(&self) {
        let mut n = self.count.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.cv.wait(n).expect("gate wait");
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.count.lock().expect("gate lock");
        *n -= 1;
        self.cv.notify_one();
    }
}

/// Synchronous JSONL client with a bounded in-flight count.
pub struct JsonlClient {
    pub addr: String,
    pub policy: RetryPolicy,
    gate: InFlightGate,
}

impl JsonlClient {
    pub fn new(addr: impl Into<String>, policy: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            addr: addr.into(),
            policy,
            gate: InFlightGate {
                count: Mutex::new(0),
                cv: Condvar::new(),
                limit: max_in_flight.max(1),
            },
        }
    }

    fn call_once(&self, request: &Request) -> Result<Response> {
        let timeout = Duration::from_millis(self.policy.timeout_ms);
        let stream = TcpStream::connect(&self.addr)
            .map_err(|e| CoreError::Remote(format!("connect {}: {e}", self.addr)))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| CoreError::Remote(e.to_string()))?;
        stream
            .set_write_timeout(Some(timeout))
            .map_err(|e| CoreError::Remote(e.to_string()))?;
        let mut writer = stream
            .try_clone()
            .map_err(|e| CoreError::Remote(e.to_string()))?;
        let line = serde_json::to_string(request)?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| CoreError::Remote(format!("send: {e}")))?;
        let mut reader = BufReader::new(stream);
        let mut buf = String::new();
        reader
            .read_line(&mut buf)
            .map_err(|e| CoreError::Remote(format!("recv: {e}")))?;
        if buf.trim().is_empty() {
            return Err(CoreError::Remote("empty response".into()));
        }
        let response: Response = serde_json::from_str(buf.trim())?;
        if let Response::Error { message } = &response {
            return Err(CoreError::Remote(format!("backend error: {message}")));
        }
        Ok(response)
    }

    /// Send one request, retrying per policy; all failures are errors.
    pub fn call(&self, request: &Request) -> Result<Response> {
        self.gate.acquire();
        let result = (|| {
            let mut last = None;
            for _ in 0..=self.policy.retries {
                match self.call_once(request) {
                    Ok(r) => return Ok(r),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })();
        self.gate.release();
        result
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        match self.call(&Request::Score(req.clone()))? {
            Response::Score(r) => Ok(r),
            other => Err(CoreError::Remote(format!(
                "expected score response, got {other:?}"
            ))),
        }
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        match self.call(&Request::Generate(req.clone()))? {
            Response::Generate(r) => Ok(r),
            other => Err(CoreError::Remote(format!(
                "expected generate response, got {other:?}"
            ))),
        }
    }

    pub fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse> {
        match self.call(&Request::Judge(req.clone()))? {
            Response::Judge(r) => Ok(r),
            other => Err(CoreError::Remote(format!(
                "expected judge response, got {other:?}"
            ))),
        }
    }

    pub fn rewrite(&self, req: &RewriteRequest) -> Result<RewriteResponse> {
        match self.call(&Request::Rewrite(req.clone()))? {
            Response::Rewrite(r) => Ok(r),
            other => Err(CoreError::Remote(format!(
                "expected rewrite response, got {other:?}"
            ))),
        }
    }
}

/// Remote generator backend over the shared transport.
pub struct RemoteGenerator {
    pub client: JsonlClient,
    pub latent_dim: usize,
    pub max_refs: usize,
    pub prompt: String,
}

impl crate::chain::Generator for RemoteGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn max_references(&self) -> usize {
        self.max_refs
    }

    fn generate(
        &self,
        ctx: &crate::chain::ConditionContext,
        seed: u64,
    ) -> Result<ndarray::Array1<f64>> {
        let resp = self.client.generate(&GenerateRequest {
            prompt: self.prompt.clone(),
            embedding: ctx.embedding.to_vec(),
            references: ctx.references.iter().map(|r| r.to_vec()).collect(),
            seed,
        })?;
        if resp.latent.len() != self.latent_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.latent_dim,
                got: resp.latent.len(),
            });
        }
        Ok(ndarray::Array1::from_vec(resp.latent))
    }
}
