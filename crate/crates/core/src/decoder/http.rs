//! HTTP scoring protocol.
//!
//! `POST {base}/v1/score` with a JSON [`ScoreRequest`]. Decoder requests
//! (`role: "decoder"`) are answered with per-choice `log_scores`; encoder
//! requests (`role: "encoder"`) with free `text`. Authentication is an
//! optional bearer token.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DecoderBackend, Query, Scores};
use crate::dataset::Instance;
use crate::error::BackendError;
use crate::representations::EncoderClient;

pub const SCORE_PATH: &str = "/v1/score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub instance_id: String,
    pub prompt: String,
    pub choices: Vec<String>,
    pub conditioning: String,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn endpoint(base_url: &str) -> String {
    format!("{}{SCORE_PATH}", base_url.trim_end_matches('/'))
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => BackendError::Transport(format!("HTTP {code}")),
        ureq::Error::StatusCode(code) => BackendError::Fatal(format!("HTTP {code}")),
        e @ (ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled) => BackendError::Transport(e.to_string()),
        e => BackendError::Fatal(e.to_string()),
    }
}

fn post(
    agent: &ureq::Agent,
    url: &str,
    token: Option<&str>,
    body: &ScoreRequest,
) -> Result<ScoreResponse, BackendError> {
    let mut request = agent.post(url);
    if let Some(token) = token {
        request = request.header("Authorization", &format!("Bearer {token}"));
    }
    request
        .send_json(body)
        .map_err(classify)?
        .body_mut()
        .read_json::<ScoreResponse>()
        .map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))
}

/// Remote decoder speaking the scoring protocol.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    id: String,
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, base_url: &str, token: Option<String>) -> Self {
        HttpBackend {
            id: id.into(),
            url: endpoint(base_url),
            token,
            agent: agent(Duration::from_secs(120)),
        }
    }
}

impl DecoderBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score(&self, query: &Query<'_>) -> Result<Scores, BackendError> {
        let request = ScoreRequest {
            instance_id: query.instance.id.clone(),
            prompt: query.instance.prompt.clone(),
            choices: query.instance.choices.clone(),
            conditioning: query.conditioning.to_string(),
            role: "decoder".into(),
            temperature: None,
            max_tokens: None,
        };
        let response = post(&self.agent, &self.url, self.token.as_deref(), &request)?;
        response
            .log_scores
            .map(Scores::LogScores)
            .ok_or_else(|| BackendError::Fatal("response lacks `log_scores`".into()))
    }
}

/// Remote encoder speaking the scoring protocol with role `encoder`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    id: String,
    url: String,
    token: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    agent: ureq::Agent,
}

impl HttpEncoder {
    pub fn new(id: impl Into<String>, base_url: &str, token: Option<String>) -> Self {
        HttpEncoder {
            id: id.into(),
            url: endpoint(base_url),
            token,
            temperature: 0.0,
            max_tokens: 512,
            agent: agent(Duration::from_secs(300)),
        }
    }
}

impl EncoderClient for HttpEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let request = ScoreRequest {
            instance_id: String::new(),
            prompt: prompt.to_string(),
            choices: Vec::new(),
            conditioning: String::new(),
            role: "encoder".into(),
            temperature: Some(self.temperature),
            max_tokens: Some(self.max_tokens),
        };
        let response = post(&self.agent, &self.url, self.token.as_deref(), &request)?;
        response
            .text
            .ok_or_else(|| BackendError::Fatal("response lacks `text`".into()))
    }
}

/// Minimal local endpoint serving a backend over the scoring protocol.
///
/// Intended for desk-scale runs and tests: one thread per connection,
/// `Connection: close`, no TLS.
pub struct ScoreServer {
    addr: SocketAddr,
    requests: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

#[derive(Default)]
pub struct ScoreServerBuilder {
    decoder: Option<Arc<dyn DecoderBackend>>,
    encoder: Option<Arc<dyn EncoderClient>>,
    token: Option<String>,
    fail_first: u64,
}

impl ScoreServerBuilder {
    pub fn decoder(mut self, backend: Arc<dyn DecoderBackend>) -> Self {
        self.decoder = Some(backend);
        self
    }

    pub fn encoder(mut self, encoder: Arc<dyn EncoderClient>) -> Self {
        self.encoder = Some(encoder);
        self
    }

    /// Require `Authorization: Bearer <token>`.
    pub fn token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    /// Answer the first `n` requests with HTTP 503.
    pub fn fail_first(mut self, n: u64) -> Self {
        self.fail_first = n;
        self
    }

    pub fn spawn(self) -> std::io::Result<ScoreServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let state = Arc::new(ServerState {
            decoder: self.decoder,
            encoder: self.encoder,
            token: self.token,
            fail_first: self.fail_first,
            requests: requests.clone(),
        });
        let stop_flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = state.clone();
                std::thread::spawn(move || {
                    if let Err(e) = state.handle(stream) {
                        log::debug!("score server connection error: {e}");
                    }
                });
            }
        });
        Ok(ScoreServer {
            addr,
            requests,
            stop,
            handle: Some(handle),
        })
    }
}

impl ScoreServer {
    pub fn builder() -> ScoreServerBuilder {
        ScoreServerBuilder::default()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, including rejected ones.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for ScoreServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

struct ServerState {
    decoder: Option<Arc<dyn DecoderBackend>>,
    encoder: Option<Arc<dyn EncoderClient>>,
    token: Option<String>,
    fail_first: u64,
    requests: Arc<AtomicU64>,
}

impl ServerState {
    fn handle(&self, stream: TcpStream) -> std::io::Result<()> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(());
        }
        let mut content_length = 0usize;
        let mut authorization = None;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                let value = value.trim();
                match name.trim().to_ascii_lowercase().as_str() {
                    "content-length" => content_length = value.parse().unwrap_or(0),
                    "authorization" => authorization = Some(value.to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = self.respond(&request_line, authorization.as_deref(), &body, n);
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            401 => "Unauthorized",
            404 => "Not Found",
            _ => "Service Unavailable",
        };
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
            payload.len()
        )?;
        stream.flush()
    }

    fn respond(&self, request_line: &str, authorization: Option<&str>, body: &[u8], n: u64) -> (u16, String) {
        let error = |msg: &str| serde_json::json!({ "error": msg }).to_string();
        let mut parts = request_line.split_whitespace();
        if parts.next() != Some("POST") || parts.next() != Some(SCORE_PATH) {
            return (404, error("not found"));
        }
        if let Some(token) = &self.token {
            if authorization != Some(format!("Bearer {token}").as_str()) {
                return (401, error("bad token"));
            }
        }
        if n < self.fail_first {
            return (503, error("warming up"));
        }
        let request: ScoreRequest = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return (400, error(&e.to_string())),
        };
        let response = match request.role.as_str() {
            "decoder" => {
                let Some(decoder) = &self.decoder else {
                    return (400, error("no decoder configured"));
                };
                let instance = match Instance::new(request.instance_id, request.prompt, request.choices) {
                    Ok(i) => i,
                    Err(e) => return (400, error(&e.to_string())),
                };
                match decoder.score(&Query::new(&instance, &request.conditioning)) {
                    Ok(Scores::LogScores(s)) => ScoreResponse {
                        log_scores: Some(s),
                        text: None,
                    },
                    Ok(Scores::Probabilities(p)) => ScoreResponse {
                        log_scores: Some(p.iter().map(|x| x.max(f64::MIN_POSITIVE).ln()).collect()),
                        text: None,
                    },
                    Err(BackendError::Transport(e)) => return (503, error(&e)),
                    Err(BackendError::Fatal(e)) => return (400, error(&e)),
                }
            }
            "encoder" => {
                let Some(encoder) = &self.encoder else {
                    return (400, error("no encoder configured"));
                };
                match encoder.complete(&request.prompt) {
                    Ok(text) => ScoreResponse {
                        log_scores: None,
                        text: Some(text),
                    },
                    Err(BackendError::Transport(e)) => return (503, error(&e)),
                    Err(BackendError::Fatal(e)) => return (400, error(&e)),
                }
            }
            other => return (400, error(&format!("unknown role `{other}`"))),
        };
        (200, serde_json::to_string(&response).expect("response serializes"))
    }
}
