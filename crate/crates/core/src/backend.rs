//! Sources of raw completion text: an OpenAI-style chat-completions service
//! or deterministic in-process mock agents.
//!
//! Each call is one independent agent. Nothing is carried between calls.

use std::collections::BTreeMap;
use std::io;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::game::ResponderChoice;
use crate::prompt::{RenderedPrompt, Side};
use crate::reference::ReferenceDataset;

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts (last status {last_status:?}): {message}")]
    RetriesExhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("unexpected response body: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.to_string(),
            model_id: "gpt-4-1106-preview".to_string(),
            temperature: 1.0,
            request_timeout_secs: 120,
            max_retries: 6,
            max_parallel: 4,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Config(format!(
                "temperature {} is outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_parallel == 0 {
            return Err(BackendError::Config("max_parallel must be at least 1".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(BackendError::Config("model_id is empty".into()));
        }
        Ok(())
    }
}

/// Connection settings shared by every cell of a run. Model and temperature
/// come from the experiment pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub endpoint: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub api_key_env: String,
}

impl Default for HttpSettings {
    fn default() -> Self {
        let d = BackendConfig::default();
        Self {
            endpoint: d.endpoint,
            request_timeout_secs: d.request_timeout_secs,
            max_retries: d.max_retries,
            max_parallel: d.max_parallel,
            api_key_env: d.api_key_env,
        }
    }
}

impl HttpSettings {
    pub fn backend_config(&self, model_id: &str, temperature: f64) -> BackendConfig {
        BackendConfig {
            endpoint: self.endpoint.clone(),
            model_id: model_id.to_string(),
            temperature,
            request_timeout_secs: self.request_timeout_secs,
            max_retries: self.max_retries,
            max_parallel: self.max_parallel,
            api_key_env: self.api_key_env.clone(),
        }
    }
}

/// Chat-completions request body for one agent: a single user message.
pub fn build_request(config: &BackendConfig, prompt: &RenderedPrompt) -> Value {
    json!({
        "model": config.model_id,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": prompt.text}],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub backend_label: String,
}

/// Everything a backend needs to answer for one agent.
#[derive(Debug, Clone, Copy)]
pub struct AgentCall<'a> {
    pub prompt: &'a RenderedPrompt,
    pub model_id: &'a str,
    pub temperature: f64,
    /// Per-call randomness key. Mocks derive all their draws from it.
    pub stream: u64,
}

pub trait Backend: Send + Sync {
    fn label(&self) -> String;

    fn complete(&self, call: &AgentCall<'_>) -> Result<AgentResponse, BackendError>;

    /// True when the backend never leaves the process.
    fn is_offline(&self) -> bool {
        false
    }
}

/// SplitMix64 finaliser over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x243F_6A88_85A3_08D3;
    for &part in parts {
        state = state.wrapping_add(part).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Exponential backoff: `initial * 2^retry`, capped, with symmetric jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub cap: Duration,
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_secs(1),
            cap: Duration::from_secs(60),
            jitter: 0.2,
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay<R: Rng>(&self, retry: u32, rng: &mut R) -> Duration {
        let base = self.initial.as_secs_f64() * 2f64.powi(retry.min(30) as i32);
        let capped = base.min(self.cap.as_secs_f64());
        let factor = if self.jitter > 0.0 {
            rng.gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((capped * factor).max(0.0))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io_err) = e.downcast_ref::<io::Error>() {
            if matches!(io_err.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

pub struct HttpBackend {
    config: BackendConfig,
    api_key: String,
    agent: ureq::Agent,
    limiter: Limiter,
    backoff: Backoff,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl HttpBackend {
    /// Resolves the API key from the configured environment variable.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            BackendError::Config(format!(
                "API key environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: BackendConfig, api_key: String) -> Result<Self, BackendError> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.request_timeout_secs.max(1)))
            .build();
        Ok(Self {
            limiter: Limiter::new(config.max_parallel),
            config,
            api_key,
            agent,
            backoff: Backoff::default(),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

fn extract_content(body: &Value) -> Result<String, BackendError> {
    let message = body
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| BackendError::BadResponse("missing choices[0].message".into()))?;
    Ok(match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    })
}

impl Backend for HttpBackend {
    fn label(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    fn complete(&self, call: &AgentCall<'_>) -> Result<AgentResponse, BackendError> {
        let cell_config = BackendConfig {
            model_id: call.model_id.to_string(),
            temperature: call.temperature,
            ..self.config.clone()
        };
        cell_config.validate()?;
        let body = build_request(&cell_config, call.prompt);
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(call.stream);
        let started = Instant::now();
        let mut last_status = None;
        let mut last_message = String::new();
        let mut timed_out = false;

        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff.delay(attempt - 1, &mut jitter_rng));
            }
            let result = {
                let _permit = self.limiter.acquire();
                self.agent
                    .post(&self.url())
                    .set("Authorization", &format!("Bearer {}", self.api_key))
                    .set("Content-Type", "application/json")
                    .send_json(&body)
            };
            match result {
                Ok(resp) => {
                    let parsed: Value = resp
                        .into_json()
                        .map_err(|e| BackendError::BadResponse(e.to_string()))?;
                    return Ok(AgentResponse {
                        raw_text: extract_content(&parsed)?,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt + 1,
                        backend_label: self.label(),
                    });
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if !is_retryable_status(status) {
                        return Err(BackendError::Rejected { status, body: text });
                    }
                    last_status = Some(status);
                    last_message = text;
                    timed_out = false;
                }
                Err(ureq::Error::Transport(t)) => {
                    timed_out = is_timeout(&t);
                    last_message = t.to_string();
                }
            }
        }
        if timed_out {
            Err(BackendError::Timeout { attempts })
        } else {
            Err(BackendError::RetriesExhausted {
                attempts,
                last_status,
                message: last_message,
            })
        }
    }
}

/// Deterministic stand-in agents.
#[derive(Debug, Clone, PartialEq)]
pub enum MockSpec {
    /// Offers nothing and accepts everything.
    Equilibrium,
    /// Replays decisions drawn from a reference dataset.
    EmpiricalSampler {
        reference: Arc<ReferenceDataset>,
        seed: u64,
    },
    /// Accepts offers strictly above `threshold`; as proposer, offers the
    /// smallest amount it would itself accept.
    ThresholdResponder { threshold: u32 },
    /// Returns `responses[(agent_key) % len]`, where the key comes from the
    /// call's stream. Used to inject arbitrary text.
    Scripted { responses: Vec<String> },
}

impl MockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            MockSpec::Equilibrium => "equilibrium",
            MockSpec::EmpiricalSampler { .. } => "empirical",
            MockSpec::ThresholdResponder { .. } => "threshold",
            MockSpec::Scripted { .. } => "scripted",
        }
    }
}

pub fn offer_json(offer: u32) -> String {
    format!("{{\"offer\": {offer}}}")
}

pub fn decision_json(choice: ResponderChoice) -> String {
    format!("{{\"decision\": \"{choice}\"}}")
}

#[derive(Debug)]
pub struct MockBackend {
    spec: MockSpec,
    total_good: u32,
    responder_index: BTreeMap<u32, Vec<bool>>,
}

impl MockBackend {
    pub fn new(spec: MockSpec, total_good: u32) -> Result<Self, BackendError> {
        let mut responder_index: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        match &spec {
            MockSpec::EmpiricalSampler { reference, .. } => {
                if reference.proposer_samples.is_empty() || reference.responder_samples.is_empty()
                {
                    return Err(BackendError::Config(
                        "empirical sampler needs proposer and responder samples".into(),
                    ));
                }
                for s in &reference.responder_samples {
                    responder_index.entry(s.offer).or_default().push(s.accepted);
                }
            }
            MockSpec::Scripted { responses } if responses.is_empty() => {
                return Err(BackendError::Config("scripted mock has no responses".into()));
            }
            MockSpec::ThresholdResponder { threshold } if *threshold > total_good => {
                return Err(BackendError::Config(format!(
                    "threshold {threshold} exceeds the good of {total_good} coins"
                )));
            }
            _ => {}
        }
        Ok(Self {
            spec,
            total_good,
            responder_index,
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// Reference responder decisions at the offer, or at the nearest offer
    /// that has any (lower offer on ties).
    fn decisions_near(&self, offer: u32) -> &[bool] {
        let below = self.responder_index.range(..=offer).next_back();
        let above = self.responder_index.range(offer..).next();
        let pick = match (below, above) {
            (Some(b), Some(a)) => {
                if offer - b.0 <= a.0 - offer {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => return &[],
        };
        pick.1
    }

    fn respond(&self, prompt: &RenderedPrompt, stream: u64) -> String {
        let offer_shown = prompt.offer_shown.unwrap_or(0);
        match (&self.spec, prompt.side) {
            (MockSpec::Equilibrium, Side::Proposer) => offer_json(0),
            (MockSpec::Equilibrium, Side::Responder) => decision_json(ResponderChoice::Accept),
            (MockSpec::EmpiricalSampler { reference, seed }, side) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[*seed, stream]));
                match side {
                    Side::Proposer => {
                        let samples = &reference.proposer_samples;
                        let offer = samples[rng.gen_range(0..samples.len())].offer;
                        format!("I will offer {offer} coins.\n{}", offer_json(offer))
                    }
                    Side::Responder => {
                        let pool = self.decisions_near(offer_shown);
                        let accepted = pool[rng.gen_range(0..pool.len())];
                        let choice = if accepted {
                            ResponderChoice::Accept
                        } else {
                            ResponderChoice::Reject
                        };
                        format!("I {choice} the offer.\n{}", decision_json(choice))
                    }
                }
            }
            (MockSpec::ThresholdResponder { threshold }, Side::Proposer) => {
                let offer = (threshold + 1).min(self.total_good);
                format!("I will offer {offer} coins.\n{}", offer_json(offer))
            }
            (MockSpec::ThresholdResponder { threshold }, Side::Responder) => {
                let choice = if offer_shown > *threshold {
                    ResponderChoice::Accept
                } else {
                    ResponderChoice::Reject
                };
                format!("I {choice} the offer.\n{}", decision_json(choice))
            }
            (MockSpec::Scripted { responses }, _) => {
                responses[(stream % responses.len() as u64) as usize].clone()
            }
        }
    }
}

impl Backend for MockBackend {
    fn label(&self) -> String {
        format!("mock:{}", self.spec.kind())
    }

    fn complete(&self, call: &AgentCall<'_>) -> Result<AgentResponse, BackendError> {
        Ok(AgentResponse {
            raw_text: self.respond(call.prompt, call.stream),
            latency_ms: 0,
            attempt_count: 1,
            backend_label: self.label(),
        })
    }

    fn is_offline(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_proposer, parse_responder, ExtractionMode};
    use crate::prompt::{render_prompt, PromptTemplate, PromptingMethod};
    use crate::reference::synthesize_reference;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn proposer_prompt() -> RenderedPrompt {
        render_prompt(
            &PromptTemplate::default(),
            PromptingMethod::ZeroShot,
            Side::Proposer,
            &[],
            None,
        )
        .unwrap()
    }

    fn responder_prompt(offer: u32) -> RenderedPrompt {
        render_prompt(
            &PromptTemplate::default(),
            PromptingMethod::ZeroShot,
            Side::Responder,
            &[],
            Some(offer),
        )
        .unwrap()
    }

    fn call<'a>(prompt: &'a RenderedPrompt, stream: u64) -> AgentCall<'a> {
        AgentCall {
            prompt,
            model_id: "gpt-4-1106-preview",
            temperature: 1.0,
            stream,
        }
    }

    #[test]
    fn request_body_fields() {
        let prompt = RenderedPrompt {
            text: "X".into(),
            method: PromptingMethod::ZeroShot,
            side: Side::Proposer,
            offer_shown: None,
        };
        let config = BackendConfig {
            temperature: 1.5,
            ..BackendConfig::default()
        };
        let body = build_request(&config, &prompt);
        assert_eq!(body["temperature"], json!(1.5));
        assert_eq!(body["model"], json!("gpt-4-1106-preview"));
        let messages = body["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 1);
        assert_eq!(messages[0]["content"], json!("X"));
        assert_eq!(messages[0]["role"], json!("user"));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.temperature = 2.0;
        assert!(c.validate().is_ok());
        c.temperature = 2.01;
        assert!(c.validate().is_err());
        c.temperature = 0.0;
        c.max_parallel = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn equilibrium_mock() {
        let mock = MockBackend::new(MockSpec::Equilibrium, 100).unwrap();
        let p = proposer_prompt();
        let text = mock.complete(&call(&p, 1)).unwrap().raw_text;
        assert_eq!(parse_proposer(&text, 100).unwrap().offer, Some(0));
        for offer in [0, 13, 100] {
            let r = responder_prompt(offer);
            let text = mock.complete(&call(&r, 9)).unwrap().raw_text;
            assert_eq!(
                parse_responder(&text).unwrap().choice,
                Some(ResponderChoice::Accept)
            );
        }
    }

    #[test]
    fn threshold_mock() {
        let mock = MockBackend::new(MockSpec::ThresholdResponder { threshold: 20 }, 100).unwrap();
        let decide = |offer| {
            let r = responder_prompt(offer);
            let text = mock.complete(&call(&r, 0)).unwrap().raw_text;
            parse_responder(&text).unwrap().choice.unwrap()
        };
        assert_eq!(decide(10), ResponderChoice::Reject);
        assert_eq!(decide(20), ResponderChoice::Reject);
        assert_eq!(decide(30), ResponderChoice::Accept);
        let p = proposer_prompt();
        let text = mock.complete(&call(&p, 0)).unwrap().raw_text;
        assert_eq!(parse_proposer(&text, 100).unwrap().offer, Some(21));
        assert!(MockBackend::new(MockSpec::ThresholdResponder { threshold: 101 }, 100).is_err());
    }

    #[test]
    fn empirical_mock_is_keyed_by_stream() {
        let reference = Arc::new(synthesize_reference(7, 1000).unwrap());
        let mock = MockBackend::new(
            MockSpec::EmpiricalSampler {
                reference: reference.clone(),
                seed: 3,
            },
            100,
        )
        .unwrap();
        let p = proposer_prompt();
        let a: Vec<String> = (0..50)
            .map(|i| mock.complete(&call(&p, i)).unwrap().raw_text)
            .collect();
        let b: Vec<String> = (0..50)
            .rev()
            .map(|i| mock.complete(&call(&p, i)).unwrap().raw_text)
            .rev()
            .collect();
        assert_eq!(a, b);
        for text in &a {
            let d = parse_proposer(text, 100).unwrap();
            assert_eq!(d.extraction_mode, ExtractionMode::Structured);
            assert!(reference.proposer_samples.iter().any(|s| Some(s.offer) == d.offer));
        }
    }

    #[test]
    fn empirical_mock_uses_nearest_offer() {
        let reference = Arc::new(ReferenceDataset {
            proposer_samples: vec![crate::reference::ProposerSample { offer: 50 }],
            responder_samples: vec![
                crate::reference::ResponderSample {
                    offer: 10,
                    accepted: false,
                },
                crate::reference::ResponderSample {
                    offer: 60,
                    accepted: true,
                },
            ],
            provenance: "tiny".into(),
        });
        let mock = MockBackend::new(MockSpec::EmpiricalSampler { reference, seed: 0 }, 100).unwrap();
        let decide = |offer| {
            let r = responder_prompt(offer);
            parse_responder(&mock.complete(&call(&r, 4)).unwrap().raw_text)
                .unwrap()
                .choice
                .unwrap()
        };
        assert_eq!(decide(0), ResponderChoice::Reject);
        assert_eq!(decide(35), ResponderChoice::Reject);
        assert_eq!(decide(36), ResponderChoice::Accept);
        assert_eq!(decide(100), ResponderChoice::Accept);
    }

    #[test]
    fn scripted_mock_cycles() {
        let mock = MockBackend::new(
            MockSpec::Scripted {
                responses: vec!["a".into(), "b".into()],
            },
            100,
        )
        .unwrap();
        let p = proposer_prompt();
        assert_eq!(mock.complete(&call(&p, 0)).unwrap().raw_text, "a");
        assert_eq!(mock.complete(&call(&p, 3)).unwrap().raw_text, "b");
        assert!(MockBackend::new(MockSpec::Scripted { responses: vec![] }, 100).is_err());
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (retry, nominal) in [(0u32, 1.0f64), (1, 2.0), (2, 4.0), (5, 32.0), (6, 60.0), (20, 60.0)]
        {
            let d = b.delay(retry, &mut rng).as_secs_f64();
            assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9, "{retry}: {d}");
        }
    }

    #[test]
    fn seeds_mix() {
        assert_eq!(derive_seed(&[1, 2]), derive_seed(&[1, 2]));
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    /// Minimal HTTP server answering each connection with the next scripted
    /// (status, body) pair.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
                counter.fetch_add(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1"), hits, handle)
    }

    fn fast_backend(endpoint: String, max_retries: u32) -> HttpBackend {
        HttpBackend::with_key(
            BackendConfig {
                endpoint,
                max_retries,
                request_timeout_secs: 5,
                ..BackendConfig::default()
            },
            "sk-test".into(),
        )
        .unwrap()
        .with_backoff(Backoff {
            initial: Duration::from_millis(5),
            cap: Duration::from_millis(20),
            jitter: 0.2,
        })
    }

    const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"{\"offer\": 40}"}}]}"#;

    #[test]
    fn http_retries_rate_limits_then_succeeds() {
        let (endpoint, hits, handle) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, OK_BODY.into()),
        ]);
        let backend = fast_backend(endpoint, 3);
        let p = proposer_prompt();
        let resp = backend.complete(&call(&p, 1)).unwrap();
        assert_eq!(resp.raw_text, "{\"offer\": 40}");
        assert_eq!(resp.attempt_count, 3);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        let bodies = handle.join().unwrap();
        assert!(bodies[0].starts_with("Authorization: Bearer sk-test"));
        let sent: Value = serde_json::from_str(bodies[2].split_once('\n').unwrap().1).unwrap();
        assert_eq!(sent["messages"][0]["content"], json!(p.text));
    }

    #[test]
    fn http_fails_fast_on_client_error() {
        let (endpoint, hits, handle) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let backend = fast_backend(endpoint, 5);
        let p = proposer_prompt();
        let err = backend.complete(&call(&p, 1)).unwrap_err();
        assert!(matches!(err, BackendError::Rejected { status: 400, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        handle.join().unwrap();
    }

    #[test]
    fn http_gives_up_after_max_retries() {
        let (endpoint, _, handle) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
        let backend = fast_backend(endpoint, 1);
        let p = proposer_prompt();
        let err = backend.complete(&call(&p, 1)).unwrap_err();
        assert!(
            matches!(
                err,
                BackendError::RetriesExhausted {
                    attempts: 2,
                    last_status: Some(500),
                    ..
                }
            ),
            "{err}"
        );
        handle.join().unwrap();
    }

    #[test]
    fn http_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let holder = std::thread::spawn(move || {
            let conns: Vec<_> = (0..2).map(|_| listener.accept().unwrap()).collect();
            std::thread::sleep(Duration::from_millis(2500));
            drop(conns);
        });
        let backend = fast_backend(format!("http://{addr}"), 1);
        let backend = HttpBackend {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_millis(300))
                .build(),
            ..backend
        };
        let p = proposer_prompt();
        let err = backend.complete(&call(&p, 1)).unwrap_err();
        assert!(matches!(err, BackendError::Timeout { attempts: 2 }), "{err}");
        holder.join().unwrap();
    }

    #[test]
    fn missing_key_is_config_error() {
        let config = BackendConfig {
            api_key_env: "UGSIM_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..BackendConfig::default()
        };
        assert!(matches!(HttpBackend::new(config), Err(BackendError::Config(_))));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(Limiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (limiter, peak, current) = (limiter.clone(), peak.clone(), current.clone());
                s.spawn(move || {
                    let _p = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn content_extraction() {
        assert_eq!(
            extract_content(&json!({"choices":[{"message":{"content":null}}]})).unwrap(),
            ""
        );
        assert!(extract_content(&json!({"choices":[]})).is_err());
    }
}
