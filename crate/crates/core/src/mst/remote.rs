//! Chat-completions backend over a pluggable HTTP transport.

use std::collections::VecDeque;
use std::io::Cursor;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::action::GRAMMAR;
use super::backend::{plain_description, planner_instructions, BackendError, DecisionBackend, DecisionRequest, RegionView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Model for region descriptions; defaults to `model`.
    pub vision_model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Attach region pixels as PNG data URLs when describing.
    pub send_images: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "planner".into(),
            vision_model: None,
            api_key_env: "MMNAV_API_KEY".into(),
            timeout_secs: 60,
            retries: 2,
            backoff_ms: 500,
            temperature: 0.0,
            max_tokens: 256,
            send_images: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait ChatTransport: Send + Sync {
    /// POSTs a JSON body. `Err` means no HTTP response was obtained.
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpReply, String>;
}

/// Blocking transport backed by `ureq`.
#[derive(Debug, Default)]
pub struct UreqTransport;

impl ChatTransport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str, timeout: Duration) -> Result<HttpReply, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Canned replies for tests; records every request body.
#[derive(Debug, Default)]
pub struct MockTransport {
    replies: Mutex<VecDeque<Result<HttpReply, String>>>,
    pub requests: Mutex<Vec<(Vec<(String, String)>, String)>>,
}

impl MockTransport {
    pub fn new(replies: Vec<Result<HttpReply, String>>) -> Self {
        Self {
            replies: Mutex::new(replies.into()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// A 200 response carrying `content` as the assistant message.
    pub fn chat_reply(content: &str) -> Result<HttpReply, String> {
        Ok(HttpReply {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        })
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl ChatTransport for MockTransport {
    fn post_json(&self, _url: &str, headers: &[(String, String)], body: &str, _timeout: Duration) -> Result<HttpReply, String> {
        self.requests.lock().unwrap().push((headers.to_vec(), body.to_string()));
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err("mock transport has no reply left".into()))
    }
}

pub fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "***"),
        _ => text.to_string(),
    }
}

pub struct RemoteBackend {
    pub config: RemoteConfig,
    transport: Arc<dyn ChatTransport>,
    api_key: Option<String>,
}

impl RemoteBackend {
    /// Reads the API key from the configured environment variable. A missing
    /// key is allowed (local servers) and logged.
    pub fn new(config: RemoteConfig, transport: Arc<dyn ChatTransport>) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without authorization", config.api_key_env);
        }
        Self {
            config,
            transport,
            api_key,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn chat(&self, model: &str, messages: Value) -> Result<String, BackendError> {
        let body = json!({
            "model": model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
        .to_string();
        let mut headers = Vec::new();
        if let Some(k) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {k}")));
        }
        let key = self.api_key.as_deref();
        let timeout = Duration::from_secs(self.config.timeout_secs.max(1));
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 && self.config.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(6)));
            }
            log::debug!("POST {} attempt {} body={}", self.config.endpoint, attempt + 1, redact(&body, key));
            match self.transport.post_json(&self.config.endpoint, &headers, &body, timeout) {
                Ok(r) if (200..300).contains(&r.status) => {
                    log::debug!("response {} body={}", r.status, redact(&r.body, key));
                    return Ok(extract_content(&r.body));
                }
                Ok(r) if r.status == 429 || r.status >= 500 => {
                    last_err = format!("HTTP {}", r.status);
                    log::warn!("backend returned HTTP {}, retrying", r.status);
                }
                Ok(r) => {
                    return Err(BackendError::Transport(format!(
                        "HTTP {}: {}",
                        r.status,
                        redact(&r.body, key)
                    )))
                }
                Err(e) => {
                    last_err = redact(&e, key);
                    log::warn!("request failed: {last_err}");
                }
            }
        }
        Err(BackendError::Transport(format!(
            "{} attempts failed, last error: {last_err}",
            self.config.retries + 1
        )))
    }
}

/// Assistant text of a chat-completions response; empty when absent so the
/// caller's repair path handles it.
fn extract_content(body: &str) -> String {
    let v: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("unparsable response body: {e}");
            return String::new();
        }
    };
    match &v["choices"][0]["message"]["content"] {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => {
            log::warn!("response has no message content");
            String::new()
        }
    }
}

fn png_data_url(view: &RegionView) -> Result<String, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    view.image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| BackendError::Config(format!("cannot encode region image: {e}")))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
    ))
}

fn history(req: &DecisionRequest<'_>) -> String {
    if req.memory.records.is_empty() {
        return "none".into();
    }
    req.memory
        .records
        .iter()
        .map(|r| {
            let best = r.regions.iter().map(|g| g.score).fold(f64::NAN, f64::max);
            format!("step {}: {} -> {} region(s), best attention {:.3}", r.step, r.action, r.regions.len(), best)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl DecisionBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn describe(&self, view: &RegionView) -> Result<String, BackendError> {
        let text = format!(
            "Describe the tissue in this region in one or two sentences. Context: {}",
            plain_description(view)
        );
        let content = if self.config.send_images {
            json!([
                {"type": "text", "text": text},
                {"type": "image_url", "image_url": {"url": png_data_url(view)?}},
            ])
        } else {
            json!(text)
        };
        let model = self.config.vision_model.as_deref().unwrap_or(&self.config.model);
        self.chat(model, json!([{"role": "user", "content": content}]))
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<String, BackendError> {
        let mut user = format!(
            "Task: {}\nCurrent level: {} (levels 0..{})\nDefault region count: {}\nHistory:\n{}\nRegion descriptions:\n",
            req.prompt,
            req.current_level,
            req.num_levels.saturating_sub(1),
            req.default_n,
            history(req)
        );
        for d in req.descriptions {
            user.push_str("- ");
            user.push_str(d);
            user.push('\n');
        }
        let mut messages = vec![
            json!({"role": "system", "content": planner_instructions()}),
            json!({"role": "user", "content": user}),
        ];
        if let Some(h) = req.repair_hint {
            messages.push(json!({
                "role": "user",
                "content": format!("Your previous reply was rejected ({h}). Answer with exactly one line: {GRAMMAR}"),
            }));
        }
        self.chat(&self.config.model, Value::Array(messages))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mst::memory::{MemoryBank, TraceHeader};

    fn cfg() -> RemoteConfig {
        RemoteConfig {
            backoff_ms: 0,
            ..Default::default()
        }
    }

    fn request<'a>(bank: &'a MemoryBank, hint: Option<&'a str>) -> DecisionRequest<'a> {
        DecisionRequest {
            descriptions: &[],
            prompt: "find tumor",
            memory: bank,
            current_level: 0,
            num_levels: 5,
            default_n: 4,
            repair_hint: hint,
        }
    }

    fn bank() -> MemoryBank {
        MemoryBank::new(TraceHeader {
            slide_id: "s".into(),
            prompt: "find tumor".into(),
            config_hash: "h".into(),
        })
    }

    #[test]
    fn returns_assistant_content() {
        let t = Arc::new(MockTransport::new(vec![MockTransport::chat_reply("ACTION: STOP")]));
        let b = RemoteBackend::new(cfg(), t.clone()).with_api_key(Some("sk-secret".into()));
        let bank = bank();
        assert_eq!(b.decide(&request(&bank, None)).unwrap(), "ACTION: STOP");
        let reqs = t.requests.lock().unwrap();
        assert_eq!(reqs[0].0[0], ("Authorization".into(), "Bearer sk-secret".into()));
        let body: Value = serde_json::from_str(&reqs[0].1).unwrap();
        assert_eq!(body["model"], "planner");
        assert_eq!(body["messages"][0]["role"], "system");
    }

    #[test]
    fn retries_server_errors_then_gives_up() {
        let err = Ok(HttpReply {
            status: 503,
            body: "busy".into(),
        });
        let t = Arc::new(MockTransport::new(vec![err.clone(), Err("reset".into()), MockTransport::chat_reply("ok")]));
        let b = RemoteBackend::new(cfg(), t.clone());
        let bank = bank();
        assert_eq!(b.decide(&request(&bank, None)).unwrap(), "ok");
        assert_eq!(t.request_count(), 3);

        let t = Arc::new(MockTransport::new(vec![err.clone(), err.clone(), err]));
        let b = RemoteBackend::new(cfg(), t.clone());
        assert!(matches!(b.decide(&request(&bank, None)), Err(BackendError::Transport(_))));
    }

    #[test]
    fn client_error_is_not_retried_and_key_is_redacted() {
        let t = Arc::new(MockTransport::new(vec![Ok(HttpReply {
            status: 401,
            body: "bad key sk-secret".into(),
        })]));
        let b = RemoteBackend::new(cfg(), t.clone()).with_api_key(Some("sk-secret".into()));
        let bank = bank();
        let err = b.decide(&request(&bank, None)).unwrap_err().to_string();
        assert!(!err.contains("sk-secret"));
        assert_eq!(t.request_count(), 1);
    }

    #[test]
    fn garbage_envelope_becomes_empty_reply() {
        let t = Arc::new(MockTransport::new(vec![Ok(HttpReply {
            status: 200,
            body: "<html>".into(),
        })]));
        let b = RemoteBackend::new(cfg(), t);
        let bank = bank();
        assert_eq!(b.decide(&request(&bank, None)).unwrap(), "");
    }

    #[test]
    fn repair_hint_is_sent() {
        let t = Arc::new(MockTransport::new(vec![MockTransport::chat_reply("ACTION: STOP")]));
        let b = RemoteBackend::new(cfg(), t.clone());
        let bank = bank();
        b.decide(&request(&bank, Some("no ACTION line"))).unwrap();
        let body: Value = serde_json::from_str(&t.requests.lock().unwrap()[0].1).unwrap();
        assert!(body["messages"][2]["content"].as_str().unwrap().contains("no ACTION line"));
    }

    #[test]
    fn describe_attaches_png() {
        let t = Arc::new(MockTransport::new(vec![MockTransport::chat_reply("pink stroma")]));
        let b = RemoteBackend::new(cfg(), t.clone());
        let view = RegionView {
            region: crate::pyramid::Region {
                level_index: 0,
                x: 0,
                y: 0,
                w: 2,
                h: 2,
                score: 0.5,
                step_selected: 0,
            },
            magnification: 0.625,
            image: image::RgbImage::new(2, 2),
        };
        assert_eq!(b.describe(&view).unwrap(), "pink stroma");
        let body: Value = serde_json::from_str(&t.requests.lock().unwrap()[0].1).unwrap();
        let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }
}
