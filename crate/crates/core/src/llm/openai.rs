//! OpenAI-compatible HTTP backends (OpenRouter, vLLM, llama.cpp server, ...).

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, ChatResponse, ClientError, Embedder, ErrorKind, Role, Usage};

pub const DEFAULT_BASE_URL: &str = "https://openrouter.ai/api/v1";

/// Where requests go. Credentials only ever come from the environment.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            timeout: Duration::from_secs(600),
        }
    }

    /// `OPENAI_BASE_URL` (default OpenRouter) and `OPENAI_API_KEY`.
    pub fn from_env() -> Self {
        let mut e = Self::new(std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| DEFAULT_BASE_URL.into()));
        e.api_key = std::env::var("OPENAI_API_KEY").ok().filter(|k| !k.is_empty());
        e
    }

    fn http(&self) -> Result<reqwest::blocking::Client, ClientError> {
        reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ClientError::new(ErrorKind::Config, format!("http client: {e}")))
    }

    fn post(
        &self,
        http: &reqwest::blocking::Client,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<String, ClientError> {
        let mut req = http.post(format!("{}/{path}", self.base_url)).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport_error)?;
        match status {
            200..=299 => Ok(text),
            _ => Err(status_error(status, &text)),
        }
    }
}

fn transport_error(e: reqwest::Error) -> ClientError {
    if e.is_timeout() {
        ClientError::new(ErrorKind::Timeout, e.to_string())
    } else {
        // Connection resets and refused connections are usually transient.
        ClientError::new(ErrorKind::Server, e.to_string())
    }
}

pub(crate) fn status_error(status: u16, body: &str) -> ClientError {
    let detail = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    match status {
        429 => ClientError::new(ErrorKind::RateLimited, detail),
        408 | 504 => ClientError::new(ErrorKind::Timeout, detail),
        501 | 505 => ClientError::fatal(ErrorKind::Server, detail),
        500..=599 => ClientError::new(ErrorKind::Server, detail),
        _ => ClientError::new(ErrorKind::Config, detail),
    }
}

fn malformed(e: impl std::fmt::Display) -> ClientError {
    ClientError::new(ErrorKind::MalformedResponse, e.to_string())
}

#[derive(Deserialize)]
struct ChatBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: u32,
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Chat completions over HTTP. When the endpoint cannot return several
/// choices per call (`supports_n = false`), n samples become n calls.
#[derive(Debug, Clone)]
pub struct OpenAiChat {
    endpoint: Endpoint,
    supports_n: bool,
    name: String,
}

impl OpenAiChat {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            name: format!("openai-compatible({})", endpoint.base_url),
            endpoint,
            supports_n: true,
        }
    }

    pub fn with_supports_n(mut self, supports_n: bool) -> Self {
        self.supports_n = supports_n;
        self
    }

    fn call(&self, http: &reqwest::blocking::Client, r: &ChatRequest, n: u32) -> Result<ChatResponse, ClientError> {
        let mut messages = Vec::new();
        if let Some(s) = &r.system {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": r.user}));
        let body = json!({
            "model": r.model,
            "messages": messages,
            "temperature": r.temperature,
            "max_tokens": r.max_tokens,
            "n": n,
        });
        let text = self.endpoint.post(http, "chat/completions", &body)?;
        let mut parsed: ChatBody = serde_json::from_str(&text).map_err(malformed)?;
        parsed.choices.sort_by_key(|c| c.index);
        let samples = parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.ok_or_else(|| malformed("choice without content")))
            .collect::<Result<Vec<_>, _>>()?;
        let usage = parsed.usage.map_or(Usage::default(), |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Ok(ChatResponse {
            sample_completion_tokens: (samples.len() == 1).then(|| vec![usage.completion_tokens]),
            samples,
            usage,
        })
    }
}

impl ChatBackend for OpenAiChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let http = self.endpoint.http()?;
        if self.supports_n || request.n_samples == 1 {
            return self.call(&http, request, request.n_samples);
        }
        let mut out = ChatResponse {
            samples: Vec::new(),
            usage: Usage::default(),
            sample_completion_tokens: Some(Vec::new()),
        };
        for _ in 0..request.n_samples {
            let r = self.call(&http, request, 1)?;
            out.usage += r.usage;
            if let Some(v) = out.sample_completion_tokens.as_mut() {
                v.push(r.usage.completion_tokens);
            }
            out.samples.extend(r.samples);
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct EmbedBody {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f32>,
}

/// `/embeddings` client. Defaults to e5-style role prefixes.
#[derive(Debug, Clone)]
pub struct OpenAiEmbedder {
    endpoint: Endpoint,
    pub model: String,
    pub query_prefix: String,
    pub passage_prefix: String,
}

impl OpenAiEmbedder {
    pub fn new(endpoint: Endpoint, model: impl Into<String>) -> Self {
        Self {
            endpoint,
            model: model.into(),
            query_prefix: "query: ".into(),
            passage_prefix: "passage: ".into(),
        }
    }
}

impl Embedder for OpenAiEmbedder {
    fn id(&self) -> String {
        format!("openai:{}", self.model)
    }

    fn prefix(&self, role: Role) -> &str {
        match role {
            Role::Query => &self.query_prefix,
            Role::Passage => &self.passage_prefix,
        }
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        let http = self.endpoint.http()?;
        let body = json!({"model": self.model, "input": texts});
        let text = self.endpoint.post(&http, "embeddings", &body)?;
        let mut parsed: EmbedBody = serde_json::from_str(&text).map_err(malformed)?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) responses in order, one per
    /// connection, and returns the received request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, h)
    }

    fn req(n: u32) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            system: Some("sys".into()),
            user: "hi".into(),
            temperature: 0.6,
            max_tokens: 10,
            n_samples: n,
        }
    }

    #[test]
    fn parses_choices_and_usage() {
        let body = r#"{"choices":[{"index":1,"message":{"content":"b"}},{"index":0,"message":{"content":"a"}}],
                       "usage":{"prompt_tokens":7,"completion_tokens":5}}"#;
        let (url, h) = serve(vec![(200, body.into())]);
        let chat = OpenAiChat::new(Endpoint::new(url));
        let r = chat.send(&req(2)).unwrap();
        assert_eq!(r.samples, ["a", "b"]);
        assert_eq!(
            r.usage,
            Usage {
                prompt_tokens: 7,
                completion_tokens: 5
            }
        );
        let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["n"], 2);
        assert_eq!(sent["messages"][0]["role"], "system");
    }

    #[test]
    fn sequential_samples_without_n() {
        let one = |c: &str| {
            format!(
                r#"{{"choices":[{{"message":{{"content":"{c}"}}}}],"usage":{{"prompt_tokens":3,"completion_tokens":2}}}}"#
            )
        };
        let (url, h) = serve(vec![(200, one("x")), (200, one("y"))]);
        let chat = OpenAiChat::new(Endpoint::new(url)).with_supports_n(false);
        let r = chat.send(&req(2)).unwrap();
        assert_eq!(r.samples, ["x", "y"]);
        assert_eq!(
            r.usage,
            Usage {
                prompt_tokens: 6,
                completion_tokens: 4
            }
        );
        assert_eq!(r.sample_completion_tokens, Some(vec![2, 2]));
        assert_eq!(h.join().unwrap().len(), 2);
    }

    #[test]
    fn status_and_body_errors() {
        let (url, h) = serve(vec![(429, "{}".into()), (200, "not json".into()), (401, "{}".into())]);
        let chat = OpenAiChat::new(Endpoint::new(url));
        assert_eq!(chat.send(&req(1)).unwrap_err().kind, ErrorKind::RateLimited);
        assert_eq!(chat.send(&req(1)).unwrap_err().kind, ErrorKind::MalformedResponse);
        let e = chat.send(&req(1)).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
        assert!(!e.retryable);
        h.join().unwrap();
        assert_eq!(status_error(503, "").kind, ErrorKind::Server);
        assert!(!status_error(501, "").retryable);
        assert_eq!(status_error(504, "").kind, ErrorKind::Timeout);
    }

    #[test]
    fn embeddings_in_index_order() {
        let body = r#"{"data":[{"index":1,"embedding":[0,1]},{"index":0,"embedding":[1,0]}]}"#;
        let (url, h) = serve(vec![(200, body.into())]);
        let e = OpenAiEmbedder::new(Endpoint::new(url), "e5-base");
        let v = super::super::embed(&e, &["a", "b"], Role::Query).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["input"][0], "query: a");
        assert_eq!(e.id(), "openai:e5-base");
    }
}
