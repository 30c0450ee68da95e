//! HTTP chat-completion transport.
//!
//! Speaks the common JSON protocol: request body
//! `{model, messages[{role, content}], temperature, seed}` where user
//! content is plain text or text/image parts (images as `data:` URLs),
//! response body `{choices[0].message.content}`.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, BackendError, ChatBackend, ChatRequest};

pub struct HttpChatBackend {
    endpoint: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Http(e.to_string()))?;
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            token,
            client,
        })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let user_content: Value = if req.images.is_empty() {
            Value::String(req.user.clone())
        } else {
            let mut parts = vec![json!({"type": "text", "text": req.user})];
            for img in &req.images {
                let b64 = base64::engine::general_purpose::STANDARD.encode(&img.png);
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }));
            }
            Value::Array(parts)
        };
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": user_content},
            ],
            "temperature": req.temperature,
            "seed": req.seed,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&self.body(req));
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Http(e.to_string()))?;
        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED
            || status == reqwest::StatusCode::FORBIDDEN
        {
            return Err(BackendError::Auth(format!("HTTP {status}")));
        }
        if !status.is_success() {
            // 429 and 5xx are worth retrying; other client errors are not.
            let msg = format!("HTTP {status}");
            if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
                return Err(BackendError::Http(msg));
            }
            return Err(BackendError::Protocol(msg));
        }
        let value: Value = response
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        extract_content(&value)
    }
}

pub(crate) fn extract_content(value: &Value) -> Result<String, BackendError> {
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Minimal single-request HTTP/1.1 responder for transport tests.
    fn serve_once(body: &'static str, status: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut got = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                got.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&got);
                if let Some(pos) = text.find("\r\n\r\n") {
                    let headers = &text[..pos];
                    let need: usize = headers
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    if got.len() >= pos + 4 + need {
                        break;
                    }
                }
            }
            let response = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&got).into_owned()
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn parses_chat_completion_response() {
        let (endpoint, handle) = serve_once(
            r#"{"choices":[{"message":{"content":"hello there"}}]}"#,
            "200 OK",
        );
        let config = BackendConfig {
            endpoint,
            model: "test-model".into(),
            timeout_secs: 5.0,
            ..Default::default()
        };
        let backend = HttpChatBackend::new(&config).unwrap();
        let out = backend.chat(&ChatRequest::text("sys", "hi")).unwrap();
        assert_eq!(out, "hello there");
        let request_text = handle.join().unwrap();
        assert!(request_text.contains("\"model\":\"test-model\""));
        assert!(request_text.contains("\"temperature\""));
    }

    #[test]
    fn auth_errors_are_not_retryable() {
        let (endpoint, _handle) = serve_once(r#"{}"#, "401 Unauthorized");
        let config = BackendConfig {
            endpoint,
            timeout_secs: 5.0,
            ..Default::default()
        };
        let backend = HttpChatBackend::new(&config).unwrap();
        let err = backend.chat(&ChatRequest::text("s", "u")).unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)));
        assert!(!err.retryable());
    }

    #[test]
    fn server_errors_are_retryable() {
        let (endpoint, _handle) = serve_once(r#"{}"#, "503 Service Unavailable");
        let config = BackendConfig {
            endpoint,
            timeout_secs: 5.0,
            ..Default::default()
        };
        let backend = HttpChatBackend::new(&config).unwrap();
        let err = backend.chat(&ChatRequest::text("s", "u")).unwrap_err();
        assert!(err.retryable(), "{err}");
    }

    #[test]
    fn missing_token_env_reported() {
        let config = BackendConfig {
            endpoint: "http://127.0.0.1:1/none".into(),
            auth_env: Some("FIGPIPE_TEST_TOKEN_THAT_IS_UNSET".into()),
            ..Default::default()
        };
        assert!(matches!(
            HttpChatBackend::new(&config),
            Err(BackendError::MissingToken(_))
        ));
    }
}
