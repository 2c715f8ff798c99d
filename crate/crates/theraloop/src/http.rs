//! OpenAI-compatible chat-completion backend.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use theraloop_core::gateway::{Backend, BackendKind, PromptRequest, RawCompletion};

use crate::config::GatewaySection;

/// Caps the number of requests in flight at once.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(section: &GatewaySection, api_key: Option<String>) -> HttpBackend {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(section.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            endpoint: section.endpoint.clone().unwrap_or_default(),
            model: section.model.clone().unwrap_or_default(),
            api_key,
            temperature: section.temperature,
            max_tokens: section.max_tokens,
            limiter: Limiter { free: Mutex::new(section.max_inflight.max(1)), cv: Condvar::new() },
        }
    }

    pub fn request_body(&self, request: &PromptRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

fn content_of(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content").and_then(Value::as_str)
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn call(&self, request: &PromptRequest) -> Result<RawCompletion, String> {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(self.request_body(request)).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body: Value = resp.body_mut().read_json().map_err(|e| format!("status {status}: {e}"))?;
        if !(200..300).contains(&status) {
            return Err(format!("status {status}: {body}"));
        }
        let text = content_of(&body).ok_or_else(|| format!("no choices[0].message.content in {body}"))?;
        Ok(RawCompletion { text: text.to_string(), latency_ms: started.elapsed().as_millis() as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response and hands back the request body.
    fn serve_once(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let reply = format!("HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            (&stream).write_all(reply.as_bytes()).unwrap();
            String::from_utf8(buf).unwrap()
        });
        (url, handle)
    }

    fn section(url: &str) -> GatewaySection {
        GatewaySection { endpoint: Some(url.to_string()), model: Some("m".into()), ..GatewaySection::default() }
    }

    #[test]
    fn sends_chat_request_and_reads_content() {
        let (url, server) = serve_once("200 OK", r#"{"choices":[{"message":{"role":"assistant","content":"{\"a\":1}"}}]}"#);
        let backend = HttpBackend::new(&section(&url), Some("k".into()));
        let out = backend.call(&PromptRequest::new("t", "hello".into())).unwrap();
        assert_eq!(out.text, r#"{"a":1}"#);
        let sent: Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent["messages"][0]["content"], "hello");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["model"], "m");
    }

    #[test]
    fn error_status_is_transport_error() {
        let (url, server) = serve_once("500 Internal Server Error", r#"{"error":"boom"}"#);
        let backend = HttpBackend::new(&section(&url), None);
        let err = backend.call(&PromptRequest::new("t", "x".into())).unwrap_err();
        assert!(err.contains("500"), "{err}");
        server.join().unwrap();
    }
}
