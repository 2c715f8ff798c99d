//! Model-agnostic completion gateway.
//!
//! A [`Gateway`] owns exactly one [`Backend`]. The in-crate [`StubBackend`]
//! is a pure function of `(template_id, rendered_prompt)`; the remote
//! chat-completion backend lives in the `theraloop` crate because it needs
//! a network stack.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 8_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: String,
    pub rendered_prompt: String,
    pub response_schema_id: Option<String>,
    pub max_output_chars: usize,
    pub temperature: f64,
}

impl PromptRequest {
    /// A request at temperature 0 with the default output cap.
    pub fn new(template_id: &str, rendered_prompt: String) -> Self {
        PromptRequest {
            template_id: template_id.to_string(),
            rendered_prompt,
            response_schema_id: None,
            max_output_chars: DEFAULT_MAX_OUTPUT_CHARS,
            temperature: 0.0,
        }
    }

    pub fn with_schema(mut self, schema_id: &str) -> Self {
        self.response_schema_id = Some(schema_id.to_string());
        self
    }

    fn check(&self) -> Result<(), GatewayError> {
        let reason = if self.rendered_prompt.trim().is_empty() {
            "rendered_prompt is empty"
        } else if self.max_output_chars == 0 {
            "max_output_chars must be positive"
        } else if self.temperature.is_nan() || self.temperature < 0.0 {
            "temperature must be non-negative"
        } else {
            return Ok(());
        };
        Err(GatewayError::InvalidRequest {
            template_id: self.template_id.clone(),
            reason: reason.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Stub,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend: BackendKind,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// What a backend returns for one call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// One round trip. `Err` carries a transport-level message.
    fn call(&self, request: &PromptRequest) -> Result<RawCompletion, String>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn call(&self, request: &PromptRequest) -> Result<RawCompletion, String> {
        (**self).call(request)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error for template {template_id}: {message}")]
    Transport { template_id: String, message: String },
    #[error("call budget of {budget} exhausted at template {template_id}")]
    BudgetExceeded { template_id: String, budget: u64 },
    #[error("schema {schema_id} not satisfied for template {template_id} after {attempts} attempts: {violations:?}")]
    SchemaFailure {
        template_id: String,
        schema_id: String,
        attempts: u32,
        last_raw: String,
        violations: Vec<String>,
    },
    #[error("schema {0} is not registered")]
    UnknownSchema(String),
    #[error("invalid request for template {template_id}: {reason}")]
    InvalidRequest { template_id: String, reason: String },
}

pub type Handler = Box<dyn Fn(&str) -> String + Send + Sync>;

/// Deterministic backend: handlers keyed by template id receive the
/// rendered prompt and return the completion text.
#[derive(Default)]
pub struct StubBackend {
    handlers: BTreeMap<String, Handler>,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_handler<F>(mut self, template_id: &str, handler: F) -> Self
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        self.register(template_id, handler);
        self
    }

    pub fn register<F>(&mut self, template_id: &str, handler: F)
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        self.handlers.insert(template_id.to_string(), Box::new(handler));
    }

    pub fn handles(&self, template_id: &str) -> bool {
        self.handlers.contains_key(template_id)
    }
}

impl core::fmt::Debug for StubBackend {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("StubBackend")
            .field("templates", &self.handlers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Backend for StubBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Stub
    }

    fn call(&self, request: &PromptRequest) -> Result<RawCompletion, String> {
        let handler = self
            .handlers
            .get(&request.template_id)
            .ok_or_else(|| format!("no stub handler registered for {}", request.template_id))?;
        Ok(RawCompletion { text: handler(&request.rendered_prompt), latency_ms: 0 })
    }
}

/// Counts every call that reaches the wrapped backend.
pub struct Counting<B> {
    inner: B,
    calls: Arc<AtomicU64>,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> (Self, Arc<AtomicU64>) {
        let calls = Arc::new(AtomicU64::new(0));
        (Counting { inner, calls: calls.clone() }, calls)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn call(&self, request: &PromptRequest) -> Result<RawCompletion, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.call(request)
    }
}

pub type Validator = Box<dyn Fn(&str) -> Result<Value, Vec<String>> + Send + Sync>;

/// Response schemas by id. A validator receives raw model text and returns
/// the parsed JSON value or the list of violations.
#[derive(Default)]
pub struct SchemaRegistry {
    validators: BTreeMap<String, Validator>,
}

impl SchemaRegistry {
    pub fn register<F>(&mut self, schema_id: &str, validator: F)
    where
        F: Fn(&str) -> Result<Value, Vec<String>> + Send + Sync + 'static,
    {
        self.validators.insert(schema_id.to_string(), Box::new(validator));
    }

    pub fn contains(&self, schema_id: &str) -> bool {
        self.validators.contains_key(schema_id)
    }

    pub fn validate(&self, schema_id: &str, raw: &str) -> Option<Result<Value, Vec<String>>> {
        self.validators.get(schema_id).map(|v| v(raw))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuredText {
    pub value: Value,
    pub raw: String,
    pub attempts: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub retries: u32,
    /// Maximum number of backend calls for the lifetime of the gateway.
    pub call_budget: Option<u64>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { retries: DEFAULT_RETRIES, call_budget: None }
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    schemas: SchemaRegistry,
    config: GatewayConfig,
    calls: AtomicU64,
}

impl core::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.kind())
            .field("config", &self.config)
            .field("calls", &self.calls.load(Ordering::Relaxed))
            .finish()
    }
}

impl Gateway {
    pub fn new<B: Backend + 'static>(backend: B, schemas: SchemaRegistry, config: GatewayConfig) -> Self {
        Gateway {
            backend: Box::new(backend),
            schemas,
            config: GatewayConfig { retries: config.retries.max(1), ..config },
            calls: AtomicU64::new(0),
        }
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn config(&self) -> GatewayConfig {
        self.config
    }

    /// Backend calls made so far.
    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn reserve_call(&self, template_id: &str) -> Result<(), GatewayError> {
        let Some(budget) = self.config.call_budget else {
            self.calls.fetch_add(1, Ordering::SeqCst);
            return Ok(());
        };
        self.calls
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < budget).then_some(n + 1))
            .map(|_| ())
            .map_err(|_| GatewayError::BudgetExceeded { template_id: template_id.to_string(), budget })
    }

    /// Sends `request`, retrying transport failures up to the retry limit.
    pub fn complete(&self, request: &PromptRequest) -> Result<Completion, GatewayError> {
        request.check()?;
        let mut last = String::new();
        for attempt in 1..=self.config.retries {
            self.reserve_call(&request.template_id)?;
            match self.backend.call(request) {
                Ok(raw) => {
                    let mut text = raw.text;
                    truncate_chars(&mut text, request.max_output_chars);
                    return Ok(Completion {
                        text,
                        backend: self.backend.kind(),
                        attempts: attempt,
                        latency_ms: raw.latency_ms,
                    });
                }
                Err(message) => last = message,
            }
        }
        Err(GatewayError::Transport { template_id: request.template_id.clone(), message: last })
    }

    /// Sends `request` and re-prompts with the violation list until the
    /// output satisfies `schema_id` or the retry limit is reached.
    pub fn complete_structured(&self, request: &PromptRequest, schema_id: &str) -> Result<StructuredText, GatewayError> {
        if !self.schemas.contains(schema_id) {
            return Err(GatewayError::UnknownSchema(schema_id.to_string()));
        }
        let mut current = request.clone();
        current.response_schema_id = Some(schema_id.to_string());
        let mut last_raw = String::new();
        let mut violations = Vec::new();
        for attempt in 1..=self.config.retries {
            let completion = self.complete(&current)?;
            match self.schemas.validate(schema_id, &completion.text) {
                Some(Ok(value)) => {
                    return Ok(StructuredText { value, raw: completion.text, attempts: attempt });
                }
                Some(Err(v)) => {
                    violations = v;
                    last_raw = completion.text;
                    current.rendered_prompt = repair_prompt(&request.rendered_prompt, &last_raw, &violations);
                }
                None => return Err(GatewayError::UnknownSchema(schema_id.to_string())),
            }
        }
        Err(GatewayError::SchemaFailure {
            template_id: request.template_id.clone(),
            schema_id: schema_id.to_string(),
            attempts: self.config.retries,
            last_raw,
            violations,
        })
    }
}

/// Header that introduces the violation list on a schema-repair re-prompt.
pub const REPAIR_MARKER: &str = "Your previous answer was rejected.";

pub fn repair_prompt(original: &str, last_raw: &str, violations: &[String]) -> String {
    let mut out = String::from(original);
    out.push_str("\n\n");
    out.push_str(REPAIR_MARKER);
    out.push_str("\nPrevious answer:\n");
    out.push_str(last_raw);
    out.push_str("\nValidation errors:\n");
    for v in violations {
        out.push_str("- ");
        out.push_str(v);
        out.push('\n');
    }
    out.push_str("Return only a corrected JSON object.\n");
    out
}

fn truncate_chars(text: &mut String, max_chars: usize) {
    if let Some((idx, _)) = text.char_indices().nth(max_chars) {
        text.truncate(idx);
    }
}

/// Pulls the outermost JSON object out of model text, tolerating code
/// fences and surrounding prose.
pub fn json_object_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Parses the outermost JSON object of `text` into `T`.
pub fn parse_json_object<T: serde::de::DeserializeOwned>(text: &str) -> Result<(T, Value), Vec<String>> {
    let span = json_object_span(text).ok_or_else(|| alloc::vec!["no JSON object found".to_string()])?;
    let value: Value = serde_json::from_str(span).map_err(|e| alloc::vec![format!("invalid JSON: {e}")])?;
    let parsed = serde_json::from_value(value.clone()).map_err(|e| alloc::vec![format!("schema mismatch: {e}")])?;
    Ok((parsed, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn number_schema() -> SchemaRegistry {
        let mut reg = SchemaRegistry::default();
        reg.register("number.v1", |raw| {
            let (v, value): (BTreeMap<String, f64>, Value) = parse_json_object(raw)?;
            if v.contains_key("n") {
                Ok(value)
            } else {
                Err(vec!["missing field n".to_string()])
            }
        });
        reg
    }

    struct Unreachable;

    impl Backend for Unreachable {
        fn kind(&self) -> BackendKind {
            BackendKind::Remote
        }

        fn call(&self, _: &PromptRequest) -> Result<RawCompletion, String> {
            Err("connection refused".to_string())
        }
    }

    #[test]
    fn stub_echo_returns_fixed_text() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("echo.v1", |_| "fixed".to_string()),
            SchemaRegistry::default(),
            GatewayConfig::default(),
        );
        let c = gw.complete(&PromptRequest::new("echo.v1", "hello".into())).unwrap();
        assert_eq!(c.text, "fixed");
        assert_eq!(c.attempts, 1);
        assert_eq!(c.backend, BackendKind::Stub);
    }

    #[test]
    fn unreachable_remote_is_transport_error() {
        let gw = Gateway::new(Unreachable, SchemaRegistry::default(), GatewayConfig::default());
        let err = gw.complete(&PromptRequest::new("t.v1", "hi".into())).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { ref template_id, .. } if template_id == "t.v1"));
    }

    #[test]
    fn stub_is_deterministic() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("len.v1", |p| format!("{}", p.len())),
            SchemaRegistry::default(),
            GatewayConfig::default(),
        );
        let req = PromptRequest::new("len.v1", "abcdef".into());
        assert_eq!(gw.complete(&req).unwrap(), gw.complete(&req).unwrap());
    }

    #[test]
    fn structured_first_try() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("n.v1", |_| "```json\n{\"n\": 1}\n```".to_string()),
            number_schema(),
            GatewayConfig::default(),
        );
        let out = gw.complete_structured(&PromptRequest::new("n.v1", "go".into()), "number.v1").unwrap();
        assert_eq!(out.attempts, 1);
        assert_eq!(out.value["n"], 1.0);
    }

    #[test]
    fn structured_repairs_after_junk() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("n.v1", |p| {
                if p.contains(REPAIR_MARKER) {
                    "{\"n\": 2}".to_string()
                } else {
                    "junk".to_string()
                }
            }),
            number_schema(),
            GatewayConfig::default(),
        );
        let out = gw.complete_structured(&PromptRequest::new("n.v1", "go".into()), "number.v1").unwrap();
        assert_eq!(out.attempts, 2);
    }

    #[test]
    fn structured_exhaustion_is_schema_failure() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("n.v1", |_| "{\"m\": 1}".to_string()),
            number_schema(),
            GatewayConfig { retries: 3, call_budget: None },
        );
        let err = gw.complete_structured(&PromptRequest::new("n.v1", "go".into()), "number.v1").unwrap_err();
        match err {
            GatewayError::SchemaFailure { attempts, last_raw, violations, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(last_raw, "{\"m\": 1}");
                assert_eq!(violations, vec!["missing field n".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(gw.calls_made(), 3);
    }

    #[test]
    fn budget_caps_calls() {
        let (backend, counter) = Counting::new(StubBackend::new().with_handler("e.v1", |_| "x".into()));
        let gw = Gateway::new(backend, SchemaRegistry::default(), GatewayConfig { retries: 3, call_budget: Some(2) });
        let req = PromptRequest::new("e.v1", "p".into());
        gw.complete(&req).unwrap();
        gw.complete(&req).unwrap();
        let err = gw.complete(&req).unwrap_err();
        assert_eq!(err, GatewayError::BudgetExceeded { template_id: "e.v1".into(), budget: 2 });
        assert_eq!(counter.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let gw = Gateway::new(StubBackend::new(), SchemaRegistry::default(), GatewayConfig::default());
        assert!(matches!(
            gw.complete(&PromptRequest::new("x", "  ".into())),
            Err(GatewayError::InvalidRequest { .. })
        ));
    }

    #[test]
    fn output_is_truncated_to_cap() {
        let gw = Gateway::new(
            StubBackend::new().with_handler("long", |_| "ééééé".into()),
            SchemaRegistry::default(),
            GatewayConfig::default(),
        );
        let mut req = PromptRequest::new("long", "p".into());
        req.max_output_chars = 3;
        assert_eq!(gw.complete(&req).unwrap().text, "ééé");
    }
}
