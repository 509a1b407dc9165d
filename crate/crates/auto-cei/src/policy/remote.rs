//! Client for an OpenAI-compatible inference service.
//!
//! Sampling posts to `{api_base}/chat/completions`; finetuning uploads the
//! dataset to `{api_base}/files`, creates a job under
//! `{api_base}/fine_tuning/jobs` and polls it to completion. Transport
//! failures and 408/429/5xx responses are retried with exponential backoff
//! (up to `max_attempts`); other HTTP failures surface immediately with the
//! provider's message. A counting gate bounds concurrent in-flight requests
//! across threads sharing the handle.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Dataset;
use crate::env::RuleChainTask;
use crate::error::{Error, Result};
use crate::policy::GenerationConfig;

/// Environment variable naming the service root, e.g. `https://host/v1`.
pub const ENV_API_BASE: &str = "CEI_API_BASE";
/// Environment variable holding the bearer token.
pub const ENV_API_KEY: &str = "CEI_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteOptions {
    /// Service root; falls back to `CEI_API_BASE`.
    pub api_base: Option<String>,
    /// Bearer token; falls back to `CEI_API_KEY`. Optional — local mock
    /// servers need no auth.
    #[serde(skip_serializing, default)]
    pub api_key: Option<String>,
    /// Model id sampled from and used as the finetuning base.
    pub model: String,
    /// Maximum concurrent in-flight requests through this handle.
    pub max_in_flight: usize,
    /// Per-request timeout.
    pub timeout_ms: u64,
    /// Retry budget per logical request, including the first attempt.
    pub max_attempts: u32,
    /// First backoff delay; doubles per failed attempt.
    pub backoff_ms: u64,
    /// Delay between finetune-job status polls.
    pub poll_interval_ms: u64,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            api_base: None,
            api_key: None,
            model: String::new(),
            max_in_flight: 4,
            timeout_ms: 60_000,
            max_attempts: 5,
            backoff_ms: 1_000,
            poll_interval_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemotePolicy {
    options: RemoteOptions,
    api_base: String,
    model: String,
    base_model: String,
    client: Client,
    gate: Arc<Gate>,
}

impl RemotePolicy {
    /// Resolves endpoint and credentials (config first, environment second)
    /// and builds the HTTP client. No request is issued yet.
    pub fn connect(mut options: RemoteOptions) -> Result<RemotePolicy> {
        let api_base =
            options.api_base.clone().or_else(|| std::env::var(ENV_API_BASE).ok()).ok_or_else(
                || {
                    Error::RemoteConfig(format!(
                    "no API base: set backend.api_base or the {ENV_API_BASE} environment variable"
                ))
                },
            )?;
        let api_base = api_base.trim_end_matches('/').to_string();
        if options.model.is_empty() {
            return Err(Error::RemoteConfig("backend.model must be set".to_string()));
        }
        if options.max_in_flight == 0 {
            return Err(Error::RemoteConfig("backend.max_in_flight must be >= 1".to_string()));
        }
        if options.api_key.is_none() {
            options.api_key = std::env::var(ENV_API_KEY).ok();
        }
        let client =
            Client::builder().timeout(Duration::from_millis(options.timeout_ms)).build()?;
        Ok(RemotePolicy {
            gate: Arc::new(Gate::new(options.max_in_flight)),
            api_base,
            model: options.model.clone(),
            base_model: options.model.clone(),
            client,
            options,
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// The model finetuning restarts from (the initially configured one).
    pub fn base_model(&self) -> &str {
        &self.base_model
    }

    pub fn sample(
        &self,
        task: &RuleChainTask,
        k: usize,
        gen: &GenerationConfig,
    ) -> Result<Vec<String>> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": task.prompt()}],
            "n": k,
            "temperature": gen.temperature,
            "top_p": gen.top_p,
        });
        let url = format!("{}/chat/completions", self.api_base);
        let response = self.execute(|| self.request(self.client.post(&url)).json(&body))?;
        let payload: Value = response.json()?;
        let choices = payload
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::RemoteMalformed("completion response lacks choices".into()))?;
        if choices.len() != k {
            return Err(Error::RemoteMalformed(format!(
                "requested {k} completions, got {}",
                choices.len()
            )));
        }
        choices
            .iter()
            .map(|c| {
                c.pointer("/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Error::RemoteMalformed("choice lacks message.content".into()))
            })
            .collect()
    }

    /// Uploads the dataset, starts a finetuning job from the base model and
    /// polls until it finishes. Returns a handle on the new model.
    pub fn finetune(&self, dataset: &Dataset) -> Result<RemotePolicy> {
        let training = training_jsonl(dataset);
        let file_id = self.upload_file(training)?;

        let url = format!("{}/fine_tuning/jobs", self.api_base);
        let body = json!({ "training_file": file_id, "model": self.base_model });
        let response = self.execute(|| self.request(self.client.post(&url)).json(&body))?;
        let job: Value = response.json()?;
        let job_id = require_str(&job, "id")?.to_string();

        loop {
            let url = format!("{}/fine_tuning/jobs/{job_id}", self.api_base);
            let response = self.execute(|| self.request(self.client.get(&url)))?;
            let status: Value = response.json()?;
            match require_str(&status, "status")? {
                "succeeded" => {
                    let model = require_str(&status, "fine_tuned_model")?.to_string();
                    return Ok(RemotePolicy { model, ..self.clone() });
                }
                terminal @ ("failed" | "cancelled") => {
                    return Err(Error::RemoteJobFailed {
                        id: job_id,
                        status: terminal.to_string(),
                    });
                }
                _ => std::thread::sleep(Duration::from_millis(self.options.poll_interval_ms)),
            }
        }
    }

    fn upload_file(&self, training: String) -> Result<String> {
        let url = format!("{}/files", self.api_base);
        let response = self.execute(|| {
            let part = Part::bytes(training.clone().into_bytes()).file_name("training.jsonl");
            let form = Form::new().text("purpose", "fine-tune").part("file", part);
            self.request(self.client.post(&url)).multipart(form)
        })?;
        let payload: Value = response.json()?;
        Ok(require_str(&payload, "id")?.to_string())
    }

    fn request(&self, builder: RequestBuilder) -> RequestBuilder {
        match &self.options.api_key {
            Some(key) => builder.bearer_auth(key),
            None => builder,
        }
    }

    /// Sends a request built by `build`, retrying transport failures and
    /// retryable statuses with exponential backoff under the concurrency
    /// gate.
    fn execute(&self, build: impl Fn() -> RequestBuilder) -> Result<Response> {
        let mut failure = String::new();
        for attempt in 0..self.options.max_attempts {
            if attempt > 0 {
                // 1x, 2x, 4x, ... the base delay across successive retries.
                std::thread::sleep(Duration::from_millis(
                    self.options.backoff_ms.saturating_mul(1 << (attempt - 1).min(16)),
                ));
            }
            let _slot = self.gate.acquire();
            match build().send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return Ok(response);
                    }
                    let message = response.text().unwrap_or_default();
                    if !retryable_status(status) {
                        return Err(Error::RemoteRejected { status: status.as_u16(), message });
                    }
                    failure = format!("HTTP {status}: {message}");
                }
                Err(e) if e.is_timeout() || e.is_connect() => failure = e.to_string(),
                Err(e) => return Err(e.into()),
            }
            log::warn!("remote request attempt {} failed: {failure}", attempt + 1);
        }
        Err(Error::RetriesExhausted { attempts: self.options.max_attempts, message: failure })
    }
}

fn retryable_status(status: StatusCode) -> bool {
    status == StatusCode::REQUEST_TIMEOUT
        || status == StatusCode::TOO_MANY_REQUESTS
        || status.is_server_error()
}

fn require_str<'v>(payload: &'v Value, field: &str) -> Result<&'v str> {
    payload
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::RemoteMalformed(format!("response lacks string field {field:?}")))
}

/// Renders the dataset in the provider's chat finetuning format: one
/// `{"messages": [user, assistant]}` object per line.
fn training_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for record in &dataset.records {
        let line = json!({
            "messages": [
                {"role": "user", "content": record.prompt},
                {"role": "assistant", "content": record.completion},
            ]
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Counting gate bounding concurrent in-flight requests.
#[derive(Debug)]
struct Gate {
    slots: Mutex<usize>,
    freed: Condvar,
}

struct GateGuard<'g> {
    gate: &'g Gate,
}

impl Gate {
    fn new(slots: usize) -> Gate {
        Gate { slots: Mutex::new(slots), freed: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().expect("gate lock poisoned");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("gate lock poisoned");
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.gate.slots.lock().expect("gate lock poisoned");
        *slots += 1;
        self.gate.freed.notify_one();
    }
}
