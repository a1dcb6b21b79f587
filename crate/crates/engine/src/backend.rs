//! Remote plan producer reached over HTTP (`ENGINE_LLM_URL`).

use std::time::Duration;

use scene4d_core::parser::{BackendError, PlanBackend, PlanRequest};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(20);

/// POSTs `{command, schema}` as JSON and expects the plan document back.
#[derive(Debug, Clone)]
pub struct HttpPlanBackend {
    url: String,
    // Always `Some` until dropped.
    client: Option<reqwest::blocking::Client>,
}

impl HttpPlanBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client: Some(client),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

/// Hands the client to a plain thread when dropped inside a tokio runtime.
impl Drop for HttpPlanBackend {
    fn drop(&mut self) {
        if let Some(client) = self.client.take() {
            if tokio::runtime::Handle::try_current().is_ok() {
                std::thread::spawn(move || drop(client));
            }
        }
    }
}

impl PlanBackend for HttpPlanBackend {
    fn request_plan(&self, request: &PlanRequest) -> Result<serde_json::Value, BackendError> {
        let resp = self.client.as_ref().expect("client is live").post(&self.url).json(request).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Unreachable(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Status(status.as_u16()));
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Body(e.to_string())
            }
        })?;
        serde_json::from_str(&text).map_err(|e| BackendError::Body(e.to_string()))
    }
}
