//! Blocking JSON-over-HTTP POST with bounded exponential backoff.
//!
//! Only transport failures (timeouts, refused connections) and 5xx statuses
//! are retried. Everything else surfaces immediately.

use std::thread;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base, 2*base, 4*base, ...
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HttpFailure {
    /// Gave up after retrying transient failures.
    Exhausted { attempts: u32, last: String },
    /// A non-retryable status or an unreadable body.
    Rejected { status: u16, body: String },
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Exhausted { attempts, last } => {
                write!(f, "gave up after {attempts} attempts: {last}")
            }
            HttpFailure::Rejected { status, body } => write!(f, "status {status}: {body}"),
        }
    }
}

enum Attempt {
    Done(Value),
    Transient(String),
    Fatal(HttpFailure),
}

fn attempt(agent: &ureq::Agent, url: &str, api_key: Option<&str>, body: &Value) -> Attempt {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = match req.send_json(body) {
        Ok(r) => r,
        Err(e) => return Attempt::Transient(e.to_string()),
    };
    let status = resp.status().as_u16();
    if status >= 500 {
        return Attempt::Transient(format!("status {status}"));
    }
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(e) => return Attempt::Transient(e.to_string()),
    };
    if !(200..300).contains(&status) {
        return Attempt::Fatal(HttpFailure::Rejected { status, body: text });
    }
    match serde_json::from_str(&text) {
        Ok(v) => Attempt::Done(v),
        Err(e) => Attempt::Fatal(HttpFailure::Rejected {
            status,
            body: format!("invalid JSON ({e}): {text}"),
        }),
    }
}

pub fn post_json(
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, HttpFailure> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(policy.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut last = String::new();
    for n in 0..=policy.max_retries {
        if n > 0 {
            thread::sleep(policy.delay(n - 1));
        }
        match attempt(&agent, url, api_key, body) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(f) => return Err(f),
            Attempt::Transient(msg) => {
                log::warn!("POST {url} attempt {} failed: {msg}", n + 1);
                last = msg;
            }
        }
    }
    Err(HttpFailure::Exhausted {
        attempts: policy.max_retries + 1,
        last,
    })
}
