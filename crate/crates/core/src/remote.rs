//! JSON-over-HTTP client shared by the remote LM, NLI and scorer backends.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteOptions {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    8
}

impl RemoteOptions {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteOptions {
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, Error)]
#[error("request {request_id} to {endpoint} failed: {message}")]
pub struct RemoteError {
    pub request_id: String,
    pub endpoint: String,
    pub status: Option<u16>,
    pub message: String,
    pub retryable: bool,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// Counting semaphore bounding concurrent requests.
struct InflightLimiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InflightLimiter);

impl InflightLimiter {
    fn new(limit: usize) -> Self {
        InflightLimiter { slots: Mutex::new(limit.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap();
        }
        *slots -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    options: RemoteOptions,
    agent: ureq::Agent,
    limiter: InflightLimiter,
    next_id: AtomicU64,
}

impl RemoteClient {
    pub fn new(options: RemoteOptions) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(options.timeout_ms))
            .build();
        let limiter = InflightLimiter::new(options.max_in_flight);
        RemoteClient { options, agent, limiter, next_id: AtomicU64::new(1) }
    }

    pub fn base_url(&self) -> &str {
        &self.options.base_url
    }

    /// POSTs `body` as JSON and decodes the JSON reply. Every endpoint we
    /// talk to is idempotent, so transport failures, 429 and 5xx replies are
    /// retried up to `max_retries` times under the same request id.
    pub fn post<Req, Resp>(&self, path: &str, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let request_id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let url = format!("{}{}", self.options.base_url.trim_end_matches('/'), path);
        let fail = |status: Option<u16>, message: String, retryable: bool| RemoteError {
            request_id: request_id.clone(),
            endpoint: path.to_string(),
            status,
            message,
            retryable,
        };
        let mut last = None;
        for attempt in 0..=self.options.max_retries {
            if attempt > 0 {
                log::debug!("retrying {request_id} ({path}), attempt {}", attempt + 1);
            }
            let _permit = self.limiter.acquire();
            let result = self
                .agent
                .post(&url)
                .set("x-request-id", &request_id)
                .send_json(body);
            match result {
                Ok(resp) => {
                    return resp
                        .into_json::<Resp>()
                        .map_err(|e| fail(Some(200), format!("malformed response: {e}"), false));
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let message = resp
                        .into_json::<ErrorBody>()
                        .map(|b| b.error)
                        .unwrap_or_else(|_| format!("HTTP {code}"));
                    let retryable = code == 429 || code >= 500;
                    let err = fail(Some(code), message, retryable);
                    if !retryable {
                        return Err(err);
                    }
                    last = Some(err);
                }
                Err(ureq::Error::Transport(t)) => {
                    last = Some(fail(None, t.to_string(), true));
                }
            }
        }
        Err(last.expect("at least one attempt is made"))
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Minimal scripted HTTP server for exercising the clients.

    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    pub type Handler = dyn Fn(&str, serde_json::Value) -> (u16, serde_json::Value) + Send + Sync;

    pub struct TestServer {
        pub url: String,
        pub requests: Arc<Mutex<Vec<(String, serde_json::Value)>>>,
        server: Arc<tiny_http::Server>,
        handle: Option<JoinHandle<()>>,
    }

    impl TestServer {
        pub fn start(handler: Box<Handler>) -> Self {
            let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
            let url = format!("http://{}", server.server_addr().to_ip().unwrap());
            let requests = Arc::new(Mutex::new(Vec::new()));
            let (srv, log) = (server.clone(), requests.clone());
            let handle = std::thread::spawn(move || {
                for mut req in srv.incoming_requests() {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let value: serde_json::Value =
                        serde_json::from_str(&body).unwrap_or(serde_json::Value::Null);
                    let path = req.url().to_string();
                    log.lock().unwrap().push((path.clone(), value.clone()));
                    let (code, reply) = handler(&path, value);
                    let resp = tiny_http::Response::from_string(reply.to_string())
                        .with_status_code(code);
                    let _ = req.respond(resp);
                }
            });
            TestServer { url, requests, server, handle: Some(handle) }
        }
    }

    impl Drop for TestServer {
        fn drop(&mut self) {
            self.server.unblock();
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }
}
