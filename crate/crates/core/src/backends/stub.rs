//! HTTP server that replays canned responses, for integration tests and for
//! exercising clients without model servers.
//!
//! A fixture directory holds `<name>.response.json` files where `<name>` is
//! `detect`, `segment`, `caption` or `background`; each becomes the body of
//! every `POST /<name>` reply.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::BackendRole;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: String,
}

/// Canned replies keyed by request path.
#[derive(Debug, Clone, Default)]
pub struct StubRoutes {
    replies: BTreeMap<String, String>,
    /// The first `fail_first` requests get `503` regardless of path.
    fail_first: usize,
}

impl StubRoutes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reply(mut self, role: BackendRole, body: impl Into<String>) -> Self {
        self.replies.insert(role.path().to_owned(), body.into());
        self
    }

    pub fn fail_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    /// Loads every `<name>.response.json` present in `dir`.
    pub fn from_fixture_dir(dir: &Path) -> io::Result<Self> {
        let mut routes = Self::new();
        for role in BackendRole::ALL {
            let name = role.path().trim_start_matches('/');
            let file = dir.join(format!("{name}.response.json"));
            if file.exists() {
                let text = std::fs::read_to_string(&file)?;
                routes = routes.reply(role, text.trim_end());
            }
        }
        if routes.replies.is_empty() {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("no *.response.json fixtures in {}", dir.display()),
            ));
        }
        Ok(routes)
    }
}

pub struct StubServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a background thread.
    pub fn start(addr: &str, routes: StubRoutes) -> io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("stub server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let requests = Arc::new(Mutex::new(Vec::new()));
        let worker = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || serve(&server, &routes, &requests))
        };
        Ok(Self {
            server,
            addr,
            requests,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("request log poisoned").clone()
    }

    /// Serves until the process exits.
    pub fn wait(mut self) {
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

fn serve(server: &tiny_http::Server, routes: &StubRoutes, log: &Mutex<Vec<RecordedRequest>>) {
    let seen = AtomicUsize::new(0);
    let json = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    for mut request in server.incoming_requests() {
        let mut body = String::new();
        let _ = request.as_reader().read_to_string(&mut body);
        let path = request.url().to_owned();
        log.lock()
            .expect("request log poisoned")
            .push(RecordedRequest {
                path: path.clone(),
                body,
            });

        let n = seen.fetch_add(1, Ordering::SeqCst);
        let (status, reply) = if n < routes.fail_first {
            (503, r#"{"error":"stub: injected failure"}"#.to_owned())
        } else if *request.method() != tiny_http::Method::Post {
            (405, r#"{"error":"stub: only POST is served"}"#.to_owned())
        } else if let Some(reply) = routes.replies.get(&path) {
            (200, reply.clone())
        } else {
            (
                404,
                serde_json::json!({ "error": format!("stub: no fixture for {path}") }).to_string(),
            )
        };
        let response = tiny_http::Response::from_string(reply)
            .with_status_code(status)
            .with_header(json.clone());
        if let Err(e) = request.respond(response) {
            log::warn!("stub server failed to respond: {e}");
        }
    }
}
