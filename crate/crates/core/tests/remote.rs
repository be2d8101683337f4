use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use persona_games::gateway::{Backend, FinishReason, GatewayError, RemoteBackend, RemoteConfig};
use persona_games::model::GenerationParams;

/// Serves `replies` in order, one connection each, recording request bodies.
struct Server {
    url: String,
    bodies: Arc<Mutex<Vec<serde_json::Value>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let auth = Arc::new(Mutex::new(Vec::new()));
        let (b, a) = (bodies.clone(), auth.clone());
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                let mut token = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        token = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                b.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
                a.lock().unwrap().push(token);
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        Self {
            url,
            bodies,
            auth,
            handle: Some(handle),
        }
    }

    fn backend(&self, budget: u32) -> RemoteBackend {
        let mut config = RemoteConfig::new(&self.url, "base-24b");
        config.retry_budget = budget;
        config.backoff_ms = 1;
        config.timeout_ms = 5_000;
        config.auth_token = Some("sekret".into());
        RemoteBackend::new(config).unwrap()
    }

    fn finish(mut self) -> Vec<serde_json::Value> {
        self.handle.take().unwrap().join().unwrap();
        self.bodies.lock().unwrap().clone()
    }
}

fn ok(text: &str) -> (u16, String) {
    (200, serde_json::json!({"choices": [{"text": text, "finish_reason": "stop"}]}).to_string())
}

fn params() -> GenerationParams {
    let mut p = GenerationParams::generation(99);
    p.stop_sequences = vec!["Question:".into()];
    p.max_tokens = 32;
    p
}

#[test]
fn request_carries_the_wire_fields() {
    let server = Server::start(vec![ok(" I would send $4.")]);
    let c = server.backend(3).complete("Q?\nAnswer:", &params()).unwrap();
    assert_eq!(c.text, " I would send $4.");
    let auth = server.auth.lock().unwrap().clone();
    let bodies = server.finish();
    let body = &bodies[0];
    assert_eq!(body["model"], "base-24b");
    assert_eq!(body["prompt"], "Q?\nAnswer:");
    assert_eq!(body["max_tokens"], 32);
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["stop"], serde_json::json!(["Question:"]));
    assert_eq!(body["seed"], 99);
    assert_eq!(auth, [Some("Bearer sekret".to_string())]);
}

#[test]
fn server_errors_are_retried() {
    let server = Server::start(vec![(503, "{}".into()), (500, "{}".into()), ok("fine")]);
    let c = server.backend(3).complete("p", &params()).unwrap();
    assert_eq!(c.text, "fine");
    assert_eq!(server.finish().len(), 3);
}

#[test]
fn exhausted_budget_reports_unavailable() {
    let server = Server::start(vec![(502, "{}".into()), (502, "{}".into())]);
    let err = server.backend(2).complete("p", &params()).unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 2, .. }), "{err}");
    server.finish();
}

#[test]
fn client_errors_are_fatal() {
    let server = Server::start(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let err = server.backend(3).complete("p", &params()).unwrap_err();
    assert!(matches!(&err, GatewayError::BackendUnavailable { message, .. } if message.contains("401")), "{err}");
    assert_eq!(server.finish().len(), 1);
}

#[test]
fn malformed_bodies_are_rejected() {
    for body in ["not json", "{\"choices\": []}", "{\"choices\": [{\"index\": 0}]}"] {
        let server = Server::start(vec![(200, body.into())]);
        let err = server.backend(3).complete("p", &params()).unwrap_err();
        assert!(matches!(err, GatewayError::BackendMalformed(_)), "{body}: {err}");
        server.finish();
    }
}

#[test]
fn stop_sequences_are_enforced_client_side() {
    let server = Server::start(vec![
        ok(" I'd send $6.\nQuestion: next one"),
        (200, serde_json::json!({"choices": [{"text": "long", "finish_reason": "length"}]}).to_string()),
    ]);
    let backend = server.backend(1);
    let c = backend.complete("p", &params()).unwrap();
    assert_eq!(c.text, " I'd send $6.\n");
    assert_eq!(c.finish_reason, FinishReason::Stop);
    let c = backend.complete("p", &params()).unwrap();
    assert_eq!(c.finish_reason, FinishReason::Length);
    server.finish();
}
