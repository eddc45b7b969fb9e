//! The hosted-model client against a local stub HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use csi_core::gateway::{
    Backend, BackendError, DialogLine, Gateway, GatewayConfig, GatewayError, GatewayRequest, LineRole, RemoteBackend,
    RemoteConfig, SessionContext,
};
use csi_core::message::AuthorKind;
use csi_core::time::ParticipantId;
use serde_json::{json, Value};

struct Reply {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
    delay: Duration,
}

fn ok(content: &str) -> Reply {
    Reply {
        status: 200,
        headers: vec![],
        body: json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        delay: Duration::ZERO,
    }
}

fn status(code: u16) -> Reply {
    Reply {
        status: code,
        headers: vec![],
        body: "{}".into(),
        delay: Duration::ZERO,
    }
}

/// Serves `replies` in order, one per connection; returns the url and the
/// received (authorization, body) pairs.
fn stub(replies: Vec<Reply>) -> (String, mpsc::Receiver<(String, Value)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "authorization" => auth = value.trim().to_owned(),
                    "content-length" => length = value.trim().parse().unwrap(),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send((auth, serde_json::from_slice(&body).unwrap()));
            thread::sleep(reply.delay);
            let mut out = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                reply.status,
                reply.body.len()
            );
            for (k, v) in &reply.headers {
                out += &format!("{k}: {v}\r\n");
            }
            out += "\r\n";
            out += &reply.body;
            let mut stream = stream;
            let _ = stream.write_all(out.as_bytes());
        }
    });
    (url, rx)
}

fn label_request() -> GatewayRequest {
    let context = SessionContext {
        session_id: "s".into(),
        question: "Which?".into(),
        options: vec!["A".into(), "B".into()],
    };
    let who = ParticipantId("u1".into());
    let payload = vec![DialogLine::new(who.clone(), AuthorKind::Human, "A is great", LineRole::New)];
    GatewayRequest::label(context, 0, 1, payload, vec![who])
}

fn backend(url: String, timeout: Duration) -> RemoteBackend {
    let mut config = RemoteConfig::new(url, "secret");
    config.timeout = timeout;
    RemoteBackend::new(config).unwrap()
}

#[test]
fn sends_the_request_and_returns_message_content() {
    let content = r#"{"labels":[{"user":"u1","option":"A","score":2}]}"#;
    let (url, seen) = stub(vec![ok(content)]);
    let remote = backend(url, Duration::from_secs(5));
    let request = label_request();
    assert_eq!(remote.complete(&request, &request.prompt()).unwrap(), content);

    let (auth, body) = seen.recv().unwrap();
    assert_eq!(auth, "Bearer secret");
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["response_format"]["type"], "json_object");
    assert_eq!(body["messages"][0]["role"], "system");
    assert!(body["messages"][1]["content"].as_str().unwrap().contains("A is great"));
}

#[test]
fn rate_limit_is_retried_after_the_advertised_delay() {
    let mut limited = status(429);
    limited.headers.push(("Retry-After", "0".into()));
    let (url, _seen) = stub(vec![limited, ok(r#"{"labels":[{"user":"u1","option":"A","score":3}]}"#)]);
    let gateway = Gateway::new(backend(url, Duration::from_secs(5)));
    let labels = gateway.call(&label_request()).unwrap().into_labels().unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0].score, 3);
}

#[test]
fn rate_limit_reports_retry_after() {
    let mut limited = status(429);
    limited.headers.push(("Retry-After", "7".into()));
    let (url, _seen) = stub(vec![limited]);
    let remote = backend(url, Duration::from_secs(5));
    let request = label_request();
    assert_eq!(
        remote.complete(&request, &request.prompt()),
        Err(BackendError::RateLimited {
            retry_after: Some(Duration::from_secs(7))
        })
    );
}

#[test]
fn persistent_rate_limit_gives_up() {
    let (url, _seen) = stub((0..2).map(|_| status(429)).collect());
    let config = GatewayConfig {
        rate_limit_attempts: 2,
        base_backoff: Duration::from_millis(1),
        ..GatewayConfig::default()
    };
    let gateway = Gateway::with_config(backend(url, Duration::from_secs(5)), config);
    assert_eq!(gateway.call(&label_request()).unwrap_err(), GatewayError::RateLimited(2));
}

#[test]
fn server_error_is_a_backend_error() {
    let (url, _seen) = stub(vec![status(500)]);
    let gateway = Gateway::new(backend(url, Duration::from_secs(5)));
    assert!(matches!(gateway.call(&label_request()), Err(GatewayError::BackendError(m)) if m.contains("500")));
}

#[test]
fn slow_server_times_out() {
    let mut slow = ok("{}");
    slow.delay = Duration::from_millis(800);
    let (url, _seen) = stub(vec![slow]);
    let gateway = Gateway::new(backend(url, Duration::from_millis(200)));
    assert_eq!(gateway.call(&label_request()).unwrap_err(), GatewayError::Timeout);
}

#[test]
fn unparseable_output_is_retried_once() {
    let (url, _seen) = stub(vec![ok("not json"), ok(r#"{"labels":[]}"#)]);
    let gateway = Gateway::new(backend(url, Duration::from_secs(5)));
    assert_eq!(gateway.call(&label_request()).unwrap().into_labels().unwrap(), vec![]);

    let (url, _seen) = stub(vec![ok("nope"), ok("still nope")]);
    let gateway = Gateway::new(backend(url, Duration::from_secs(5)));
    assert!(matches!(gateway.call(&label_request()), Err(GatewayError::BackendError(_))));
}
