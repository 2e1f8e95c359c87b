use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use uragc_providers::http::{Endpoint, HttpChat, HttpEmbedder};
use uragc_providers::limiter::RetryPolicy;
use uragc_providers::{embed, ChatProvider, ChatRequest, ProviderError};

/// Serves canned `(status, body)` replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
        bodies
    });
    (url, hits, handle)
}

fn fast(url: &str) -> Endpoint {
    let mut e = Endpoint::new(url, "test-model");
    e.retry = RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(5),
    };
    e
}

const OK_CHAT: &str = r#"{"id":"r","choices":[{"message":{"content":"Answer|A"}}]}"#;

#[test]
fn retries_twice_on_429_then_succeeds() {
    let (url, hits, handle) = serve(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, OK_CHAT.into()),
    ]);
    let chat = HttpChat::new(fast(&url)).unwrap();
    let resp = chat.chat(&ChatRequest::user("q").temperature(0.1)).unwrap();
    assert_eq!(resp.text, "Answer|A");
    assert_eq!(resp.retries, 2);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let bodies = handle.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[2]).unwrap();
    assert_eq!(sent["temperature"], serde_json::json!(0.1));
    assert_eq!(sent["model"], "test-model");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits, handle) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let chat = HttpChat::new(fast(&url)).unwrap();
    let err = chat.chat(&ChatRequest::user("q")).unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 400, .. }));
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn gives_up_after_three_attempts() {
    let (url, _, handle) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let chat = HttpChat::new(fast(&url)).unwrap();
    let err = chat.chat(&ChatRequest::user("q")).unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 503, .. }));
    handle.join().unwrap();
}

#[test]
fn embeddings_are_reordered_and_normalized() {
    let body = r#"{"data":[{"index":1,"embedding":[0.0,2.0]},{"index":0,"embedding":[3.0,4.0]}]}"#;
    let (url, _, handle) = serve(vec![(200, body.into())]);
    let e = HttpEmbedder::new(fast(&url)).unwrap();
    let v = embed(&e, &["a".into(), "b".into()]).unwrap();
    assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
    handle.join().unwrap();
}
