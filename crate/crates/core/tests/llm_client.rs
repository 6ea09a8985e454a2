mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use flowrag_core::llm::{LlmClient, LlmError, ModelRef};

use common::{completion, Stub};

fn model(stub: &Stub) -> ModelRef {
    ModelRef {
        backoff_ms: 1,
        timeout_ms: 5000,
        ..ModelRef::remote("m", stub.endpoint.as_str())
    }
}

#[test]
fn in_flight_requests_are_capped() {
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (a, p) = (active.clone(), peak.clone());
    let stub = Stub::start(move |_, _| {
        let now = a.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(30));
        a.fetch_sub(1, Ordering::SeqCst);
        (200, completion("The answer is TCP."))
    });
    let client = LlmClient::new(ModelRef {
        in_flight: 2,
        ..model(&stub)
    });
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| client.complete("go").unwrap());
        }
    });
    assert_eq!(stub.requests(), 8);
    assert_eq!(peak.load(Ordering::SeqCst), 2);
}

#[test]
fn backoff_doubles() {
    let stub = Stub::start(|_, _| (500, String::new()));
    let client = LlmClient::new(ModelRef {
        retries: 3,
        backoff_ms: 40,
        ..model(&stub)
    });
    let start = Instant::now();
    let err = client.complete("go").unwrap_err();
    // 40 + 80 + 160 ms of sleeping before the three retries
    assert!(
        start.elapsed() >= Duration::from_millis(280),
        "{:?}",
        start.elapsed()
    );
    assert!(
        matches!(err, LlmError::Transport { attempts: 4, .. }),
        "{err}"
    );
    assert_eq!(stub.requests(), 4);
}

#[test]
fn missing_response_field_is_protocol_error() {
    let stub = Stub::start(|_, _| (200, "{\"done\":true}".into()));
    let err = LlmClient::new(model(&stub)).complete("go").unwrap_err();
    assert!(matches!(err, LlmError::Protocol(_)), "{err}");
    assert_eq!(stub.requests(), 1);
}

#[test]
fn empty_prompt_is_not_sent() {
    let stub = Stub::start(|_, _| (200, completion("x")));
    let err = LlmClient::new(model(&stub)).complete("  \n").unwrap_err();
    assert!(matches!(err, LlmError::EmptyPrompt));
    assert_eq!(stub.requests(), 0);
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = LlmClient::new(ModelRef {
        retries: 1,
        backoff_ms: 1,
        ..ModelRef::remote("m", format!("http://127.0.0.1:{port}"))
    });
    assert!(matches!(
        client.complete("go"),
        Err(LlmError::Transport { attempts: 2, .. })
    ));
}
