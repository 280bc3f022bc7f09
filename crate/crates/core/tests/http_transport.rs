mod common;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use common::Rig;
use specrag_core::config::{ProtocolConfig, Sampling};
use specrag_core::lm::LmBackend;
use specrag_core::protocol::{
    spawn_draft_server, DraftRequest, DraftService, DraftTransport, HttpTransport, InProcessTransport,
    ProtocolError, RetryPolicy, TappedTransport, TransportError, CLIENT_TO_SERVER_FIELDS,
};
use specrag_core::synth;

fn quick_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 2,
        backoff: Duration::from_millis(10),
    }
}

fn raw_post(addr: std::net::SocketAddr, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    let status = out[9..12].parse().unwrap();
    let body = out.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}

#[test]
fn http_and_in_process_sessions_match() {
    let rig = Rig::plain(1);
    let server = spawn_draft_server(
        Arc::new(DraftService::new(rig.server.clone(), "table")),
        "127.0.0.1:0",
        Duration::from_secs(10),
    )
    .unwrap();
    let http = HttpTransport::new(server.base_url(), Duration::from_secs(10), quick_retry()).unwrap();
    assert_eq!(http.meta().unwrap().vocab_digest, *rig.server.vocabulary().digest());
    for seed in 0..10 {
        let mut r = synth::rng(seed);
        let q = synth::query(&mut r);
        let p = synth::plain_profile(&mut r, "u", 5);
        let c = ProtocolConfig {
            max_new_tokens: 30,
            sampling: Sampling::nucleus(seed),
            ..ProtocolConfig::default()
        };
        let a = rig.orch().run_session("s", &q, &p, &c).unwrap();
        let mut o = rig.orch();
        o.transport = &http;
        let b = o.run_session("s", &q, &p, &c).unwrap();
        assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl());
    }
    server.shutdown().unwrap();
}

#[test]
fn stateless_server_repeats_itself() {
    let rig = Rig::plain(2);
    let svc = DraftService::new(rig.server.clone(), "table");
    let req = DraftRequest {
        session_id: "a".into(),
        server_history_text: rig.templates.render_gen("how do I bake bread?"),
        k: 8,
        sampling: Sampling::nucleus(5),
        vocab_digest: rig.server.vocabulary().digest().clone(),
    };
    let first = svc.serve(&req).unwrap();
    // an unrelated request in between changes nothing
    let mut other = req.clone();
    other.session_id = "b".into();
    other.server_history_text.push_str(" garden");
    svc.serve(&other).unwrap();
    assert_eq!(svc.serve(&req).unwrap(), first);
}

#[test]
fn wire_errors_map_to_statuses() {
    let rig = Rig::plain(3);
    let server = spawn_draft_server(
        Arc::new(DraftService::new(Arc::new(rig.server.as_ref().clone().with_max_context(20)), "t")),
        "127.0.0.1:0",
        Duration::from_secs(10),
    )
    .unwrap();
    let (status, body) = raw_post(server.addr(), "/v1/draft", "{not json");
    assert_eq!(status, 400, "{body}");
    assert!(body.contains("\"error_kind\""));

    let mut req = serde_json::json!({
        "session_id": "s",
        "server_history_text": "hi",
        "k": 3,
        "sampling": {"mode": "greedy"},
        "vocab_digest": rig.server.vocabulary().digest(),
    });
    let (status, _) = raw_post(server.addr(), "/v1/draft", &req.to_string());
    assert_eq!(status, 200);

    req["profile"] = serde_json::json!("secret");
    let (status, _) = raw_post(server.addr(), "/v1/draft", &req.to_string());
    assert_eq!(status, 400, "unknown fields are refused");

    let http = HttpTransport::new(server.base_url(), Duration::from_secs(10), quick_retry()).unwrap();
    let long = DraftRequest {
        session_id: "s".into(),
        server_history_text: "x".repeat(50),
        k: 2,
        sampling: Sampling::Greedy,
        vocab_digest: rig.server.vocabulary().digest().clone(),
    };
    assert!(matches!(
        http.request_draft(&long),
        Err(TransportError::Remote(ProtocolError::ContextTooLong { .. }))
    ));
    let mut wrong = long.clone();
    wrong.server_history_text = "x".into();
    wrong.vocab_digest = synth::divergent_pair().0.vocabulary().digest().clone();
    assert!(matches!(
        http.request_draft(&wrong),
        Err(TransportError::Remote(ProtocolError::VocabularyMismatch { .. }))
    ));
}

#[test]
fn dead_endpoint_is_unreachable_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let http = HttpTransport::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2), quick_retry()).unwrap();
    match http.meta() {
        Err(TransportError::Unreachable { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn request_carries_only_the_allowed_fields() {
    let rig = Rig::plain(4);
    let tapped = TappedTransport::new(InProcessTransport::new(Arc::new(DraftService::new(rig.server.clone(), "t"))));
    let mut o = rig.orch();
    o.transport = &tapped;
    let mut r = synth::rng(4);
    let q = synth::query(&mut r);
    let p = synth::plain_profile(&mut r, "u", 5);
    o.run_session("s", &q, &p, &ProtocolConfig::default()).unwrap();
    let captured = tapped.captured();
    assert!(!captured.is_empty());
    let allowed: BTreeSet<&str> = CLIENT_TO_SERVER_FIELDS.iter().copied().collect();
    for bytes in captured {
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, allowed);
        let text = v["server_history_text"].as_str().unwrap();
        for doc in &p.docs {
            assert!(!text.contains(&doc.text), "profile text reached the server");
        }
    }
}
