use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use specrag_core::config::Sampling;
use specrag_core::lm::{
    greedy_decode, CompletionChoice, CompletionRequest, LmBackend, LmError, RemoteLm, RemoteLmConfig, TableLm,
    TopLogprob,
};
use specrag_core::synth;

const TOP: usize = 5;

#[derive(Clone)]
struct Mock {
    table: Arc<TableLm>,
    calls: Arc<AtomicUsize>,
    max_prompt: usize,
}

/// Completions endpoint backed by a table: greedy continuation plus the
/// top-5 log-probs at each generated position.
async fn complete(State(m): State<Mock>, Json(req): Json<CompletionRequest>) -> Result<Json<CompletionChoice>, StatusCode> {
    m.calls.fetch_add(1, Ordering::SeqCst);
    if req.prompt_token_ids.len() > m.max_prompt {
        return Err(StatusCode::PAYLOAD_TOO_LARGE);
    }
    let mut ctx = req.prompt_token_ids.clone();
    let mut token_ids = Vec::new();
    let mut top_logprobs = Vec::new();
    for _ in 0..req.max_tokens {
        let dist = m.table.next_distribution(&ctx).unwrap();
        let mut all: Vec<(u32, f64)> = dist.iter().collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        top_logprobs.push(
            all.iter()
                .take(req.logprobs)
                .map(|&(token_id, logprob)| TopLogprob { token_id, logprob })
                .collect(),
        );
        let next = all[0].0;
        token_ids.push(next);
        ctx.push(next);
        if next == m.table.vocabulary().eos_id() {
            break;
        }
    }
    Ok(Json(CompletionChoice { token_ids, top_logprobs }))
}

fn spawn_mock(table: TableLm, max_prompt: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let state = Mock {
        table: Arc::new(table),
        calls: calls.clone(),
        max_prompt,
    };
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new().route("/v1/completions", post(complete)).with_state(state);
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    (format!("http://{addr}/v1/completions"), calls)
}

fn remote(url: &str, vocab: specrag_core::vocab::Vocabulary) -> RemoteLm {
    let mut cfg = RemoteLmConfig::new(url, "mock");
    cfg.top_logprobs = TOP;
    cfg.timeout = Duration::from_secs(5);
    RemoteLm::new(cfg, vocab).unwrap()
}

#[test]
fn top_k_view_and_absent_tokens() {
    let vocab = synth::vocabulary();
    let (table, _) = synth::table_pair(&vocab, 3);
    let (url, _) = spawn_mock(table.clone(), usize::MAX);
    let lm = remote(&url, vocab.clone());
    let ctx = vocab.tokenize("# Your answer:\n").unwrap();
    let remote_dist = lm.next_distribution(&ctx).unwrap();
    let local = table.next_distribution(&ctx).unwrap();
    let seen: Vec<(u32, f64)> = remote_dist.iter().collect();
    assert_eq!(seen.len(), TOP);
    for &(id, lp) in &seen {
        assert!((lp - local.logp(id)).abs() < 1e-12);
    }
    assert_eq!(remote_dist.argmax(), local.argmax());
    let absent = (0..vocab.len() as u32).find(|id| seen.iter().all(|s| s.0 != *id)).unwrap();
    assert_eq!(remote_dist.logp(absent), f64::NEG_INFINITY);
    let s = lm.score_token(&ctx, absent).unwrap();
    assert_eq!(s.log_ratio(), f64::NEG_INFINITY);
}

#[test]
fn remote_greedy_matches_table() {
    let vocab = synth::vocabulary();
    let (table, _) = synth::table_pair(&vocab, 4);
    let (url, calls) = spawn_mock(table.clone(), usize::MAX);
    let lm = remote(&url, vocab.clone());
    let ctx = vocab.tokenize("# Your answer:\n").unwrap();
    assert_eq!(
        lm.sample_k(&ctx, 12, &Sampling::Greedy).unwrap(),
        greedy_decode(&table, &ctx, 12).unwrap()
    );
    assert_eq!(calls.load(Ordering::SeqCst), 1, "one request per draft");
}

#[test]
fn oversized_prompt_is_context_too_long() {
    let vocab = synth::vocabulary();
    let (table, _) = synth::table_pair(&vocab, 5);
    let (url, _) = spawn_mock(table, 4);
    let lm = remote(&url, vocab.clone());
    let err = lm.next_distribution(&[0, 1, 2, 3, 4]).unwrap_err();
    assert!(matches!(err, LmError::ContextTooLong { len: 5, .. }));
}

#[test]
fn dead_endpoint_is_backend_unavailable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let lm = remote(&format!("http://127.0.0.1:{port}/v1/completions"), synth::vocabulary());
    assert!(matches!(lm.next_distribution(&[0]), Err(LmError::BackendUnavailable(_))));
}
