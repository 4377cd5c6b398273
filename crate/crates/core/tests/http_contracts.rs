//! Wire contracts of the HTTP backends, exercised against a local server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use stylepipe_core::eval::{HttpClassifier, StyleJudge};
use stylepipe_core::inference::{Generator, HttpGenerator};
use stylepipe_core::mt::{MtBackendSpec, MtClient, MtKind, RetryPolicy, TranslationCache};
use stylepipe_core::retrieval::{EmbedError, Embedder, HttpEmbedder};

#[derive(Debug, Clone)]
struct Seen {
    body: Value,
    auth: Option<String>,
}

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

/// Serves `respond(request_number, body) -> (status, body)` until the test ends.
fn serve<F>(respond: F) -> Server
where
    F: Fn(usize, &Value) -> (u16, Value) + Send + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let count = AtomicUsize::new(0);
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            log.lock().unwrap().push(Seen {
                body: body.clone(),
                auth,
            });
            let (status, reply) = respond(count.fetch_add(1, Ordering::SeqCst), &body);
            let response = tiny_http::Response::from_string(reply.to_string()).with_status_code(status);
            req.respond(response).unwrap();
        }
    });
    Server { url, seen }
}

fn mt_client(url: &str, key: Option<&str>) -> MtClient {
    let spec = MtBackendSpec {
        backend_id: "remote".into(),
        kind: MtKind::Http { endpoint: url.into() },
        src_lang: "en".into(),
        tgt_lang: "zh".into(),
        model_tag: "m1".into(),
    };
    MtClient::from_spec(spec, Arc::new(TranslationCache::in_memory()), key.map(String::from))
        .unwrap()
        .with_retry(RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            jitter: false,
        })
}

fn upper(body: &Value) -> Value {
    let texts: Vec<String> = body["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_str().unwrap().to_uppercase())
        .collect();
    json!({ "translations": texts })
}

#[test]
fn mt_request_shape_auth_and_retry() {
    let server = serve(|n, body| if n == 0 { (503, json!({})) } else { (200, upper(body)) });
    let client = mt_client(&server.url, Some("sekret"));
    let out = client.translate(&["hello there".into(), "bye".into()]).unwrap();
    let texts: Vec<_> = out.into_iter().map(|r| r.unwrap().text).collect();
    assert_eq!(texts, ["HELLO THERE", "BYE"]);
    assert_eq!(client.calls(), 2);
    let seen = server.seen.lock().unwrap().clone();
    assert_eq!(seen[1].body, json!({"src": "en", "tgt": "zh", "texts": ["hello there", "bye"]}));
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer sekret"));

    // Cached now: no further requests.
    let again = client.translate(&["bye".into()]).unwrap();
    assert!(again[0].as_ref().unwrap().cache_hit);
    assert_eq!(client.calls(), 2);
}

#[test]
fn mt_batches_and_reports_item_failures() {
    let server = serve(|_, body| {
        if body["texts"].as_array().unwrap().iter().any(|t| t == "poison") {
            (500, json!({}))
        } else {
            (200, upper(body))
        }
    });
    let client = mt_client(&server.url, None).with_batch_size(32).with_max_in_flight(2);
    let mut batch: Vec<String> = (0..70).map(|i| format!("line {i}")).collect();
    batch[69] = "poison".into();
    let out = client.translate(&batch).unwrap();
    // Chunks of 32, 32 and 6; the last one fails three times.
    assert_eq!(client.calls(), 2 + 3);
    assert!(out[..64].iter().all(|r| r.is_ok()));
    assert!(out[64..].iter().all(|r| r.is_err()));
    assert!(server.seen.lock().unwrap()[0].auth.is_none());
}

#[test]
fn mt_wrong_count_is_malformed() {
    let server = serve(|_, _| (200, json!({"translations": ["only one"]})));
    let client = mt_client(&server.url, None);
    let out = client.translate(&["a b".into(), "c d".into()]).unwrap();
    assert!(out.iter().all(|r| r.is_err()));
}

#[test]
fn generation_contract() {
    let server = serve(|_, body| (200, json!({"text": format!("echo:{}", body["prompt"].as_str().unwrap())})));
    let llm = HttpGenerator::new(server.url.clone(), "llama-ft".into(), 64, 0.0, Some("k".into())).unwrap();
    assert_eq!(llm.generate("Rewrite this").unwrap(), "echo:Rewrite this");
    let seen = server.seen.lock().unwrap().clone();
    assert_eq!(
        seen[0].body,
        json!({"model": "llama-ft", "prompt": "Rewrite this", "max_tokens": 64, "temperature": 0.0})
    );
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer k"));

    let failing = serve(|_, _| (429, json!({})));
    let llm = HttpGenerator::new(failing.url.clone(), "m".into(), 8, 0.0, None).unwrap();
    assert!(llm.generate("x").is_err());
}

#[test]
fn embedder_contract() {
    let server = serve(|_, body| {
        let n = body["texts"].as_array().unwrap().len();
        (200, json!({"vectors": vec![[3.0, 4.0, 0.0]; n]}))
    });
    let embedder = HttpEmbedder::new(server.url.clone(), "e5", 3).unwrap();
    let v = embedder.embed("some text").unwrap();
    assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    assert_eq!(embedder.fingerprint(), "http_service:e5:dim=3");
    assert_eq!(server.seen.lock().unwrap()[0].body, json!({"texts": ["some text"]}));

    let wrong_dim = HttpEmbedder::new(server.url.clone(), "e5", 4).unwrap();
    assert!(matches!(wrong_dim.embed("x"), Err(EmbedError::DimMismatch { expected: 4, found: 3 })));
}

#[test]
fn classifier_contract() {
    let server = serve(|_, body| {
        let labels: Vec<u8> = body["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| u8::from(t.as_str().unwrap().contains("shall")))
            .collect();
        (200, json!({ "labels": labels }))
    });
    let judge = HttpClassifier::new(server.url.clone(), "bert-irs").unwrap();
    let got = judge.predict(&["you shall remit".into(), "just pay".into()]).unwrap();
    assert_eq!(got, [true, false]);

    let bad = serve(|_, _| (200, json!({"labels": [2]})));
    let judge = HttpClassifier::new(bad.url.clone(), "x").unwrap();
    assert!(judge.predict(&["a".into()]).is_err());
}
