mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use knowledge_probe::gateway::{
    Backend, BackendError, CacheStore, CompletionRequest, EndpointProfile, FnBackend, Gateway,
    GatewayError, HttpBackend,
};

const TOKEN: &str = "sk-test-9f8e7d6c5b4a";

struct Captured {
    head: String,
    body: String,
}

/// Serves `responses` in order, one connection each, recording every request.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured { head, body: String::from_utf8(buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn http_profile(url: &str) -> EndpointProfile {
    EndpointProfile {
        name: "local".into(),
        base_url: url.into(),
        model_id: "test-model".into(),
        auth_token_ref: "KPROBE_TEST_TOKEN_UNSET".into(),
        request_timeout: 5.0,
        max_parallel: 1,
        max_retries: 2,
        backoff_base: 0.0,
    }
}

#[test]
fn http_wire_format_and_bearer_header() {
    let (url, seen, handle) = serve(vec![
        (200, r#"{"choices":[{"text":" Paris\nQ: next"}]}"#.into()),
        (200, r#"{"choices":[{"text":"Paris"},{"text":"Lyon"}]}"#.into()),
    ]);
    let profile = http_profile(&url);
    let backend = HttpBackend::with_token(&profile, TOKEN.into()).unwrap();
    assert!(!format!("{backend:?}").contains(TOKEN));
    let cache_dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(profile, Arc::new(backend)).unwrap().with_cache(CacheStore::open(cache_dir.path()).unwrap());

    let greedy = gw.complete_batch(&[CompletionRequest::greedy("Q: capital of France?\nA:", 8)]).unwrap();
    assert_eq!(greedy.into_all().unwrap()[0].texts, vec![" Paris"]);
    let sampled = gw.complete_batch(&[CompletionRequest::sampled("Q: x?\nA:", 2, 8).with_seed(5)]).unwrap();
    assert_eq!(sampled.into_all().unwrap()[0].texts, vec!["Paris", "Lyon"]);
    handle.join().unwrap();

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let head = seen[0].head.to_ascii_lowercase();
    assert!(head.starts_with("post /v1/completions "), "{head}");
    assert!(head.contains(&format!("authorization: bearer {}", TOKEN.to_ascii_lowercase())));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["prompt"], "Q: capital of France?\nA:");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["n"], 1);
    assert_eq!(body["max_tokens"], 8);
    assert!(body.get("top_k").is_none() && body.get("seed").is_none());
    let body: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["top_k"], 40);
    assert_eq!(body["temperature"], 0.5);
    assert_eq!(body["seed"], 5);

    let files = walk(cache_dir.path());
    assert_eq!(files.len(), 2);
    for f in files {
        assert!(!std::fs::read_to_string(f).unwrap().contains(TOKEN));
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn http_auth_failure_and_retry() {
    let (url, _, handle) = serve(vec![
        (401, "{}".into()),
        (503, "{}".into()),
        (200, r#"{"choices":[{"text":"ok"}]}"#.into()),
        (200, r#"{"choices":"not a list"}"#.into()),
    ]);
    let profile = http_profile(&url);
    let gw = Gateway::new(profile.clone(), Arc::new(HttpBackend::with_token(&profile, TOKEN.into()).unwrap())).unwrap();
    let err = gw.complete(&CompletionRequest::greedy("a", 4)).unwrap_err();
    assert_eq!(err.kind(), "AuthError");
    assert!(!err.to_string().contains(TOKEN));
    let ok = gw.complete(&CompletionRequest::greedy("b", 4)).unwrap();
    assert_eq!((ok.texts[0].as_str(), ok.attempts_used), ("ok", 2));
    let err = gw.complete(&CompletionRequest::greedy("c", 4)).unwrap_err();
    assert_eq!(err.kind(), "MalformedResponse");
    handle.join().unwrap();
}

#[test]
fn missing_token_names_the_variable() {
    let profile = http_profile("http://127.0.0.1:9");
    let err = HttpBackend::from_profile(&profile).unwrap_err();
    assert!(err.to_string().contains("KPROBE_TEST_TOKEN_UNSET"));
}

#[test]
fn batch_concurrency_is_bounded() {
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (f, p) = (Arc::clone(&in_flight), Arc::clone(&peak));
    let backend = FnBackend::new("slow", move |r: &CompletionRequest| {
        let now = f.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(3));
        f.fetch_sub(1, Ordering::SeqCst);
        Ok(vec![r.prompt.clone()])
    });
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(backend)).unwrap();
    let reqs: Vec<_> = (0..100).map(|i| CompletionRequest::greedy(format!("p{i}"), 4)).collect();
    let out = gw.complete_batch(&reqs).unwrap().into_all().unwrap();
    let texts: Vec<String> = out.into_iter().map(|r| r.texts[0].clone()).collect();
    assert_eq!(texts, (0..100).map(|i| format!("p{i}")).collect::<Vec<_>>());
    let peak = peak.load(Ordering::SeqCst);
    assert!((2..=8).contains(&peak), "peak {peak}");
}

#[test]
fn batch_failures_keep_positions() {
    let backend = FnBackend::new("flaky", |r: &CompletionRequest| match r.prompt.as_str() {
        "p13" | "p42" => Err(BackendError::Auth("denied".into())),
        p => Ok(vec![p.to_string()]),
    });
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(backend)).unwrap();
    let reqs: Vec<_> = (0..50).map(|i| CompletionRequest::greedy(format!("p{i}"), 4)).collect();
    let outcome = gw.complete_batch(&reqs).unwrap();
    assert_eq!(outcome.results[12].as_ref().unwrap().texts, vec!["p12"]);
    let err = outcome.into_all().unwrap_err();
    assert_eq!(err.positions(), vec![13, 42]);
    assert_eq!(err.total, 50);
    assert!(matches!(gw.complete_batch(&[]), Err(GatewayError::EmptyBatch)));
}

#[test]
fn transient_errors_exhaust_retries() {
    let backend = FnBackend::new("down", |_: &CompletionRequest| Err(BackendError::Status(503)));
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(backend)).unwrap();
    match gw.complete(&CompletionRequest::greedy("x", 4)) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("{other:?}"),
    }
    assert_eq!(gw.stats().backend_calls(), 4);
}

fn counting_gateway(dir: &std::path::Path) -> (Gateway, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = Arc::clone(&calls);
    let backend = FnBackend::new("echo", move |r: &CompletionRequest| {
        c.fetch_add(1, Ordering::SeqCst);
        Ok((0..r.n_samples).map(|i| format!("{} #{i}", r.prompt)).collect())
    });
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(backend)).unwrap().with_cache(CacheStore::open(dir).unwrap());
    (gw, calls)
}

#[test]
fn cache_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let reqs: Vec<_> = (0..20).map(|i| CompletionRequest::sampled(format!("q{i}"), 3, 8).with_seed(i)).collect();
    let (gw, calls) = counting_gateway(dir.path());
    let first = gw.complete_batch(&reqs).unwrap().into_all().unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 20);

    let (gw2, calls2) = counting_gateway(dir.path());
    let second = gw2.complete_batch(&reqs).unwrap().into_all().unwrap();
    assert_eq!(calls2.load(Ordering::SeqCst), 0);
    assert_eq!(gw2.stats().cache_hits(), 20);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.texts, b.texts);
        assert!(!a.from_cache && b.from_cache);
    }
}

#[test]
fn corrupt_cache_entry_is_requeried() {
    let dir = tempfile::tempdir().unwrap();
    let req = CompletionRequest::sampled("q", 2, 8).with_seed(1);
    let (gw, calls) = counting_gateway(dir.path());
    let fresh = gw.complete_batch(std::slice::from_ref(&req)).unwrap().into_all().unwrap();
    let path = gw.cache().unwrap().entry_path(&gw.key_fields(&req).digest());
    std::fs::write(&path, "{\"key\": tru").unwrap();
    let again = gw.complete_batch(std::slice::from_ref(&req)).unwrap().into_all().unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    assert_eq!(fresh[0].texts, again[0].texts);
    let healed = gw.complete_batch(std::slice::from_ref(&req)).unwrap().into_all().unwrap();
    assert!(healed[0].from_cache);
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn backend_trait_is_object_safe() {
    let b: Arc<dyn Backend> = Arc::new(FnBackend::new("x", |_: &CompletionRequest| Ok(vec![])));
    assert_eq!(b.backend_id(), "x");
}
