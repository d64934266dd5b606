//! The HTTP scorer client against an in-process mock of the model service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kgc_core::kg::{Direction, Query, Triple};
use kgc_core::prompt::Prompt;
use kgc_core::remote::RemoteScorer;
use kgc_core::retriever::{make_cloze, ClozeInstance, ClozeTarget};
use kgc_core::scorer::{FinetuneConfig, Scorer};
use kgc_core::{Error, ScorerError};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    body: Value,
}

type Handler = dyn Fn(&Seen) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut length = 0;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    let body = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).ok()?
    };
    Some(Seen { method, path, body })
}

fn serve(handler: Box<Handler>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(request) = read_request(&mut stream) else { continue };
            let (status, body) = handler(&request);
            log.lock().unwrap().push(request);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Mock { url, seen }
}

fn client(mock: &Mock) -> RemoteScorer {
    RemoteScorer::new(&mock.url, Duration::from_secs(5)).unwrap()
}

fn masked() -> ClozeInstance {
    let prompt = Prompt::parse("born_in", "[X] was born in [Y]");
    let q = Query::tail("q1", "born_in");
    make_cloze(ClozeTarget::Query(&q), &[prompt], Some("Alba lies in Piedmont."), |e| e.to_uppercase())
        .pop()
        .unwrap()
}

fn filled(label: u8) -> ClozeInstance {
    let prompt = Prompt::parse("born_in", "[X] was born in [Y]");
    let t = Triple::new("q1", "born_in", "alba");
    let target = ClozeTarget::Triple {
        triple: &t,
        direction: Direction::Tail,
        label,
    };
    make_cloze(target, &[prompt], None, |e| e.to_uppercase()).pop().unwrap()
}

#[test]
fn health_reports_model() {
    let mock = serve(Box::new(|_| (200, r#"{"status":"ok","model":"bert-base"}"#.into())));
    let h = client(&mock).health().unwrap();
    assert_eq!((h.status.as_str(), h.model.as_str()), ("ok", "bert-base"));
    let seen = mock.seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("GET", "/v1/health"));
}

#[test]
fn score_cloze_sends_rendered_text_and_candidates() {
    let mock = serve(Box::new(|_| (200, r#"{"probs":[0.25,0.75]}"#.into())));
    let candidates = vec!["Alba".to_string(), "Turin".to_string()];
    let inst = masked();
    let probs = client(&mock).score_cloze(&inst, &candidates).unwrap();
    assert_eq!(probs, vec![0.25, 0.75]);
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/score_cloze");
    assert_eq!(seen[0].body, json!({"text": inst.render(), "candidates": ["Alba", "Turin"]}));
}

#[test]
fn score_cloze_rejects_bad_distributions() {
    let mock = serve(Box::new(|_| (200, r#"{"probs":[0.5]}"#.into())));
    let two = vec!["a".to_string(), "b".to_string()];
    let e = client(&mock).score_cloze(&masked(), &two).unwrap_err();
    assert!(matches!(e, ScorerError::Protocol(_)), "{e:?}");

    let mock = serve(Box::new(|_| (200, r#"{"probs":[0.5,0.6]}"#.into())));
    let e = client(&mock).score_cloze(&masked(), &two).unwrap_err();
    assert!(matches!(e, ScorerError::Protocol(_)), "{e:?}");
}

#[test]
fn classify_returns_scores_and_checks_sum() {
    let mock = serve(Box::new(|_| (200, r#"{"c0":0.3,"c1":0.7}"#.into())));
    let inst = filled(1);
    let s = client(&mock).classify(&inst).unwrap();
    assert_eq!((s.c0, s.c1), (0.3, 0.7));
    assert_eq!(mock.seen.lock().unwrap()[0].body, json!({"text": inst.render()}));

    let mock = serve(Box::new(|_| (200, r#"{"c0":0.3,"c1":0.3}"#.into())));
    assert!(matches!(client(&mock).classify(&inst), Err(ScorerError::Protocol(_))));
}

#[test]
fn finetune_posts_labeled_instances() {
    let mock = serve(Box::new(|_| (200, r#"{"model_version":"ft-7"}"#.into())));
    let mut scorer = client(&mock);
    let config = FinetuneConfig {
        epochs: 3,
        ..FinetuneConfig::default()
    };
    let report = scorer.finetune(&[filled(1), filled(0)], &config).unwrap();
    assert_eq!(report.model_version, "ft-7");
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/finetune");
    let body = &seen[0].body;
    assert_eq!(body["m_ratio"], json!(30));
    assert_eq!(body["epochs"], json!(3));
    let labels: Vec<&Value> = body["instances"].as_array().unwrap().iter().map(|i| &i["label"]).collect();
    assert_eq!(labels, vec![&json!(1), &json!(0)]);
}

#[test]
fn finetune_needs_labels() {
    let mock = serve(Box::new(|_| (200, r#"{"model_version":"x"}"#.into())));
    let mut unlabeled = filled(1);
    unlabeled.label = None;
    let e = client(&mock).finetune(&[unlabeled], &FinetuneConfig::default()).unwrap_err();
    assert!(matches!(e, Error::Invalid(_)), "{e:?}");
    assert!(mock.seen.lock().unwrap().is_empty());
}

#[test]
fn client_errors_and_server_errors_are_distinct() {
    let mock = serve(Box::new(|r| match r.path.as_str() {
        "/v1/classify" => (422, r#"{"error":"text too long"}"#.into()),
        _ => (503, r#"{"error":"model loading"}"#.into()),
    }));
    let scorer = client(&mock);
    match scorer.classify(&filled(1)) {
        Err(ScorerError::Rejected { status, message }) => {
            assert_eq!((status, message.as_str()), (422, "text too long"));
        }
        other => panic!("expected a rejection, got {other:?}"),
    }
    match scorer.score_cloze(&masked(), &["a".to_string()]) {
        Err(ScorerError::Failed { status, message }) => {
            assert_eq!((status, message.as_str()), (503, "model loading"));
        }
        other => panic!("expected a server failure, got {other:?}"),
    }
}

#[test]
fn non_json_error_body_is_kept_verbatim() {
    let mock = serve(Box::new(|_| (500, "stack trace".into())));
    match client(&mock).health() {
        Err(ScorerError::Failed { status: 500, message }) => assert_eq!(message, "stack trace"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let scorer = RemoteScorer::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
    assert!(matches!(scorer.health(), Err(ScorerError::Transport(_))));
}

#[test]
fn wrong_instance_kind_fails_before_any_request() {
    let mock = serve(Box::new(|_| (200, "{}".into())));
    let scorer = client(&mock);
    assert!(matches!(scorer.score_cloze(&filled(1), &["a".into()]), Err(ScorerError::Request(_))));
    assert!(matches!(scorer.classify(&masked()), Err(ScorerError::Request(_))));
    assert!(mock.seen.lock().unwrap().is_empty());
}
