mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use toolrec::agent::{run_episode, AgentConfig, AgentError};
use toolrec::llm::{ChatBackend, ChatTurn, LlmError, Recorder, ReplayBackend, RemoteBackend, ScriptedBackend};

#[test]
fn replay_reproduces_a_recorded_episode() {
    let w = common::world(3);
    let (script, _) = common::four_step_script(&w, 0);
    let h = w.split.history(0).unwrap();
    let rec = Recorder::new(ScriptedBackend::parse(&script));
    let first = run_episode(h, &w.registry, &rec, &AgentConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.txt");
    rec.save(&path).unwrap();
    let records = toolrec::llm::load_transcript(&path).unwrap();
    assert_eq!(records, rec.records());
    assert_eq!(records.len(), 5);

    let again = run_episode(h, &w.registry, &ReplayBackend::new(records.clone(), true), &AgentConfig::default()).unwrap();
    assert_eq!(again.trace.to_jsonl(), first.trace.to_jsonl());

    // another user's history changes the very first request
    let other = w.split.history(1).unwrap();
    let err = run_episode(other, &w.registry, &ReplayBackend::new(records.clone(), true), &AgentConfig::default()).unwrap_err();
    assert!(matches!(err, AgentError::Llm(LlmError::ReplayDivergence { turn: 0, .. })), "{err}");
    // lenient replay serves the recorded reply anyway
    let lenient = ReplayBackend::new(records.clone(), false);
    assert_eq!(lenient.complete(&[ChatTurn::system("other"), ChatTurn::user("request")]).unwrap(), records[0].reply);
}

/// Minimal HTTP server answering each connection with the next canned
/// response (the last one repeats). Returns the URL, the connection
/// counter, and the captured request texts.
fn mock_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let n = h.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            s.lock().unwrap().push(format!("{head}\r\n{}", String::from_utf8_lossy(&body)));
            let (status, text) = &responses[n.min(responses.len() - 1)];
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (url, hits, seen)
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn remote_gives_up_after_configured_retries() {
    let (url, hits, _) = mock_server(vec![(503, "{}".into())]);
    let backend = RemoteBackend::new(&url, "m", None, "k", 5, 2, 1);
    let err = backend.complete(&[ChatTurn::system("s"), ChatTurn::user("hi")]).unwrap_err();
    assert!(matches!(err, LlmError::BackendUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_retries_then_succeeds() {
    let (url, hits, seen) = mock_server(vec![(500, "{}".into()), (200, ok_body("")), (200, ok_body("Action: Finish"))]);
    let backend = RemoteBackend::new(&url, "test-model", Some(0.0), "secret", 5, 3, 1);
    let reply = backend.complete(&[ChatTurn::system("s"), ChatTurn::user("u")]).unwrap();
    assert_eq!(reply, "Action: Finish");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let req = seen.lock().unwrap()[0].clone();
    assert!(req.to_ascii_lowercase().contains("authorization: bearer secret"));
    let body: serde_json::Value = serde_json::from_str(req.split("\r\n\r\n").last().unwrap()).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][1]["content"], "u");
}

#[test]
fn unreachable_endpoint_is_backend_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = RemoteBackend::new(&format!("http://127.0.0.1:{port}/x"), "m", None, "k", 1, 1, 1);
    assert!(matches!(backend.complete(&[ChatTurn::system("s"), ChatTurn::user("hi")]), Err(LlmError::BackendUnavailable { attempts: 2, .. })));
}
