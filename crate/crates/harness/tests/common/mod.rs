#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use citeprobe::config::{ConfigLayer, ModelKind, RunConfig};
use citeprobe::runner;
use citeprobe::synth::{self, SynthOptions};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub layer: ConfigLayer,
}

impl Workspace {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self, extra: ConfigLayer) -> RunConfig {
        RunConfig::from_layer(self.layer.clone().overlay(&extra)).unwrap()
    }
}

/// Synthetic corpus written and indexed under a fresh temp dir.
pub fn workspace(options: SynthOptions) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth::write(&data, &synth::generate(&options)).unwrap();
    let layer = ConfigLayer {
        corpus: Some(data.join("corpus.jsonl")),
        qa: Some(data.join("qa.jsonl")),
        knowledge: Some(data.join("knowledge.jsonl")),
        store_dir: Some(dir.path().join("store")),
        output_dir: Some(dir.path().join("runs")),
        model: Some(ModelKind::PostRationalizer),
        ..ConfigLayer::default()
    };
    let ws = Workspace { dir, layer };
    runner::cmd_index(&ws.config(ConfigLayer::default()), false).unwrap();
    ws
}

pub fn small() -> SynthOptions {
    SynthOptions { n_questions: 12, n_filler: 6, filler_tokens: 120, seed: 3 }
}

pub struct Request {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

/// Minimal HTTP/1.1 server answering every request with `handler`.
pub struct MockServer {
    pub url: String,
    pub calls: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &Request) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let handler = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = handler.clone();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                std::thread::spawn(move || {
                    let Some(req) = read_request(&mut stream) else { return };
                    let (status, body) = handler(n, &req);
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                        body.len()
                    );
                });
            }
        });
        Self { url, calls }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len: usize = headers.iter().find(|(k, _)| k == "content-length").and_then(|(_, v)| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { path, headers, body: String::from_utf8(body).ok()? })
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}
