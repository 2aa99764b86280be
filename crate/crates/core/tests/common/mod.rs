#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::json;

/// A request seen by [`StubServer`].
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl SeenRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Handler = dyn Fn(&SeenRequest) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on an ephemeral port, one connection per request.
pub struct StubServer {
    pub addr: String,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&SeenRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&log);
                thread::spawn(move || serve(stream, handler.as_ref(), &log));
            }
        });
        Self { addr, seen }
    }

    /// Replies with `responses` in order, repeating the last one.
    pub fn scripted(responses: Vec<(u16, String)>) -> Self {
        let next = Mutex::new(0usize);
        Self::start(move |_| {
            let mut i = next.lock().unwrap();
            let r = responses[(*i).min(responses.len() - 1)].clone();
            *i += 1;
            r
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.addr, path)
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<SeenRequest>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                length = v.parse().unwrap();
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).unwrap();
    let req = SeenRequest {
        path,
        headers,
        body: String::from_utf8(body).unwrap(),
    };
    let (status, reply) = handler(&req);
    log.lock().unwrap().push(req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
    let _ = stream.flush();
}

/// Deterministic toy world: each query `qNN` asks about `topicNN`, whose gold
/// passage names the answer, alongside passages that mention the topic
/// without the answer and unrelated filler.
pub struct World {
    pub dir: tempfile::TempDir,
}

pub const ANSWERS: [&str; 10] = [
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
];

pub fn answer(i: usize) -> String {
    format!("{}{}", ANSWERS[i % ANSWERS.len()], i)
}

impl World {
    pub fn new(n_queries: usize, distractors_per_query: usize, filler: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = String::new();
        let mut gold = String::new();
        let mut queries = String::new();
        let line = |out: &mut String, id: String, title: String, text: String| {
            out.push_str(&json!({"id": id, "title": title, "text": text}).to_string());
            out.push('\n');
        };
        for i in 0..n_queries {
            let topic = format!("topic{i:02}");
            line(
                &mut gold,
                format!("gold{i:02}"),
                format!("Topic {i}"),
                format!(
                    "records show that {topic} is known as {} in the archive",
                    answer(i)
                ),
            );
            for d in 0..distractors_per_query {
                line(
                    &mut corpus,
                    format!("dis{i:02}x{d:02}"),
                    format!("Topic {i} notes"),
                    format!("{topic} is mentioned here in note {d} without any resolution at all"),
                );
            }
            queries.push_str(
                &json!({
                    "id": format!("q{i:02}"),
                    "question": format!("what is {topic} known as"),
                    "answers": [answer(i)],
                    "gold_passage_id": format!("gold{i:02}"),
                })
                .to_string(),
            );
            queries.push('\n');
        }
        for f in 0..filler {
            line(
                &mut corpus,
                format!("fill{f:04}"),
                format!("Filler {f}"),
                format!("unrelated filler passage number {f} about weather and rivers"),
            );
        }
        std::fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();
        std::fs::write(dir.path().join("gold.jsonl"), gold).unwrap();
        std::fs::write(dir.path().join("queries.jsonl"), queries).unwrap();
        std::fs::write(
            dir.path().join("lexicon.txt"),
            "quill marsh tether plinth orbit sable vessel lumen crag tundra",
        )
        .unwrap();
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Writes a config with the standard `[corpus]` section merged into
    /// `body`, returning its file name relative to the world directory.
    pub fn config(&self, name: &str, body: &str) -> PathBuf {
        let split = body
            .lines()
            .position(|l| l.starts_with('['))
            .unwrap_or(body.lines().count());
        let top: Vec<&str> = body.lines().take(split).collect();
        let rest: Vec<&str> = body.lines().skip(split).collect();
        let text = format!(
            "{}\n[corpus]\nmain = \"corpus.jsonl\"\ngold = \"gold.jsonl\"\nqueries = \"queries.jsonl\"\nlexicon = \"lexicon.txt\"\n\n{}\n",
            top.join("\n"),
            rest.join("\n")
        );
        std::fs::write(self.path().join(name), text).unwrap();
        PathBuf::from(name)
    }
}
