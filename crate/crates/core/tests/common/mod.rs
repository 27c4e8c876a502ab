#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;

use grape_core::hash::fnv1a64;
use grape_core::scoring::{ScoreRequestBody, ScoreResponseBody};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

/// One PASS/FAIL line per criterion, written past the test harness capture.
pub fn verdict(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    let status = if ok && in_time { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {id} {name}: {status} ({detail}; {:.2}s of {:.0}s)",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
    assert!(
        in_time,
        "criterion {id} ({name}) exceeded {limit:?}: {elapsed:?}"
    );
}

pub struct Timer(Instant);

impl Timer {
    pub fn start() -> Self {
        Timer(Instant::now())
    }

    pub fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}

// ---------------------------------------------------------------------------
// mock /v1/score server

pub const MOCK_MODEL: &str = "mock-lm";

/// Logprobs the mock assigns to a completion: one token per
/// whitespace-separated word, each in [-5, -1).
pub fn mock_logprobs(completion: &str) -> Vec<f64> {
    completion
        .split_whitespace()
        .map(|w| -1.0 - (fnv1a64(w.as_bytes()) % 1000) as f64 / 250.0)
        .collect()
}

pub enum Reply {
    Ok,
    Status(u16),
    /// Sleep, then answer normally.
    Delay(Duration),
}

type Behaviour = dyn Fn(&ScoreRequestBody, usize) -> Reply + Send + Sync;

pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// `behaviour` sees each request and how many times that completion was
    /// requested before (0 on the first attempt).
    pub fn start(
        workers: usize,
        behaviour: impl Fn(&ScoreRequestBody, usize) -> Reply + Send + Sync + 'static,
    ) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(AtomicUsize::new(0));
        let seen: Arc<Mutex<HashMap<String, usize>>> = Arc::default();
        let behaviour: Arc<Behaviour> = Arc::new(behaviour);
        let handles = (0..workers)
            .map(|_| {
                let server = Arc::clone(&server);
                let requests = Arc::clone(&requests);
                let seen = Arc::clone(&seen);
                let behaviour = Arc::clone(&behaviour);
                std::thread::spawn(move || {
                    while let Ok(mut req) = server.recv() {
                        requests.fetch_add(1, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let parsed: ScoreRequestBody = match serde_json::from_str(&body) {
                            Ok(b) => b,
                            Err(_) => {
                                let _ = req.respond(tiny_http::Response::empty(400));
                                continue;
                            }
                        };
                        let attempt = {
                            let mut map = seen.lock().unwrap();
                            let n = map.entry(parsed.completion.clone()).or_insert(0);
                            *n += 1;
                            *n - 1
                        };
                        match behaviour(&parsed, attempt) {
                            Reply::Status(code) => {
                                let _ = req.respond(tiny_http::Response::empty(code));
                                continue;
                            }
                            Reply::Delay(d) => std::thread::sleep(d),
                            Reply::Ok => {}
                        }
                        let out = ScoreResponseBody {
                            token_logprobs: mock_logprobs(&parsed.completion),
                            n_prompt_tokens: parsed.prompt.split_whitespace().count(),
                            model_id: MOCK_MODEL.into(),
                        };
                        let header = tiny_http::Header::from_bytes(
                            &b"Content-Type"[..],
                            &b"application/json"[..],
                        )
                        .unwrap();
                        let _ = req.respond(
                            tiny_http::Response::from_string(serde_json::to_string(&out).unwrap())
                                .with_header(header),
                        );
                    }
                })
            })
            .collect();
        MockServer {
            url: format!("http://127.0.0.1:{port}"),
            requests,
            server,
            workers: handles,
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic corpora

const WORDS: &[&str] = &[
    "the", "model", "answer", "is", "simple", "data", "a", "response", "short", "long", "water",
    "river", "stone", "light", "quick", "slow", "red", "blue", "green", "seven", "three", "north",
    "south", "bread", "salt", "paper", "garden", "cloud", "engine", "signal",
];

fn sentence(rng: &mut StdRng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `sources` JSONL files sharing `instructions` instructions, with
/// duplicates, preference losers, and some singleton instructions, plus a
/// `corpus.txt` for the bigram backend. Returns the source paths.
pub fn synthetic_corpus(
    dir: &Path,
    seed: u64,
    instructions: usize,
    sources: usize,
) -> Vec<PathBuf> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut files: Vec<Vec<String>> = vec![Vec::new(); sources];
    let mut next_id = vec![0usize; sources];
    for i in 0..instructions {
        let instruction = format!("Task {i}: {}?", sentence(&mut rng, 3, 8));
        let answers = rng.gen_range(1..=5);
        let mut previous: Vec<String> = Vec::new();
        for _ in 0..answers {
            let s = rng.gen_range(0..sources);
            let response = if !previous.is_empty() && rng.gen_bool(0.15) {
                previous[rng.gen_range(0..previous.len())].clone()
            } else {
                sentence(&mut rng, 2, 20)
            };
            previous.push(response.clone());
            let role = match rng.gen_range(0..10) {
                0 => "preference_loser",
                1 => "preference_winner",
                2..=4 => "generated",
                _ => "sft",
            };
            let reward = rng.gen_range(0..100) as f64 / 10.0;
            next_id[s] += 1;
            files[s].push(
                json!({
                    "source_id": format!("src{s}"),
                    "record_id": format!("r{}", next_id[s]),
                    "instruction": instruction,
                    "response": response,
                    "role_tag": role,
                    "reward": reward,
                })
                .to_string(),
            );
        }
    }
    let paths: Vec<PathBuf> = (0..sources)
        .map(|s| {
            let path = dir.join(format!("src{s}.jsonl"));
            let mut body = files[s].join("\n");
            body.push('\n');
            fs::write(&path, body).unwrap();
            path
        })
        .collect();
    let corpus: Vec<String> = (0..200).map(|_| sentence(&mut rng, 5, 15)).collect();
    fs::write(dir.join("corpus.txt"), corpus.join(". ")).unwrap();
    paths
}

// ---------------------------------------------------------------------------
// independent bigram recount

pub struct BigramOracle {
    pairs: HashMap<(u8, u8), f64>,
    left: HashMap<u8, f64>,
}

impl BigramOracle {
    pub fn new(corpus: &[u8]) -> Self {
        let mut pairs = HashMap::new();
        let mut left = HashMap::new();
        for w in corpus.windows(2) {
            *pairs.entry((w[0], w[1])).or_insert(0.0) += 1.0;
            *left.entry(w[0]).or_insert(0.0) += 1.0;
        }
        BigramOracle { pairs, left }
    }

    /// Mean natural-log probability of `completion` after `prompt`.
    pub fn mean_logprob(&self, prompt: &str, completion: &str) -> f64 {
        let mut prev = prompt.as_bytes().last().copied();
        let bytes = completion.as_bytes();
        let mut total = 0.0;
        for &b in bytes {
            total += match prev {
                None => (1.0f64 / 256.0).ln(),
                Some(a) => {
                    let c = self.pairs.get(&(a, b)).copied().unwrap_or(0.0);
                    let l = self.left.get(&a).copied().unwrap_or(0.0);
                    ((c + 1.0) / (l + 256.0)).ln()
                }
            };
            prev = Some(b);
        }
        total / bytes.len() as f64
    }
}
