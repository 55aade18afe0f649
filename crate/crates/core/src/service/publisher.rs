//! At-least-once result delivery with exponential backoff and a
//! dead-letter store.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::store::LineLog;
use super::{Clock, InspectionResult, Sleeper};
use crate::error::{Error, ErrorCode, Result};

pub trait ResultSink: Send + Sync {
    fn deliver(&self, result: &InspectionResult) -> std::result::Result<(), String>;
    fn describe(&self) -> String;
}

/// Appends one JSON line per delivery.
pub struct FileSink {
    log: LineLog,
}

impl FileSink {
    pub fn new(path: &Path) -> Result<Self> {
        Ok(FileSink { log: LineLog::new(path)? })
    }
}

impl ResultSink for FileSink {
    fn deliver(&self, result: &InspectionResult) -> std::result::Result<(), String> {
        self.log.append(result).map_err(|e| e.to_string())
    }

    fn describe(&self) -> String {
        format!("file:{}", self.log.path().display())
    }
}

/// POSTs the record as JSON; any 2xx status is an acknowledgment.
pub struct HttpSink {
    url: String,
    agent: ureq::Agent,
}

impl HttpSink {
    pub fn new(url: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        HttpSink {
            url: url.to_string(),
            agent,
        }
    }
}

impl ResultSink for HttpSink {
    fn deliver(&self, result: &InspectionResult) -> std::result::Result<(), String> {
        let body = serde_json::to_string(result).map_err(|e| e.to_string())?;
        match self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body.as_bytes())
        {
            Ok(r) if r.status().is_success() => Ok(()),
            Ok(r) => Err(format!("status {}", r.status())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SinkConfig {
    File { path: PathBuf },
    Http { url: String },
}

impl SinkConfig {
    pub fn build(&self) -> Result<Arc<dyn ResultSink>> {
        Ok(match self {
            SinkConfig::File { path } => Arc::new(FileSink::new(path)?),
            SinkConfig::Http { url } => Arc::new(HttpSink::new(url)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub base_s: f64,
    pub cap_s: f64,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base_s: 1.0,
            cap_s: 60.0,
            max_attempts: 10,
        }
    }
}

impl Backoff {
    /// Wait before attempt `n + 1` after `n` failures (`n >= 1`).
    pub fn delay(&self, n: u32) -> Duration {
        let s = (self.base_s * 2f64.powi(n as i32 - 1)).min(self.cap_s);
        Duration::from_secs_f64(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub job_id: String,
    pub attempts: u32,
    pub last_error: String,
    pub at: f64,
    pub result: InspectionResult,
}

/// Dead letters in memory, mirrored to a line file when a path is given.
pub struct DeadLetterStore {
    log: Option<LineLog>,
    mem: Mutex<Vec<DeadLetter>>,
}

impl DeadLetterStore {
    pub fn in_memory() -> Self {
        DeadLetterStore {
            log: None,
            mem: Mutex::new(Vec::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let log = LineLog::new(path)?;
        let existing = log.read_all()?;
        Ok(DeadLetterStore {
            log: Some(log),
            mem: Mutex::new(existing),
        })
    }

    pub fn push(&self, d: DeadLetter) -> Result<()> {
        let mut m = self.mem.lock().expect("dead letters");
        if let Some(log) = &self.log {
            log.append(&d)?;
        }
        m.push(d);
        Ok(())
    }

    pub fn list(&self) -> Vec<DeadLetter> {
        self.mem.lock().expect("dead letters").clone()
    }

    fn replace(&self, keep: Vec<DeadLetter>) -> Result<()> {
        let mut m = self.mem.lock().expect("dead letters");
        if let Some(log) = &self.log {
            log.rewrite(&keep)?;
        }
        *m = keep;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub job_id: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedriveReport {
    pub delivered: usize,
    pub remaining: usize,
}

pub struct Publisher {
    pub sink: Arc<dyn ResultSink>,
    pub backoff: Backoff,
    pub sleeper: Arc<dyn Sleeper>,
    pub clock: Arc<dyn Clock>,
    pub dead_letters: Arc<DeadLetterStore>,
}

impl Publisher {
    /// Delivers with retries; after the last failed attempt the result is
    /// kept as a dead letter and `SINK_UNREACHABLE` is returned.
    pub fn publish(&self, result: &InspectionResult) -> Result<Ack> {
        let mut last = String::new();
        for attempt in 1..=self.backoff.max_attempts {
            match self.sink.deliver(result) {
                Ok(()) => {
                    return Ok(Ack {
                        job_id: result.job_id.clone(),
                        attempts: attempt,
                    })
                }
                Err(e) => {
                    log::debug!("deliver {} attempt {attempt}: {e}", result.job_id);
                    last = e;
                }
            }
            if attempt < self.backoff.max_attempts {
                self.sleeper.sleep(self.backoff.delay(attempt));
            }
        }
        self.dead_letters.push(DeadLetter {
            job_id: result.job_id.clone(),
            attempts: self.backoff.max_attempts,
            last_error: last.clone(),
            at: self.clock.now(),
            result: result.clone(),
        })?;
        Err(Error::new(
            ErrorCode::SinkUnreachable,
            format!("{} after {} attempts: {last}", self.sink.describe(), self.backoff.max_attempts),
        ))
    }

    /// One delivery attempt per dead letter; delivered ones are removed.
    pub fn redrive(&self) -> Result<RedriveReport> {
        let mut keep = Vec::new();
        let mut delivered = 0;
        for d in self.dead_letters.list() {
            match self.sink.deliver(&d.result) {
                Ok(()) => delivered += 1,
                Err(e) => keep.push(DeadLetter {
                    last_error: e,
                    attempts: d.attempts + 1,
                    ..d
                }),
            }
        }
        let remaining = keep.len();
        self.dead_letters.replace(keep)?;
        Ok(RedriveReport { delivered, remaining })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::{JobState, ManualClock};
    use std::collections::BTreeMap;
    use std::io::{Read, Write};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn result(id: &str) -> InspectionResult {
        InspectionResult {
            job_id: id.into(),
            image_id: id.into(),
            state: JobState::Done,
            verdict: None,
            defects: Vec::new(),
            model: None,
            timing_ms: BTreeMap::new(),
            failure: None,
            node_id: None,
        }
    }

    /// Fails the first `fail` calls.
    struct Flaky {
        fail: u32,
        calls: AtomicU32,
        seen: Mutex<Vec<String>>,
    }

    impl ResultSink for Flaky {
        fn deliver(&self, r: &InspectionResult) -> std::result::Result<(), String> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail {
                return Err("down".into());
            }
            self.seen.lock().unwrap().push(r.job_id.clone());
            Ok(())
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    fn publisher(sink: Arc<dyn ResultSink>, clock: &ManualClock) -> Publisher {
        Publisher {
            sink,
            backoff: Backoff::default(),
            sleeper: Arc::new(clock.clone()),
            clock: Arc::new(clock.clone()),
            dead_letters: Arc::new(DeadLetterStore::in_memory()),
        }
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let s: Vec<f64> = (1..10).map(|n| b.delay(n).as_secs_f64()).collect();
        assert_eq!(s, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0, 60.0, 60.0]);
    }

    #[test]
    fn recovers_after_two_failures() {
        let clock = ManualClock::new(0.0);
        let sink = Arc::new(Flaky {
            fail: 2,
            calls: AtomicU32::new(0),
            seen: Mutex::new(Vec::new()),
        });
        let p = publisher(sink.clone(), &clock);
        let ack = p.publish(&result("j1")).unwrap();
        assert_eq!(ack.attempts, 3);
        assert!((clock.now() - 3.0).abs() < 1e-9);
        assert_eq!(*sink.seen.lock().unwrap(), vec!["j1".to_string()]);
    }

    #[test]
    fn dead_letter_after_ten_failures_then_redrive() {
        let clock = ManualClock::new(0.0);
        let sink = Arc::new(Flaky {
            fail: 10,
            calls: AtomicU32::new(0),
            seen: Mutex::new(Vec::new()),
        });
        let p = publisher(sink.clone(), &clock);
        assert_eq!(p.publish(&result("j1")).unwrap_err().code, ErrorCode::SinkUnreachable);
        assert_eq!(sink.calls.load(Ordering::SeqCst), 10);
        assert!((clock.now() - 243.0).abs() < 1e-9);
        assert_eq!(p.dead_letters.list().len(), 1);
        assert_eq!(
            p.redrive().unwrap(),
            RedriveReport {
                delivered: 1,
                remaining: 0
            }
        );
        assert!(p.dead_letters.list().is_empty());
    }

    #[test]
    fn file_sink_writes_one_line_per_result() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mes.jsonl");
        let sink = SinkConfig::File { path: path.clone() }.build().unwrap();
        sink.deliver(&result("a")).unwrap();
        sink.deliver(&result("b")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let ids: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["job_id"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn dead_letters_persist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dead.jsonl");
        let store = DeadLetterStore::open(&path).unwrap();
        store
            .push(DeadLetter {
                job_id: "x".into(),
                attempts: 10,
                last_error: "down".into(),
                at: 1.0,
                result: result("x"),
            })
            .unwrap();
        assert_eq!(DeadLetterStore::open(&path).unwrap().list().len(), 1);
    }

    #[test]
    fn http_sink_posts_json() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut got = Vec::new();
            loop {
                let n = s.read(&mut buf).unwrap();
                got.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&got).to_string();
                if let Some(idx) = text.find("\r\n\r\n") {
                    let len: usize = text
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    if got.len() >= idx + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            s.write_all(b"HTTP/1.1 204 No Content\r\nconnection: close\r\n\r\n").unwrap();
            String::from_utf8(got).unwrap()
        });
        let sink = HttpSink::new(&format!("http://{addr}/mes"));
        sink.deliver(&result("h1")).unwrap();
        let req = server.join().unwrap();
        assert!(req.starts_with("POST /mes"));
        assert!(req.contains("\"job_id\":\"h1\""));
    }
}
