//! Caching reverse proxy with a byte-bounded LRU store and an access log.
//!
//! Paths under `/_cache/` are answered by the proxy itself and never logged:
//! `/_cache/log` returns the access log as CSV, `/_cache/reset` clears it
//! and `/_cache/stats` reports residency.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::http::{serve, Handler, HttpClient, HttpError, Request, Response, Server, ServerOptions};

pub const ADMIN_PREFIX: &str = "/_cache/";
pub const CACHE_HEADER: &str = "X-Cache";
pub const ACCESS_LOG_HEADER: &str = "timestamp_ms,path,outcome,response_time_ms,bytes";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("access log is empty")]
    EmptyLog,
    #[error("access log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Hit,
    Miss,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Hit => "HIT",
            Outcome::Miss => "MISS",
        })
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HIT" => Ok(Outcome::Hit),
            "MISS" => Ok(Outcome::Miss),
            _ => Err(format!("unknown outcome `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessRecord {
    pub timestamp_ms: f64,
    pub path: String,
    pub outcome: Outcome,
    pub response_time_ms: f64,
    pub bytes: u64,
}

pub fn access_log_csv(records: &[AccessRecord]) -> String {
    let mut out = String::from(ACCESS_LOG_HEADER);
    out.push('\n');
    for r in records {
        // paths never contain commas unescaped: they are percent-encoded on the wire
        out.push_str(&format!(
            "{:.3},{},{},{:.3},{}\n",
            r.timestamp_ms, r.path, r.outcome, r.response_time_ms, r.bytes
        ));
    }
    out
}

pub fn parse_access_log(text: &str) -> Result<Vec<AccessRecord>, CacheError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, ACCESS_LOG_HEADER)) => {}
        _ => {
            return Err(CacheError::BadLog {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |message: String| CacheError::BadLog { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            let [ts, path, outcome, rt, bytes] = f[..] else {
                return Err(bad(format!("expected 5 fields in `{line}`")));
            };
            Ok(AccessRecord {
                timestamp_ms: ts.parse().map_err(|e| bad(format!("{e}")))?,
                path: path.to_string(),
                outcome: outcome.parse().map_err(bad)?,
                response_time_ms: rt.parse().map_err(|e| bad(format!("{e}")))?,
                bytes: bytes.parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

/// Percentage of requests served from the store.
pub fn hit_rate(records: &[AccessRecord]) -> Result<f64, CacheError> {
    if records.is_empty() {
        return Err(CacheError::EmptyLog);
    }
    let hits = records.iter().filter(|r| r.outcome == Outcome::Hit).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Mean response time per outcome, if any record has it.
pub fn mean_response_ms(records: &[AccessRecord], outcome: Option<Outcome>) -> Option<f64> {
    let times: Vec<f64> = records
        .iter()
        .filter(|r| outcome.is_none_or(|o| r.outcome == o))
        .map(|r| r.response_time_ms)
        .collect();
    (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
}

#[derive(Debug, Clone)]
enum Stored {
    Memory(Arc<[u8]>),
    Disk(PathBuf),
}

#[derive(Debug, Clone)]
struct Entry {
    stored: Stored,
    size: u64,
    last_access: u64,
}

/// Byte-bounded store evicting the least recently accessed entry first.
#[derive(Debug)]
pub struct LruStore {
    capacity: u64,
    used: u64,
    tick: u64,
    entries: HashMap<String, Entry>,
    /// last-access ordinal to key
    order: BTreeMap<u64, String>,
    disk: Option<PathBuf>,
    files: u64,
}

impl LruStore {
    pub fn new(capacity: u64) -> Self {
        LruStore {
            capacity,
            used: 0,
            tick: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            disk: None,
            files: 0,
        }
    }

    /// Keeps bodies as files under `dir` instead of in memory.
    pub fn on_disk(capacity: u64, dir: PathBuf) -> std::io::Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(LruStore {
            disk: Some(dir),
            ..Self::new(capacity)
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Resident keys, least recently used first.
    pub fn lru_order(&self) -> Vec<&str> {
        self.order.values().map(String::as_str).collect()
    }

    fn touch(&mut self, key: &str) {
        self.tick += 1;
        let e = self.entries.get_mut(key).expect("resident");
        self.order.remove(&e.last_access);
        e.last_access = self.tick;
        self.order.insert(self.tick, key.to_string());
    }

    pub fn get(&mut self, key: &str) -> Option<Arc<[u8]>> {
        let stored = self.entries.get(key)?.stored.clone();
        let body = match stored {
            Stored::Memory(b) => b,
            Stored::Disk(path) => match std::fs::read(&path) {
                Ok(b) => b.into(),
                Err(_) => {
                    self.remove(key);
                    return None;
                }
            },
        };
        self.touch(key);
        Some(body)
    }

    fn remove(&mut self, key: &str) {
        if let Some(e) = self.entries.remove(key) {
            self.order.remove(&e.last_access);
            self.used -= e.size;
            if let Stored::Disk(p) = e.stored {
                let _ = std::fs::remove_file(p);
            }
        }
    }

    /// Stores `body` under `key`, evicting least recently used entries until
    /// it fits. Bodies larger than the capacity are not admitted, and a zero
    /// capacity disables caching altogether. Returns the evicted keys.
    pub fn admit(&mut self, key: &str, body: Arc<[u8]>) -> Vec<String> {
        let size = body.len() as u64;
        if self.capacity == 0 || size > self.capacity {
            return Vec::new();
        }
        self.remove(key);
        let mut evicted = Vec::new();
        while self.used + size > self.capacity {
            let victim = self.order.values().next().expect("used > 0 implies an entry").clone();
            self.remove(&victim);
            evicted.push(victim);
        }
        let stored = match &self.disk {
            None => Stored::Memory(body),
            Some(dir) => {
                self.files += 1;
                let path = dir.join(format!("{:016x}.bin", self.files));
                if std::fs::write(&path, &body).is_err() {
                    return evicted;
                }
                Stored::Disk(path)
            }
        };
        self.tick += 1;
        self.entries.insert(
            key.to_string(),
            Entry {
                stored,
                size,
                last_access: self.tick,
            },
        );
        self.order.insert(self.tick, key.to_string());
        self.used += size;
        evicted
    }

    /// Checks the bookkeeping: sizes add up and stay within capacity.
    pub fn audit(&self) -> bool {
        let total: u64 = self.entries.values().map(|e| e.size).sum();
        total == self.used
            && self.used <= self.capacity
            && self.order.len() == self.entries.len()
            && self.order.iter().all(|(t, k)| self.entries.get(k).is_some_and(|e| e.last_access == *t))
    }
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    /// Store bodies as files here instead of in memory.
    pub disk_dir: Option<PathBuf>,
    /// Zero point of access-log timestamps.
    pub epoch: Instant,
}

impl CacheConfig {
    pub fn in_memory(capacity_bytes: u64) -> Self {
        CacheConfig {
            capacity_bytes,
            disk_dir: None,
            epoch: Instant::now(),
        }
    }
}

struct CacheProxy {
    upstream: String,
    store: Arc<Mutex<LruStore>>,
    log: Arc<Mutex<Vec<AccessRecord>>>,
    clients: Mutex<Vec<HttpClient>>,
    epoch: Instant,
}

impl CacheProxy {
    fn fetch(&self, target: &str) -> Result<crate::http::ClientResponse, HttpError> {
        let mut client = self.clients.lock().unwrap().pop().unwrap_or_default();
        let result = client.get(&self.upstream, target);
        if result.is_ok() {
            self.clients.lock().unwrap().push(client);
        }
        result
    }

    fn admin(&self, req: &Request) -> Response {
        match &req.path()[ADMIN_PREFIX.len()..] {
            "log" => Response::new(200, access_log_csv(&self.log.lock().unwrap()).into_bytes())
                .with_header("Content-Type", "text/csv"),
            "reset" => {
                self.log.lock().unwrap().clear();
                Response::text(200, "ok")
            }
            "stats" => {
                let s = self.store.lock().unwrap();
                Response::text(200, &format!("entries={} used={} capacity={}", s.len(), s.used(), s.capacity()))
            }
            _ => Response::empty(404),
        }
    }
}

impl Handler for CacheProxy {
    fn handle(&self, req: &Request) -> Response {
        if req.path().starts_with(ADMIN_PREFIX) {
            return self.admin(req);
        }
        let key = req.target.as_str();
        if let Some(body) = self.store.lock().unwrap().get(key) {
            return Response::new(200, body).with_header(CACHE_HEADER, "HIT");
        }
        match self.fetch(key) {
            Ok(up) if up.status == 200 => {
                let body: Arc<[u8]> = up.body.into();
                self.store.lock().unwrap().admit(key, body.clone());
                let mut resp = Response::new(200, body).with_header(CACHE_HEADER, "MISS");
                if let Some(ct) = up.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case("content-type")) {
                    resp = resp.with_header("Content-Type", &ct.1);
                }
                resp
            }
            Ok(up) => Response::new(up.status, up.body).with_header(CACHE_HEADER, "MISS"),
            Err(e) => {
                log::warn!("upstream {}: {e}", self.upstream);
                Response::text(502, "upstream unreachable").with_header(CACHE_HEADER, "MISS")
            }
        }
    }

    fn completed(&self, req: &Request, resp: &Response, elapsed: Duration) {
        let Some(outcome) = resp.header(CACHE_HEADER).and_then(|v| v.parse().ok()) else {
            return;
        };
        let now = self.epoch.elapsed();
        let record = AccessRecord {
            timestamp_ms: now.saturating_sub(elapsed).as_secs_f64() * 1e3,
            path: req.target.clone(),
            outcome,
            response_time_ms: elapsed.as_secs_f64() * 1e3,
            bytes: resp.body.len() as u64,
        };
        self.log.lock().unwrap().push(record);
    }
}

/// A running cache with direct access to its store and log.
pub struct CacheHandle {
    pub server: Server,
    pub store: Arc<Mutex<LruStore>>,
    pub log: Arc<Mutex<Vec<AccessRecord>>>,
}

impl CacheHandle {
    pub fn records(&self) -> Vec<AccessRecord> {
        self.log.lock().unwrap().clone()
    }
}

pub fn run_cache(upstream: &str, bind: &str, config: CacheConfig) -> Result<CacheHandle, HttpError> {
    let store = match config.disk_dir {
        None => LruStore::new(config.capacity_bytes),
        Some(dir) => LruStore::on_disk(config.capacity_bytes, dir)?,
    };
    let store = Arc::new(Mutex::new(store));
    let log: Arc<Mutex<Vec<AccessRecord>>> = Arc::default();
    let proxy = CacheProxy {
        upstream: upstream.to_string(),
        store: store.clone(),
        log: log.clone(),
        clients: Mutex::new(Vec::new()),
        epoch: config.epoch,
    };
    let server = serve(bind, Arc::new(proxy), ServerOptions::default())?;
    Ok(CacheHandle { server, store, log })
}
