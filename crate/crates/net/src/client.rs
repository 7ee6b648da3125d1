//! Streaming player: downloads frames in order over one keep-alive
//! connection, decrypts them on a small pool, restores index order and
//! feeds a bounded playback buffer drained by a virtual playback clock.
//!
//! Playback starts once the buffer first fills. Frame `i` is due at
//! `start + i / fps` plus all stall time so far; a frame missing at its
//! tick opens a stall that ends as soon as the frame arrives.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use pcvault_core::abe::{PublicParams, UserKey};
use pcvault_core::codec::{decrypt_frame, inspect, CodecError};
use pcvault_core::manifest::{parse_mpd, EncryptionLevel, Manifest, ManifestError};
use pcvault_core::ply::parse_ply;
use thiserror::Error;
use url::Url;

use crate::http::{HttpClient, HttpError};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("GET {url} answered {status}")]
    Http { url: String, status: u16 },
    #[error("transport: {0}")]
    Transport(#[from] HttpError),
    #[error("manifest level {manifest} but frame {index} carries {frame}")]
    LevelMismatch {
        index: u64,
        manifest: EncryptionLevel,
        frame: String,
    },
    #[error("frame {index}: {source}")]
    Decrypt { index: u64, source: CodecError },
    #[error("encrypted stream ({0}) needs decryption enabled")]
    DecryptDisabled(EncryptionLevel),
    #[error("user key was not issued under these public parameters")]
    KeyMismatch,
}

#[derive(Debug, Clone)]
pub struct KeyMaterial {
    pub params: PublicParams,
    pub key: UserKey,
}

#[derive(Debug, Clone)]
pub struct PlayerConfig {
    pub mpd_url: String,
    /// Buffer length in seconds; also the startup buffer.
    pub buffer_seconds: f64,
    pub decrypt: bool,
    pub keys: Option<KeyMaterial>,
    /// Frames that may be fetched ahead of the buffer.
    pub download_queue: usize,
}

impl PlayerConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        if !(self.buffer_seconds > 0.0 && self.buffer_seconds.is_finite()) {
            return Err(StreamError::Config("buffer must be positive".into()));
        }
        if self.download_queue == 0 {
            return Err(StreamError::Config("download queue must be at least 1".into()));
        }
        match (&self.keys, self.decrypt) {
            (None, true) => Err(StreamError::Config("decryption needs key material".into())),
            (Some(k), true) if !k.params.verify_user_key(&k.key) => Err(StreamError::KeyMismatch),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: u64,
    pub download_ms: f64,
    pub decrypt_ms: f64,
    pub enqueue_ms: f64,
    pub dequeue_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StallRecord {
    pub start_ms: f64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub frame_rate: u32,
    pub playback_start_ms: f64,
    pub frames: Vec<FrameRecord>,
    pub stalls: Vec<StallRecord>,
    /// (timestamp_ms, frames buffered) after every enqueue and dequeue.
    pub occupancy: Vec<(f64, usize)>,
    pub notes: Vec<String>,
}

pub const FRAMES_HEADER: &str = "index,download_ms,decrypt_ms,enqueue_ms,dequeue_ms";
pub const STALLS_HEADER: &str = "start_ms,duration_ms";

impl SessionLog {
    pub fn total_stall_ms(&self) -> f64 {
        self.stalls.iter().map(|s| s.duration_ms).fold(0.0, |acc, d| acc + d)
    }

    pub fn frames_csv(&self) -> String {
        let mut out = format!("{FRAMES_HEADER}\n");
        for f in &self.frames {
            out.push_str(&format!(
                "{},{:.3},{:.3},{:.3},{:.3}\n",
                f.index, f.download_ms, f.decrypt_ms, f.enqueue_ms, f.dequeue_ms
            ));
        }
        out
    }

    pub fn stalls_csv(&self) -> String {
        let mut out = format!("{STALLS_HEADER}\n");
        for s in &self.stalls {
            out.push_str(&format!("{:.3},{:.3}\n", s.start_ms, s.duration_ms));
        }
        out
    }

    /// Writes `<prefix>frames.csv` and `<prefix>stalls.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path, prefix: &str) -> std::io::Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let frames = dir.join(format!("{prefix}frames.csv"));
        let stalls = dir.join(format!("{prefix}stalls.csv"));
        std::fs::write(&frames, self.frames_csv())?;
        std::fs::write(&stalls, self.stalls_csv())?;
        Ok((frames, stalls))
    }
}

fn parse_rows<const N: usize>(text: &str, header: &str) -> Result<Vec<[f64; N]>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(format!("expected header `{header}`"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let values: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>().map_err(|e| format!("`{line}`: {e}")))
                .collect::<Result<_, _>>()?;
            values.try_into().map_err(|_| format!("`{line}`: expected {N} fields"))
        })
        .collect()
}

pub fn parse_frames_csv(text: &str) -> Result<Vec<FrameRecord>, String> {
    Ok(parse_rows::<5>(text, FRAMES_HEADER)?
        .into_iter()
        .map(|[i, d, c, e, q]| FrameRecord {
            index: i as u64,
            download_ms: d,
            decrypt_ms: c,
            enqueue_ms: e,
            dequeue_ms: q,
        })
        .collect())
}

pub fn parse_stalls_csv(text: &str) -> Result<Vec<StallRecord>, String> {
    Ok(parse_rows::<2>(text, STALLS_HEADER)?
        .into_iter()
        .map(|[s, d]| StallRecord {
            start_ms: s,
            duration_ms: d,
        })
        .collect())
}

/// Stalled time as a percentage of the media duration; may exceed 100.
pub fn compute_rebuffering(log: &SessionLog, media_duration_s: f64) -> f64 {
    100.0 * log.total_stall_ms() / 1e3 / media_duration_s
}

struct Frame {
    record: FrameRecord,
    #[allow(dead_code)]
    data: Vec<u8>,
}

#[derive(Default)]
struct BufferState {
    frames: VecDeque<Frame>,
    /// All frames have been pushed.
    complete: bool,
    aborted: bool,
    occupancy: Vec<(f64, usize)>,
}

/// Bounded FIFO between the producer and the playback clock.
pub struct PlaybackBuffer {
    capacity: usize,
    state: Mutex<BufferState>,
    changed: Condvar,
    epoch: Instant,
}

impl PlaybackBuffer {
    fn new(capacity: usize, epoch: Instant) -> Self {
        PlaybackBuffer {
            capacity,
            state: Mutex::default(),
            changed: Condvar::new(),
            epoch,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }

    /// Blocks, polling every millisecond, until there is room. Returns
    /// false if the session was aborted.
    fn push(&self, mut frame: Frame) -> bool {
        loop {
            {
                let mut s = self.state.lock().unwrap();
                if s.aborted {
                    return false;
                }
                if s.frames.len() < self.capacity {
                    frame.record.enqueue_ms = self.ms();
                    s.frames.push_back(frame);
                    assert!(s.frames.len() <= self.capacity, "buffer overflow");
                    let t = self.ms();
                    let n = s.frames.len();
                    s.occupancy.push((t, n));
                    self.changed.notify_all();
                    return true;
                }
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    fn finish(&self) {
        self.state.lock().unwrap().complete = true;
        self.changed.notify_all();
    }

    fn abort(&self) {
        self.state.lock().unwrap().aborted = true;
        self.changed.notify_all();
    }

    /// Waits until the buffer is full or the producer is done.
    fn wait_filled(&self) -> bool {
        let mut s = self.state.lock().unwrap();
        while !s.aborted && !s.complete && s.frames.len() < self.capacity {
            s = self.changed.wait(s).unwrap();
        }
        !s.aborted
    }

    fn try_pop(&self) -> Option<Frame> {
        let mut s = self.state.lock().unwrap();
        let f = s.frames.pop_front()?;
        let t = self.ms();
        let n = s.frames.len();
        s.occupancy.push((t, n));
        Some(f)
    }

    /// Blocks until a frame is available; `None` if aborted or exhausted.
    fn pop_wait(&self) -> Option<Frame> {
        let mut s = self.state.lock().unwrap();
        loop {
            if s.aborted {
                return None;
            }
            if let Some(f) = s.frames.pop_front() {
                let t = self.ms();
                let n = s.frames.len();
                s.occupancy.push((t, n));
                return Some(f);
            }
            if s.complete {
                return None;
            }
            s = self.changed.wait(s).unwrap();
        }
    }
}

/// Counting semaphore bounding frames between download and buffer.
struct Permits {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Permits {
    fn acquire(&self, abort: &AtomicBool) -> bool {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            if abort.load(Ordering::SeqCst) {
                return false;
            }
            free = self.cond.wait_timeout(free, Duration::from_millis(10)).unwrap().0;
        }
        *free -= 1;
        true
    }

    fn release(&self) {
        *self.free.lock().unwrap() += 1;
        self.cond.notify_one();
    }
}

struct Session {
    epoch: Instant,
    abort: AtomicBool,
    error: Mutex<Option<StreamError>>,
    buffer: PlaybackBuffer,
    permits: Permits,
}

impl Session {
    fn ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }

    fn fail(&self, e: StreamError) {
        let mut slot = self.error.lock().unwrap();
        if slot.is_none() {
            *slot = Some(e);
        }
        self.abort.store(true, Ordering::SeqCst);
        self.buffer.abort();
    }

    fn aborted(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }
}

struct Downloaded {
    index: u64,
    data: Vec<u8>,
    download_ms: f64,
}

fn download_stage(
    session: &Session,
    manifest: &Manifest,
    base: &Url,
    mut client: HttpClient,
    out: SyncSender<Downloaded>,
) {
    for index in 0..manifest.frame_count {
        if session.aborted() || !session.permits.acquire(&session.abort) {
            return;
        }
        let result = (|| {
            let rel = manifest.frame_url(index)?;
            let url = base
                .join(&rel)
                .map_err(|_| StreamError::Transport(HttpError::BadUrl(rel.clone())))?;
            let t = Instant::now();
            let resp = client.get_url(&url)?;
            if resp.status != 200 {
                return Err(StreamError::Http {
                    url: url.to_string(),
                    status: resp.status,
                });
            }
            Ok(Downloaded {
                index,
                data: resp.body,
                download_ms: t.elapsed().as_secs_f64() * 1e3,
            })
        })();
        match result {
            Ok(d) => {
                if out.send(d).is_err() {
                    return;
                }
            }
            Err(e) => return session.fail(e),
        }
    }
}

/// Decrypts (when needed) and checks one frame against the manifest level.
fn decode(level: EncryptionLevel, key: Option<&UserKey>, d: &Downloaded) -> Result<Vec<u8>, StreamError> {
    let mismatch = |frame: String| StreamError::LevelMismatch {
        index: d.index,
        manifest: level,
        frame,
    };
    let plain = match level.granularity() {
        None => d.data.clone(),
        Some(g) => {
            let layout = inspect(&d.data).map_err(|e| mismatch(e.to_string()))?;
            if layout.marker.granularity != g {
                return Err(mismatch(layout.marker.granularity.to_string()));
            }
            let key = key.ok_or(StreamError::DecryptDisabled(level))?;
            decrypt_frame(&d.data, key).map_err(|source| StreamError::Decrypt {
                index: d.index,
                source,
            })?
        }
    };
    match parse_ply(&plain) {
        Ok((_, [])) => Ok(plain),
        Ok(_) => Err(mismatch("trailing data after the vertex body".into())),
        Err(e) => Err(StreamError::Decrypt {
            index: d.index,
            source: e.into(),
        }),
    }
}

fn decrypt_stage(
    session: &Session,
    level: EncryptionLevel,
    key: Option<&UserKey>,
    input: &Mutex<Receiver<Downloaded>>,
    out: SyncSender<Frame>,
) {
    // keeps draining after an abort so the downloader never blocks on a full channel
    loop {
        let next = input.lock().unwrap().recv();
        let Ok(d) = next else { return };
        if session.aborted() {
            continue;
        }
        let t = Instant::now();
        match decode(level, key, &d) {
            Ok(data) => {
                let frame = Frame {
                    record: FrameRecord {
                        index: d.index,
                        download_ms: d.download_ms,
                        decrypt_ms: if level.is_encrypted() { t.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
                        enqueue_ms: 0.0,
                        dequeue_ms: 0.0,
                    },
                    data,
                };
                let _ = out.send(frame);
            }
            Err(e) => session.fail(e),
        }
    }
}

/// Restores index order and pushes frames into the playback buffer.
fn reorder_stage(session: &Session, frame_count: u64, input: Receiver<Frame>) {
    let mut pending = BTreeMap::new();
    let mut next = 0u64;
    for frame in input {
        pending.insert(frame.record.index, frame);
        while let Some(f) = pending.remove(&next) {
            if !session.buffer.push(f) {
                return;
            }
            session.permits.release();
            next += 1;
        }
    }
    if next == frame_count {
        session.buffer.finish();
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        std::thread::sleep(t - now);
    }
}

pub fn fetch_manifest(client: &mut HttpClient, url: &Url) -> Result<Manifest, StreamError> {
    let resp = client.get_url(url)?;
    if resp.status != 200 {
        return Err(StreamError::Http {
            url: url.to_string(),
            status: resp.status,
        });
    }
    let text = String::from_utf8(resp.body).map_err(|_| ManifestError::SchemaViolation {
        offset: 0,
        message: "manifest is not UTF-8".into(),
    })?;
    Ok(parse_mpd(&text)?)
}

/// Plays the stream described by `cfg.mpd_url` and returns its timing log.
pub fn stream(cfg: &PlayerConfig) -> Result<SessionLog, StreamError> {
    cfg.validate()?;
    let epoch = Instant::now();
    let base = Url::parse(&cfg.mpd_url).map_err(|e| StreamError::Config(format!("url: {e}")))?;
    let mut client = HttpClient::default();
    let manifest = fetch_manifest(&mut client, &base)?;
    let level = manifest.encryption_level;
    if level.is_encrypted() && !cfg.decrypt {
        return Err(StreamError::DecryptDisabled(level));
    }
    let key = cfg.keys.as_ref().filter(|_| cfg.decrypt).map(|k| &k.key);

    let fps = manifest.frame_rate as f64;
    let capacity = ((cfg.buffer_seconds * fps).ceil() as usize).max(1);
    let session = Session {
        epoch,
        abort: AtomicBool::new(false),
        error: Mutex::new(None),
        buffer: PlaybackBuffer::new(capacity, epoch),
        permits: Permits {
            free: Mutex::new(cfg.download_queue),
            cond: Condvar::new(),
        },
    };
    let workers = if level.is_encrypted() {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        cfg.download_queue.min(cores).max(1)
    } else {
        1
    };

    let mut log = SessionLog {
        frame_rate: manifest.frame_rate,
        ..SessionLog::default()
    };
    let (dl_tx, dl_rx) = mpsc::sync_channel::<Downloaded>(cfg.download_queue);
    let (fr_tx, fr_rx) = mpsc::sync_channel::<Frame>(cfg.download_queue);
    let dl_rx = Mutex::new(dl_rx);
    std::thread::scope(|scope| {
        let (session, manifest, base) = (&session, &manifest, &base);
        scope.spawn(move || download_stage(session, manifest, base, client, dl_tx));
        let dl_rx = &dl_rx;
        for _ in 0..workers {
            let tx = fr_tx.clone();
            scope.spawn(move || decrypt_stage(session, level, key, dl_rx, tx));
        }
        drop(fr_tx);
        scope.spawn(move || reorder_stage(session, manifest.frame_count, fr_rx));

        if !session.buffer.wait_filled() {
            return;
        }
        let start = Instant::now();
        log.playback_start_ms = session.ms();
        let mut stalled = Duration::ZERO;
        for i in 0..manifest.frame_count {
            let due = start + Duration::from_secs_f64(i as f64 / fps) + stalled;
            sleep_until(due);
            let frame = match session.buffer.try_pop() {
                Some(f) => f,
                None => {
                    let began = Instant::now();
                    let start_ms = session.ms();
                    let Some(f) = session.buffer.pop_wait() else {
                        return;
                    };
                    let waited = began.elapsed();
                    stalled += waited;
                    log.stalls.push(StallRecord {
                        start_ms,
                        duration_ms: waited.as_secs_f64() * 1e3,
                    });
                    f
                }
            };
            let mut record = frame.record;
            record.dequeue_ms = session.ms();
            log.frames.push(record);
        }
        log.notes.push(format!(
            "buffer drained at end of media after {} frames; no stall is open at the last dequeue",
            manifest.frame_count
        ));
    });

    if let Some(e) = session.error.into_inner().unwrap() {
        return Err(e);
    }
    log.occupancy = std::mem::take(&mut session.buffer.state.into_inner().unwrap().occupancy);
    Ok(log)
}

/// Fetches a user key for `client_id` from a license service.
pub fn fetch_key(license_base: &str, client_id: &str) -> Result<UserKey, StreamError> {
    let mut url = Url::parse(license_base).map_err(|e| StreamError::Config(format!("license url: {e}")))?;
    url.set_path("/license");
    url.query_pairs_mut().clear().append_pair("client", client_id);
    let resp = HttpClient::default().get_url(&url)?;
    if resp.status != 200 {
        return Err(StreamError::Http {
            url: url.to_string(),
            status: resp.status,
        });
    }
    UserKey::from_bytes(&resp.body).map_err(|e| StreamError::Config(format!("license body: {e}")))
}

pub fn fetch_params(license_base: &str) -> Result<PublicParams, StreamError> {
    let mut url = Url::parse(license_base).map_err(|e| StreamError::Config(format!("license url: {e}")))?;
    url.set_path("/params");
    url.set_query(None);
    let resp = HttpClient::default().get_url(&url)?;
    if resp.status != 200 {
        return Err(StreamError::Http {
            url: url.to_string(),
            status: resp.status,
        });
    }
    PublicParams::from_bytes(&resp.body).map_err(|e| StreamError::Config(format!("params body: {e}")))
}
