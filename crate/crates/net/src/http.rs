//! Just enough HTTP/1.1: GET only, Content-Length framing, keep-alive.
//! Heads are parsed with `httparse`; connections run one thread each.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;
use url::Url;

/// Largest accepted header section.
pub const MAX_HEAD: usize = 16 * 1024;
const MAX_HEADERS: usize = 32;
/// Request bodies are drained and ignored up to this size.
const MAX_REQUEST_BODY: usize = 64 * 1024;
const WRITE_CHUNK: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("header section exceeds {MAX_HEAD} bytes")]
    HeadTooLarge,
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("connection closed by peer")]
    Closed,
    #[error("unsupported url `{0}`")]
    BadUrl(String),
}

pub type Headers = Vec<(String, String)>;

fn find_header<'a>(headers: &'a Headers, name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

fn content_length(headers: &Headers) -> Result<Option<usize>, HttpError> {
    let mut found = None;
    for (k, v) in headers {
        if k.eq_ignore_ascii_case("content-length") {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| HttpError::Malformed(format!("content-length `{v}`")))?;
            if found.is_some_and(|m| m != n) {
                return Err(HttpError::Malformed("conflicting content-length".into()));
            }
            found = Some(n);
        }
        if k.eq_ignore_ascii_case("transfer-encoding") {
            return Err(HttpError::Malformed("transfer-encoding is not supported".into()));
        }
    }
    Ok(found)
}

fn collect_headers(raw: &[httparse::Header<'_>]) -> Result<Headers, HttpError> {
    raw.iter()
        .map(|h| {
            let v = std::str::from_utf8(h.value)
                .map_err(|_| HttpError::Malformed(format!("non-UTF-8 value for {}", h.name)))?;
            Ok((h.name.to_string(), v.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub target: String,
    /// Minor version: 0 for HTTP/1.0, 1 for HTTP/1.1.
    pub version: u8,
    pub headers: Headers,
    pub content_length: usize,
}

impl Request {
    pub fn path(&self) -> &str {
        self.target.split_once('?').map_or(&self.target, |(p, _)| p)
    }

    pub fn query(&self) -> Option<&str> {
        self.target.split_once('?').map(|(_, q)| q)
    }

    pub fn query_param(&self, name: &str) -> Option<String> {
        url::form_urlencoded::parse(self.query()?.as_bytes())
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn keep_alive(&self) -> bool {
        let conn = self.header("connection").map(str::to_ascii_lowercase);
        match self.version {
            0 => conn.as_deref() == Some("keep-alive"),
            _ => conn.as_deref() != Some("close"),
        }
    }
}

/// Parses a complete request head. `Ok(None)` means more bytes are needed.
pub fn parse_request_head(buf: &[u8]) -> Result<Option<(Request, usize)>, HttpError> {
    let mut raw = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut raw);
    let len = match req.parse(buf) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Ok(None),
        Err(e) => return Err(HttpError::Malformed(e.to_string())),
    };
    let headers = collect_headers(req.headers)?;
    let content_length = content_length(&headers)?.unwrap_or(0);
    Ok(Some((
        Request {
            method: req.method.unwrap_or_default().to_string(),
            target: req.path.unwrap_or_default().to_string(),
            version: req.version.unwrap_or(1),
            headers,
            content_length,
        },
        len,
    )))
}

/// Reads one header section. `Ok(None)` on a clean close before any byte.
fn read_head(reader: &mut impl BufRead) -> Result<Option<Vec<u8>>, HttpError> {
    let mut head = Vec::with_capacity(512);
    loop {
        let before = head.len();
        let n = reader
            .by_ref()
            .take((MAX_HEAD + 1 - head.len()) as u64)
            .read_until(b'\n', &mut head)?;
        if n == 0 {
            return if head.is_empty() { Ok(None) } else { Err(HttpError::Closed) };
        }
        if head.len() > MAX_HEAD {
            return Err(HttpError::HeadTooLarge);
        }
        let line = &head[before..];
        if line == b"\r\n" || line == b"\n" {
            if before == 0 {
                // tolerate stray blank lines between messages
                head.clear();
                continue;
            }
            return Ok(Some(head));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub headers: Headers,
    pub body: Arc<[u8]>,
}

impl Response {
    pub fn new(status: u16, body: impl Into<Arc<[u8]>>) -> Self {
        Response {
            status,
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn text(status: u16, body: &str) -> Self {
        Self::new(status, body.as_bytes()).with_header("Content-Type", "text/plain; charset=utf-8")
    }

    pub fn empty(status: u16) -> Self {
        Self::text(status, reason(status))
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }
}

pub fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        413 => "Payload Too Large",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        _ => "Unknown",
    }
}

/// Writes `resp`, pacing the body to `throttle` bytes per second if set.
pub fn write_response(
    w: &mut impl Write,
    resp: &Response,
    keep_alive: bool,
    throttle: Option<u64>,
) -> io::Result<()> {
    let mut head = format!("HTTP/1.1 {} {}\r\n", resp.status, reason(resp.status));
    for (k, v) in &resp.headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str(&format!("Content-Length: {}\r\n", resp.body.len()));
    if resp.header("connection").is_none() {
        head.push_str(if keep_alive { "Connection: keep-alive\r\n" } else { "Connection: close\r\n" });
    }
    head.push_str("\r\n");
    w.write_all(head.as_bytes())?;
    match throttle {
        None => w.write_all(&resp.body)?,
        Some(rate) => {
            let start = Instant::now();
            let mut sent = 0usize;
            for chunk in resp.body.chunks(WRITE_CHUNK) {
                w.write_all(chunk)?;
                sent += chunk.len();
                let due = Duration::from_secs_f64(sent as f64 / rate.max(1) as f64);
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        }
    }
    w.flush()
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, req: &Request) -> Response;

    /// Called after the response is fully written, with the time since the
    /// request head was read.
    fn completed(&self, _req: &Request, _resp: &Response, _elapsed: Duration) {}
}

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    pub throttle_bytes_per_sec: Option<u64>,
    pub idle_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            throttle_bytes_per_sec: None,
            idle_timeout: Duration::from_secs(60),
        }
    }
}

/// A running service. Dropping it stops accepting and closes connections.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accepted: Arc<AtomicU64>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Connections accepted so far.
    pub fn connections_accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(bind: &str, handler: Arc<dyn Handler>, opts: ServerOptions) -> Result<Server, HttpError> {
    let listener = TcpListener::bind(bind).map_err(|source| HttpError::BindFailure {
        addr: bind.to_string(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let accepted = Arc::new(AtomicU64::new(0));
    let accept = {
        let (stop, conns, accepted) = (stop.clone(), conns.clone(), accepted.clone());
        std::thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let id = accepted.fetch_add(1, Ordering::Relaxed);
                    if let Ok(clone) = stream.try_clone() {
                        conns.lock().unwrap().insert(id, clone);
                    }
                    let (handler, conns) = (handler.clone(), conns.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = connection(stream, &*handler, opts) {
                            log::debug!("connection {id}: {e}");
                        }
                        conns.lock().unwrap().remove(&id);
                    });
                }
            })?
    };
    Ok(Server {
        addr,
        stop,
        conns,
        accepted,
        accept: Some(accept),
    })
}

fn connection(stream: TcpStream, handler: &dyn Handler, opts: ServerOptions) -> Result<(), HttpError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(opts.idle_timeout))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        let head = match read_head(&mut reader) {
            Ok(Some(h)) => h,
            Ok(None) => return Ok(()),
            Err(HttpError::HeadTooLarge) => {
                write_response(&mut writer, &Response::empty(431), false, None)?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let started = Instant::now();
        let req = match parse_request_head(&head) {
            Ok(Some((req, _))) => req,
            Ok(None) | Err(_) => {
                write_response(&mut writer, &Response::empty(400), false, None)?;
                return Ok(());
            }
        };
        if req.content_length > MAX_REQUEST_BODY {
            write_response(&mut writer, &Response::empty(413), false, None)?;
            return Ok(());
        }
        io::copy(&mut (&mut reader).take(req.content_length as u64), &mut io::sink())?;

        let resp = if req.method == "GET" {
            handler.handle(&req)
        } else {
            Response::empty(405).with_header("Allow", "GET")
        };
        let keep_alive = req.keep_alive()
            && !resp.header("connection").is_some_and(|v| v.eq_ignore_ascii_case("close"));
        write_response(&mut writer, &resp, keep_alive, opts.throttle_bytes_per_sec)?;
        handler.completed(&req, &resp, started.elapsed());
        if !keep_alive {
            return Ok(());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientResponse {
    pub status: u16,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl ClientResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }
}

/// Parses a complete response head: status, headers and head length.
pub fn parse_response_head(buf: &[u8]) -> Result<Option<(u16, Headers, usize)>, HttpError> {
    let mut raw = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut raw);
    match resp.parse(buf) {
        Ok(httparse::Status::Complete(n)) => {
            Ok(Some((resp.code.unwrap_or(0), collect_headers(resp.headers)?, n)))
        }
        Ok(httparse::Status::Partial) => Ok(None),
        Err(e) => Err(HttpError::Malformed(e.to_string())),
    }
}

struct Connection {
    authority: String,
    reader: BufReader<TcpStream>,
}

/// A GET client that keeps one connection open per authority.
pub struct HttpClient {
    conn: Option<Connection>,
    timeout: Duration,
    connects: u64,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(60))
    }
}

impl HttpClient {
    pub fn new(timeout: Duration) -> Self {
        HttpClient {
            conn: None,
            timeout,
            connects: 0,
        }
    }

    /// TCP connections opened so far.
    pub fn connects(&self) -> u64 {
        self.connects
    }

    fn open(&mut self, authority: &str) -> Result<(), HttpError> {
        let addr = authority
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| HttpError::BadUrl(authority.to_string()))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        self.connects += 1;
        self.conn = Some(Connection {
            authority: authority.to_string(),
            reader: BufReader::with_capacity(64 * 1024, stream),
        });
        Ok(())
    }

    fn exchange(&mut self, authority: &str, target: &str) -> Result<ClientResponse, HttpError> {
        let conn = self.conn.as_mut().expect("connection opened");
        let request = format!("GET {target} HTTP/1.1\r\nHost: {authority}\r\nConnection: keep-alive\r\n\r\n");
        conn.reader.get_mut().write_all(request.as_bytes())?;
        let head = read_head(&mut conn.reader)?.ok_or(HttpError::Closed)?;
        let (status, headers, _) =
            parse_response_head(&head)?.ok_or_else(|| HttpError::Malformed("incomplete head".into()))?;
        let len = content_length(&headers)?
            .ok_or_else(|| HttpError::Malformed("response without content-length".into()))?;
        let mut body = vec![0u8; len];
        conn.reader.read_exact(&mut body)?;
        let close = find_header(&headers, "connection").is_some_and(|v| v.eq_ignore_ascii_case("close"));
        if close {
            self.conn = None;
        }
        Ok(ClientResponse { status, headers, body })
    }

    /// GETs `target` from `authority` (`host:port`). A kept-alive
    /// connection the server has since closed is reopened once.
    pub fn get(&mut self, authority: &str, target: &str) -> Result<ClientResponse, HttpError> {
        let reused = match &self.conn {
            Some(c) if c.authority == authority => true,
            _ => {
                self.open(authority)?;
                false
            }
        };
        match self.exchange(authority, target) {
            Ok(r) => Ok(r),
            Err(HttpError::Closed | HttpError::Io(_)) if reused => {
                self.open(authority)?;
                self.exchange(authority, target)
            }
            Err(e) => {
                self.conn = None;
                Err(e)
            }
        }
    }

    pub fn get_url(&mut self, url: &Url) -> Result<ClientResponse, HttpError> {
        let (authority, target) = split_url(url)?;
        self.get(&authority, &target)
    }
}

/// Splits an `http` URL into `host:port` and the request target.
pub fn split_url(url: &Url) -> Result<(String, String), HttpError> {
    if url.scheme() != "http" {
        return Err(HttpError::BadUrl(url.to_string()));
    }
    let host = url.host_str().ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
    let port = url.port_or_known_default().unwrap_or(80);
    let mut target = url.path().to_string();
    if let Some(q) = url.query() {
        target.push('?');
        target.push_str(q);
    }
    Ok((format!("{host}:{port}"), target))
}

/// One-shot GET of an absolute URL.
pub fn get(url: &str) -> Result<ClientResponse, HttpError> {
    let url = Url::parse(url).map_err(|_| HttpError::BadUrl(url.to_string()))?;
    HttpClient::default().get_url(&url)
}
