//! Static origin for manifests and pre-encrypted frames.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use percent_encoding::percent_decode_str;

use crate::http::{serve, Handler, HttpError, Request, Response, Server, ServerOptions};

#[derive(Debug, Clone, Default)]
pub struct OriginConfig {
    /// Per-connection pacing of response bodies.
    pub throttle_bytes_per_sec: Option<u64>,
    /// Extra latency before answering specific request paths.
    pub delays: HashMap<String, Duration>,
}

struct Origin {
    root: PathBuf,
    delays: HashMap<String, Duration>,
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mpd") => "application/dash+xml",
        Some("csv") => "text/csv",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto `root`, refusing anything that could escape it.
pub fn resolve(root: &Path, request_path: &str) -> Option<PathBuf> {
    let decoded = percent_decode_str(request_path).decode_utf8().ok()?;
    let rel = decoded.strip_prefix('/')?;
    let mut out = root.to_path_buf();
    for c in Path::new(rel).components() {
        match c {
            Component::Normal(part) => out.push(part),
            _ => return None,
        }
    }
    Some(out)
}

impl Handler for Origin {
    fn handle(&self, req: &Request) -> Response {
        if let Some(d) = self.delays.get(req.path()) {
            std::thread::sleep(*d);
        }
        let Some(path) = resolve(&self.root, req.path()) else {
            return Response::empty(404);
        };
        match std::fs::read(&path) {
            Ok(body) if path.is_file() => {
                Response::new(200, body).with_header("Content-Type", content_type(&path))
            }
            _ => Response::empty(404),
        }
    }
}

pub fn serve_origin(root: &Path, bind: &str, config: OriginConfig) -> Result<Server, HttpError> {
    std::fs::read_dir(root)?;
    let handler = Origin {
        root: root.to_path_buf(),
        delays: config.delays,
    };
    let opts = ServerOptions {
        throttle_bytes_per_sec: config.throttle_bytes_per_sec,
        ..ServerOptions::default()
    };
    serve(bind, Arc::new(handler), opts)
}
