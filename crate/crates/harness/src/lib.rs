//! Dataset generation, codec benchmarks, obfuscation reports and loopback
//! streaming experiments behind the `pcvault` binary.

pub mod bench;
pub mod dataset;
pub mod experiment;
pub mod keyfiles;
pub mod procstat;
pub mod scenario;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ply(#[from] pcvault_core::ply::PlyError),
    #[error(transparent)]
    Codec(#[from] pcvault_core::codec::CodecError),
    #[error(transparent)]
    Abe(#[from] pcvault_core::abe::AbeError),
    #[error(transparent)]
    Policy(#[from] pcvault_core::policy::PolicyError),
    #[error(transparent)]
    Pattern(#[from] pcvault_core::pattern::PatternError),
    #[error(transparent)]
    Manifest(#[from] pcvault_core::manifest::ManifestError),
    #[error(transparent)]
    Metrics(#[from] pcvault_core::metrics::MetricsError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error("{service} failed to start: {message}")]
    ServiceStart { service: String, message: String },
    #[error("{0}")]
    Csv(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Checks the header of a CSV document and returns its data lines.
pub(crate) fn csv_body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = &'a str>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => Ok(lines.filter(|l| !l.is_empty())),
        other => Err(HarnessError::Csv(format!(
            "expected header `{header}`, found `{}`",
            other.unwrap_or("")
        ))),
    }
}

pub(crate) fn csv_f64(field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| HarnessError::Csv(format!("bad number `{field}`")))
}
