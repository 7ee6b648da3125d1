//! Experiment scenario files: one `key=value` per line, `#` comments.
//!
//! Required keys are `clients`, `level` and `dataset`. The rest default to
//! `lambda=5`, `buffer=1`, `queue=1`, `warmup=false`, `seed=0`, no cache,
//! no throttle, and a policy and attribute set taken from the dataset.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pcvault_core::manifest::EncryptionLevel;
use pcvault_core::policy::{parse_policy, AttributeSet, PolicyTree};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("scenario line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub clients: usize,
    /// Mean gap between client starts, seconds.
    pub lambda: f64,
    pub buffer: f64,
    pub queue: usize,
    pub level: EncryptionLevel,
    /// Policy the registered clients must satisfy.
    pub policy: Option<PolicyTree>,
    /// Attributes registered for every client; overrides `policy`.
    pub attrs: Option<AttributeSet>,
    /// Cache capacity in MiB; no cache when absent.
    pub cache_mb: Option<f64>,
    pub warmup: bool,
    pub dataset: PathBuf,
    pub seed: u64,
    /// Per-connection origin pacing.
    pub throttle: Option<u64>,
}

const KEYS: [&str; 12] = [
    "clients", "lambda", "buffer", "queue", "level", "policy", "attrs", "cache_mb", "warmup", "dataset", "seed", "throttle",
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario {
            clients: 0,
            lambda: 5.0,
            buffer: 1.0,
            queue: 1,
            level: EncryptionLevel::None,
            policy: None,
            attrs: None,
            cache_mb: None,
            warmup: false,
            dataset: PathBuf::new(),
            seed: 0,
            throttle: None,
        };
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ScenarioError { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let bad = |what: &str| err(format!("{key}: expected {what}, found `{value}`"));
            let positive = |v: f64| v > 0.0 && v.is_finite();
            match key {
                "clients" => s.clients = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| bad("a positive integer"))?,
                "lambda" => s.lambda = value.parse().ok().filter(|&v| positive(v)).ok_or_else(|| bad("positive seconds"))?,
                "buffer" => s.buffer = value.parse().ok().filter(|&v| positive(v)).ok_or_else(|| bad("positive seconds"))?,
                "queue" => s.queue = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| bad("a positive integer"))?,
                "level" => s.level = value.parse().map_err(|_| bad("NONE, FULL or a pattern"))?,
                "policy" => s.policy = Some(parse_policy(value).map_err(|e| err(format!("policy: {e}")))?),
                "attrs" => s.attrs = Some(value.parse().map_err(|e| err(format!("attrs: {e}")))?),
                "cache_mb" => {
                    s.cache_mb = Some(value.parse().ok().filter(|&v: &f64| v >= 0.0 && v.is_finite()).ok_or_else(|| bad("non-negative MiB"))?)
                }
                "warmup" => s.warmup = value.parse().map_err(|_| bad("true or false"))?,
                "dataset" if value.is_empty() => return Err(bad("a directory")),
                "dataset" => s.dataset = PathBuf::from(value),
                "seed" => s.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
                "throttle" => s.throttle = Some(value.parse().ok().filter(|&n| n > 0).ok_or_else(|| bad("bytes per second"))?),
                _ => unreachable!(),
            }
        }
        let end = text.lines().count() + 1;
        for key in ["clients", "level", "dataset"] {
            if !seen.contains(key) {
                return Err(ScenarioError {
                    line: end,
                    message: format!("missing key `{key}`"),
                });
            }
        }
        Ok(s)
    }

    /// Parses a file; a relative dataset path is taken from the file's directory.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        let mut s = Scenario::parse(&text)?;
        if s.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                s.dataset = dir.join(&s.dataset);
            }
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "clients={}\nlambda={}\nbuffer={}\nqueue={}\nlevel={}\nwarmup={}\ndataset={}\nseed={}\n",
            self.clients,
            self.lambda,
            self.buffer,
            self.queue,
            self.level,
            self.warmup,
            self.dataset.display(),
            self.seed
        );
        if let Some(q) = &self.policy {
            out.push_str(&format!("policy={q}\n"));
        }
        if let Some(a) = &self.attrs {
            out.push_str(&format!("attrs={a}\n"));
        }
        if let Some(mb) = self.cache_mb {
            out.push_str(&format!("cache_mb={mb}\n"));
        }
        if let Some(t) = self.throttle {
            out.push_str(&format!("throttle={t}\n"));
        }
        out
    }

    pub fn cache_bytes(&self) -> Option<u64> {
        self.cache_mb.map(|mb| (mb * 1024.0 * 1024.0).round() as u64)
    }
}
