//! Loopback streaming experiments.
//!
//! Origin, license service, cache and every client run as separate
//! `pcvault` processes. Services announce their address on the first line
//! of stdout; clients leave their session CSVs under the pass directory.
//! A warm-up pass, when requested, runs the same clients at the same
//! offsets before the measured pass; the cache log is cleared in between
//! but the cache contents are kept.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use pcvault_core::manifest::{parse_mpd, Manifest};
use pcvault_core::policy::{parse_policy, AttributeSet};
use pcvault_net::cache::{hit_rate, mean_response_ms, parse_access_log, AccessRecord, Outcome};
use pcvault_net::client::{compute_rebuffering, parse_frames_csv, parse_stalls_csv, SessionLog};
use pcvault_net::http::get;
use pcvault_net::license::EXPIRY_ATTRIBUTE;
use pcvault_net::schedule::schedule_poisson;

use crate::dataset::manifest_path;
use crate::keyfiles::{satisfying_attributes, MASTER_FILE, PUBLIC_FILE};
use crate::procstat::{cpu_csv, process_cpu_seconds, reaped_children_cpu_seconds, CpuSampler};
use crate::scenario::Scenario;
use crate::{csv_body, csv_f64, read_file, write_file, HarnessError, Result};

/// Directory inside a dataset holding `pub.key` and `master.key`.
pub const KEYS_DIR: &str = "keys";
pub const SUMMARY_HEADER: &str = "pass,scope,metric,value";
/// Expiry written for experiment registrations.
const REGISTRATION_EXPIRY: &str = "29991231";
const SERVICE_START_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub client: usize,
    pub offset_s: f64,
    pub error: Option<String>,
    pub frames: usize,
    pub stalls: usize,
    pub stall_ms: f64,
    pub rebuffering_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheResult {
    pub requests: usize,
    pub hits: usize,
    pub hit_rate_pct: f64,
    pub mean_response_ms: Option<f64>,
    pub mean_hit_ms: Option<f64>,
    pub mean_miss_ms: Option<f64>,
    pub records: Vec<AccessRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassResult {
    pub name: String,
    pub clients: Vec<ClientResult>,
    pub cache: Option<CacheResult>,
    /// CPU seconds consumed during the pass, per stage.
    pub cpu: Vec<(String, f64)>,
}

impl PassResult {
    pub fn mean_rebuffering_pct(&self) -> f64 {
        let ok: Vec<f64> = self
            .clients
            .iter()
            .filter(|c| c.error.is_none())
            .map(|c| c.rebuffering_pct)
            .collect();
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().fold(0.0, |a, b| a + b) / ok.len() as f64
        }
    }

    pub fn aborted(&self) -> usize {
        self.clients.iter().filter(|c| c.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub passes: Vec<PassResult>,
}

impl ExperimentReport {
    pub fn measured(&self) -> &PassResult {
        self.passes.last().expect("at least one pass")
    }
}

/// A child service, killed on drop.
struct Service {
    name: &'static str,
    child: Child,
    addr: String,
}

impl Service {
    fn spawn(name: &'static str, mut cmd: Command) -> Result<Service> {
        let fail = |message: String| HarnessError::ServiceStart {
            service: name.to_string(),
            message,
        };
        let mut child = cmd
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let _ = tx.send(lines.next());
            // keep draining so the child never blocks on a full pipe
            for _ in lines {}
        });
        let line = match rx.recv_timeout(SERVICE_START_TIMEOUT) {
            Ok(Some(Ok(line))) => line,
            Ok(_) => {
                let status = child.wait().map(|s| s.to_string()).unwrap_or_default();
                return Err(fail(format!("exited before announcing an address ({status})")));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail("no address announced".into()));
            }
        };
        let addr = line
            .strip_prefix("listening on http://")
            .ok_or_else(|| fail(format!("unexpected announcement `{line}`")))?
            .trim()
            .to_string();
        Ok(Service { name, child, addr })
    }

    fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    fn cpu_seconds(&self) -> f64 {
        process_cpu_seconds(self.child.id()).unwrap_or(0.0)
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Attributes registered for every client: the scenario's own, or a set
/// satisfying the scenario (else dataset) policy. Any `exp` is dropped
/// since the registry carries expiry separately.
fn client_attributes(s: &Scenario, m: &Manifest) -> Result<AttributeSet> {
    let attrs = match (&s.attrs, &s.policy, &m.policy_hint) {
        (Some(a), _, _) => a.clone(),
        (None, Some(q), _) => satisfying_attributes(q)
            .ok_or_else(|| HarnessError::Invalid(format!("policy `{q}` cannot be satisfied")))?,
        (None, None, Some(hint)) => {
            let q = parse_policy(hint)?;
            satisfying_attributes(&q).ok_or_else(|| HarnessError::Invalid(format!("policy `{q}` cannot be satisfied")))?
        }
        (None, None, None) => return Err(HarnessError::Invalid("no policy to register clients against".into())),
    };
    let mut out = AttributeSet::new();
    for (name, value) in attrs.iter().filter(|(n, _)| *n != EXPIRY_ATTRIBUTE) {
        out = match value {
            None => out.with_tag(name)?,
            Some(v) => out.with_numeric(name, v)?,
        };
    }
    Ok(out)
}

pub fn client_id(i: usize) -> String {
    format!("client{i:02}")
}

/// Runs the scenario with `exe` as the `pcvault` binary and writes
/// `summary.csv`, `cpu_samples.csv` and per-pass session and cache logs
/// under `out_dir`.
pub fn run_experiment(s: &Scenario, out_dir: &Path, exe: &Path) -> Result<ExperimentReport> {
    let mpd = manifest_path(&s.dataset, s.level);
    let manifest = parse_mpd(&String::from_utf8_lossy(&read_file(&mpd)?))?;
    if manifest.encryption_level != s.level {
        return Err(HarnessError::Invalid(format!(
            "{} declares level {}, scenario asks for {}",
            mpd.display(),
            manifest.encryption_level,
            s.level
        )));
    }
    write_file(&out_dir.join("scenario.txt"), s.to_text())?;

    let mut origin_cmd = Command::new(exe);
    origin_cmd.arg("serve-origin").arg("--root").arg(&s.dataset).args(["--bind", "127.0.0.1:0"]);
    if let Some(t) = s.throttle {
        origin_cmd.args(["--throttle", &t.to_string()]);
    }
    let origin = Service::spawn("origin", origin_cmd)?;

    let license = if s.level.is_encrypted() {
        let attrs = client_attributes(s, &manifest)?;
        let registry: String = (0..s.clients)
            .map(|i| format!("{},{attrs},{REGISTRATION_EXPIRY}\n", client_id(i)))
            .collect();
        let registry_path = out_dir.join("registry.txt");
        write_file(&registry_path, registry)?;
        let keys = s.dataset.join(KEYS_DIR);
        let mut cmd = Command::new(exe);
        cmd.arg("serve-license")
            .arg("--registry")
            .arg(&registry_path)
            .arg("--pub")
            .arg(keys.join(PUBLIC_FILE))
            .arg("--master")
            .arg(keys.join(MASTER_FILE))
            .args(["--bind", "127.0.0.1:0"]);
        Some(Service::spawn("license", cmd)?)
    } else {
        None
    };

    let cache = match s.cache_bytes() {
        Some(bytes) => {
            let mut cmd = Command::new(exe);
            cmd.args(["serve-cache", "--upstream", &origin.addr, "--bind", "127.0.0.1:0"])
                .args(["--capacity-bytes", &bytes.to_string()]);
            Some(Service::spawn("cache", cmd)?)
        }
        None => None,
    };
    let services: Vec<&Service> = [Some(&origin), license.as_ref(), cache.as_ref()].into_iter().flatten().collect();

    let front = cache.as_ref().unwrap_or(&origin);
    let mpd_url = format!("{}/{}.mpd", front.base_url(), s.level);
    let offsets = schedule_poisson(s.clients, s.lambda, s.seed);
    let epoch = Instant::now();
    let sampler = CpuSampler::start(Duration::from_secs(1), epoch);
    for svc in &services {
        sampler.watch(svc.name, svc.child.id());
    }

    let pass_names: &[&str] = if s.warmup { &["warmup", "measured"] } else { &["measured"] };
    let mut passes = Vec::new();
    for &name in pass_names {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        let service_cpu: Vec<f64> = services.iter().map(|svc| svc.cpu_seconds()).collect();
        let children_cpu = reaped_children_cpu_seconds();

        let clients = std::thread::scope(|scope| {
            let handles: Vec<_> = offsets
                .iter()
                .enumerate()
                .map(|(i, &offset)| {
                    let (dir, mpd_url, sampler, manifest) = (&dir, &mpd_url, &sampler, &manifest);
                    let license_url = license.as_ref().map(Service::base_url);
                    scope.spawn(move || {
                        let start = Instant::now() + Duration::from_secs_f64(offset);
                        std::thread::sleep(start.saturating_duration_since(Instant::now()));
                        run_client(exe, i, offset, s, mpd_url, license_url.as_deref(), dir, sampler, manifest)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client thread")).collect::<Vec<_>>()
        });

        let cache_result = match &cache {
            Some(c) => Some(collect_cache(c, &dir)?),
            None => None,
        };
        let mut cpu: Vec<(String, f64)> = services
            .iter()
            .zip(service_cpu)
            .map(|(svc, before)| (svc.name.to_string(), svc.cpu_seconds() - before))
            .collect();
        cpu.push(("clients".to_string(), reaped_children_cpu_seconds() - children_cpu));
        passes.push(PassResult {
            name: name.to_string(),
            clients,
            cache: cache_result,
            cpu,
        });
    }
    write_file(&out_dir.join("cpu_samples.csv"), cpu_csv(&sampler.finish()))?;
    let report = ExperimentReport { manifest, passes };
    write_file(&out_dir.join("summary.csv"), summary_csv(&report))?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_client(
    exe: &Path,
    i: usize,
    offset_s: f64,
    s: &Scenario,
    mpd_url: &str,
    license_url: Option<&str>,
    dir: &Path,
    sampler: &CpuSampler,
    manifest: &Manifest,
) -> ClientResult {
    let prefix = dir.join(format!("{}_", client_id(i)));
    let mut cmd = Command::new(exe);
    cmd.args(["stream", "--URL", mpd_url])
        .args(["--buffer", &s.buffer.to_string()])
        .args(["--download-queue", &s.queue.to_string()])
        .arg("--log")
        .arg(&prefix);
    if let Some(url) = license_url {
        cmd.args(["--decrypt", "--license", url, "--client-id", &client_id(i)]);
    }
    let mut result = ClientResult {
        client: i,
        offset_s,
        error: None,
        frames: 0,
        stalls: 0,
        stall_ms: 0.0,
        rebuffering_pct: 0.0,
    };
    let outcome = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .and_then(|child| {
            sampler.watch(&client_id(i), child.id());
            let pid = child.id();
            let out = child.wait_with_output();
            sampler.unwatch(pid);
            out
        });
    let error = match outcome {
        Err(e) => Some(format!("spawn failed: {e}")),
        Ok(out) if !out.status.success() => {
            let stderr = String::from_utf8_lossy(&out.stderr);
            Some(stderr.lines().last().unwrap_or("").trim().to_string()).filter(|m| !m.is_empty()).or(Some(out.status.to_string()))
        }
        Ok(_) => match read_session(&prefix) {
            Ok(log) => {
                result.frames = log.frames.len();
                result.stalls = log.stalls.len();
                result.stall_ms = log.total_stall_ms();
                result.rebuffering_pct = compute_rebuffering(&log, manifest.duration_seconds());
                None
            }
            Err(e) => Some(e.to_string()),
        },
    };
    if let Some(msg) = &error {
        let _ = write_file(&PathBuf::from(format!("{}error.txt", prefix.display())), format!("{msg}\n"));
    }
    result.error = error;
    result
}

/// Reads `<prefix>frames.csv` and `<prefix>stalls.csv`.
pub fn read_session(prefix: &Path) -> Result<SessionLog> {
    let read = |suffix: &str| -> Result<String> {
        let path = PathBuf::from(format!("{}{suffix}", prefix.display()));
        Ok(String::from_utf8_lossy(&read_file(&path)?).into_owned())
    };
    Ok(SessionLog {
        frames: parse_frames_csv(&read("frames.csv")?).map_err(HarnessError::Csv)?,
        stalls: parse_stalls_csv(&read("stalls.csv")?).map_err(HarnessError::Csv)?,
        ..SessionLog::default()
    })
}

fn collect_cache(cache: &Service, dir: &Path) -> Result<CacheResult> {
    let fetch = |path: &str| {
        get(&format!("{}{path}", cache.base_url())).map_err(|e| HarnessError::Invalid(format!("cache {path}: {e}")))
    };
    let text = String::from_utf8_lossy(&fetch("/_cache/log")?.body).into_owned();
    write_file(&dir.join("cache_access.csv"), &text)?;
    fetch("/_cache/reset")?;
    let records = parse_access_log(&text).map_err(|e| HarnessError::Csv(e.to_string()))?;
    let hits = records.iter().filter(|r| r.outcome == Outcome::Hit).count();
    Ok(CacheResult {
        requests: records.len(),
        hits,
        hit_rate_pct: hit_rate(&records).unwrap_or(0.0),
        mean_response_ms: mean_response_ms(&records, None),
        mean_hit_ms: mean_response_ms(&records, Some(Outcome::Hit)),
        mean_miss_ms: mean_response_ms(&records, Some(Outcome::Miss)),
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub pass: String,
    pub scope: String,
    pub metric: String,
    pub value: f64,
}

pub fn summary_rows(report: &ExperimentReport) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for p in &report.passes {
        let mut push = |scope: &str, metric: &str, value: f64| {
            rows.push(SummaryRow {
                pass: p.name.clone(),
                scope: scope.to_string(),
                metric: metric.to_string(),
                value,
            })
        };
        for c in &p.clients {
            let scope = client_id(c.client);
            push(&scope, "start_offset_s", c.offset_s);
            push(&scope, "aborted", f64::from(u8::from(c.error.is_some())));
            push(&scope, "frames", c.frames as f64);
            push(&scope, "stalls", c.stalls as f64);
            push(&scope, "stall_ms", c.stall_ms);
            push(&scope, "rebuffering_pct", c.rebuffering_pct);
        }
        push("all", "mean_rebuffering_pct", p.mean_rebuffering_pct());
        push("all", "aborted_clients", p.aborted() as f64);
        if let Some(c) = &p.cache {
            push("cache", "requests", c.requests as f64);
            push("cache", "hits", c.hits as f64);
            push("cache", "hit_rate_pct", c.hit_rate_pct);
            for (metric, v) in [
                ("mean_response_ms", c.mean_response_ms),
                ("mean_hit_response_ms", c.mean_hit_ms),
                ("mean_miss_response_ms", c.mean_miss_ms),
            ] {
                if let Some(v) = v {
                    push("cache", metric, v);
                }
            }
        }
        for (stage, secs) in &p.cpu {
            push(&format!("cpu:{stage}"), "cpu_s", *secs);
        }
    }
    rows
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in summary_rows(report) {
        out.push_str(&format!("{},{},{},{}\n", r.pass, r.scope, r.metric, r.value));
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    csv_body(text, SUMMARY_HEADER)?
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [pass, scope, metric, value] = f[..] else {
                return Err(HarnessError::Csv(format!("`{line}`: expected 4 fields")));
            };
            Ok(SummaryRow {
                pass: pass.to_string(),
                scope: scope.to_string(),
                metric: metric.to_string(),
                value: csv_f64(value)?,
            })
        })
        .collect()
}

/// Frame index of a request path, ignoring which level it belongs to.
pub fn frame_of_path(path: &str) -> Option<u64> {
    let name = path.rsplit('/').next()?;
    name.strip_prefix("f_")?.split('.').next()?.parse().ok()
}

#[cfg(test)]
mod tests {
    use pcvault_core::manifest::EncryptionLevel;

    use super::*;

    fn report() -> ExperimentReport {
        let manifest = Manifest {
            frame_rate: 24,
            frame_count: 48,
            media_template: "NONE/f_$Index$.ply".into(),
            encryption_level: EncryptionLevel::None,
            policy_hint: None,
            license_url: None,
        };
        let client = |i, error: Option<&str>| ClientResult {
            client: i,
            offset_s: i as f64 * 1.5,
            error: error.map(str::to_string),
            frames: if error.is_some() { 0 } else { 48 },
            stalls: i,
            stall_ms: 250.0 * i as f64,
            rebuffering_pct: 12.5 * i as f64,
        };
        ExperimentReport {
            manifest,
            passes: vec![PassResult {
                name: "measured".into(),
                clients: vec![client(0, None), client(1, None), client(2, Some("http 404"))],
                cache: Some(CacheResult {
                    requests: 4,
                    hits: 1,
                    hit_rate_pct: 25.0,
                    mean_response_ms: Some(1.5),
                    mean_hit_ms: Some(0.25),
                    mean_miss_ms: None,
                    records: Vec::new(),
                }),
                cpu: vec![("origin".into(), 0.5), ("clients".into(), 2.0)],
            }],
        }
    }

    #[test]
    fn summary_roundtrip() {
        let r = report();
        let rows = parse_summary_csv(&summary_csv(&r)).unwrap();
        assert_eq!(rows, summary_rows(&r));
        let get = |scope: &str, metric: &str| rows.iter().find(|x| x.scope == scope && x.metric == metric).map(|x| x.value);
        assert_eq!(get("all", "mean_rebuffering_pct"), Some(6.25));
        assert_eq!(get("all", "aborted_clients"), Some(1.0));
        assert_eq!(get("client02", "aborted"), Some(1.0));
        assert_eq!(get("cache", "hit_rate_pct"), Some(25.0));
        assert_eq!(get("cache", "mean_miss_response_ms"), None);
        assert_eq!(get("cpu:origin", "cpu_s"), Some(0.5));
        assert!(parse_summary_csv("pass,scope\n").is_err());
    }

    #[test]
    fn paths_to_frames() {
        assert_eq!(frame_of_path("/X/f_017.eply"), Some(17));
        assert_eq!(frame_of_path("/NONE/f_017.ply"), Some(17));
        assert_eq!(frame_of_path("/X.mpd"), None);
    }

    #[test]
    fn registration_attributes() {
        let mut s = Scenario::parse("clients=1\nlevel=X\ndataset=d\npolicy=subscriber and exp >= 20260101").unwrap();
        let m = report().manifest;
        assert_eq!(client_attributes(&s, &m).unwrap().to_string(), "subscriber");
        s.attrs = Some("a;b=4".parse().unwrap());
        assert_eq!(client_attributes(&s, &m).unwrap().to_string(), "a;b=4");
        s.attrs = None;
        s.policy = None;
        assert!(client_attributes(&s, &m).is_err());
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scenario::parse(&format!("clients=1\nlevel=X\ndataset={}", dir.path().display())).unwrap();
        assert!(run_experiment(&s, &dir.path().join("out"), Path::new("/nonexistent")).is_err());
    }
}
