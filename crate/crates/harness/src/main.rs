use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pcvault_core::abe::keygen;
use pcvault_core::codec::{decrypt_frame, encrypt_frame, zero_fill};
use pcvault_core::metrics::report_csv;
use pcvault_core::pattern::{Granularity, Pattern};
use pcvault_core::ply::write_ply;
use pcvault_core::policy::{parse_policy, AttributeSet};
use pcvault_core::synth::room_scene;
use pcvault_harness::bench::{bench_codec, bench_csv, quality_report, BenchKeys};
use pcvault_harness::dataset::{gen_dataset, DatasetSpec, EncryptedVariants};
use pcvault_harness::experiment::{run_experiment, summary_csv, KEYS_DIR};
use pcvault_harness::keyfiles::{create_authority, load_authority, publish, read_master, read_params, read_user_key};
use pcvault_harness::scenario::Scenario;
use pcvault_harness::{read_file, write_file, HarnessError, Result};
use pcvault_net::cache::{run_cache, CacheConfig};
use pcvault_net::client::{compute_rebuffering, fetch_key, fetch_params, stream, KeyMaterial, PlayerConfig};
use pcvault_net::http::Server;
use pcvault_net::license::{parse_date, serve_license, ClientRegistry, LicenseClock};
use pcvault_net::origin::{serve_origin, OriginConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "pcvault", version, about = "Selectively encrypted point-cloud streaming toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Authority and user key files.
    #[command(subcommand)]
    Keys(KeysCommand),
    /// Encrypt one PLY frame.
    Encrypt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// XYZ, XY, X, 2X, 2XY, ... or FULL.
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        policy: String,
        #[arg(long = "pub")]
        public: PathBuf,
    },
    /// Restore an encrypted frame.
    Decrypt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "priv")]
        private: PathBuf,
    },
    /// Write the zero-filled view of an encrypted frame.
    ZeroFill {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic frame sequence with manifests.
    GenDataset {
        #[arg(long, default_value_t = 10_000)]
        points: usize,
        #[arg(long, default_value_t = 120)]
        frames: u64,
        #[arg(long, default_value_t = 24)]
        fps: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Encrypted variants to add, e.g. X,XY,FULL.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<String>,
        #[arg(long, default_value = "subscriber")]
        policy: String,
        /// Authority directory; defaults to <out>/keys, created if missing.
        #[arg(long)]
        keys: Option<PathBuf>,
        #[arg(long)]
        license_url: Option<String>,
    },
    /// Encrypt/decrypt timing per pattern as CSV.
    Bench {
        #[command(flatten)]
        cloud: CloudSource,
        #[arg(long, value_delimiter = ',', default_value = "FULL,XYZ,XY,X,2X")]
        patterns: Vec<String>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chamfer and Hausdorff distance of zero-filled views as CSV.
    Quality {
        #[command(flatten)]
        cloud: CloudSource,
        #[arg(long, value_delimiter = ',', default_value = "XYZ,XY,X,2X,5X")]
        patterns: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static file server for a dataset directory.
    ServeOrigin {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Per-connection body rate in bytes per second.
        #[arg(long)]
        throttle: Option<u64>,
        /// Extra latency for one path, as /path=seconds. Repeatable.
        #[arg(long = "delay")]
        delays: Vec<String>,
    },
    /// Key issuing service.
    ServeLicense {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long = "pub")]
        public: PathBuf,
        #[arg(long)]
        master: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8082")]
        bind: String,
        /// Fixed date (YYYYMMDD) for expiry checks instead of the system clock.
        #[arg(long)]
        today: Option<String>,
    },
    /// LRU caching proxy.
    ServeCache {
        /// host:port of the origin.
        #[arg(long)]
        upstream: String,
        #[arg(long, default_value = "127.0.0.1:8081")]
        bind: String,
        #[arg(long, conflicts_with = "capacity_mb")]
        capacity_bytes: Option<u64>,
        #[arg(long)]
        capacity_mb: Option<f64>,
        /// Keep cached bodies in this directory.
        #[arg(long)]
        disk: Option<PathBuf>,
    },
    /// Play a manifest and log the session.
    Stream(StreamArgs),
    /// Run a scenario file.
    Experiment {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KeysCommand {
    /// Create pub.key and master.key.
    Setup {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Publish the attributes of this policy right away.
        #[arg(long)]
        publish: Option<String>,
    },
    /// Publish the attributes of a policy into pub.key.
    Publish {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        policy: String,
    },
    /// Issue a user key.
    Keygen {
        #[arg(long)]
        dir: PathBuf,
        /// e.g. researcher;univx;exp=20261231
        #[arg(long)]
        attrs: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CloudSource {
    /// PLY file to measure.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Measure a synthetic scene with this many points instead.
    #[arg(long)]
    points: Option<usize>,
}

impl CloudSource {
    fn bytes(&self) -> Result<Vec<u8>> {
        match (&self.cloud, self.points) {
            (Some(path), _) => read_file(path),
            (None, Some(n)) => Ok(write_ply(&room_scene(n, 0, 0), None)),
            (None, None) => unreachable!("clap enforces the group"),
        }
    }
}

#[derive(Args)]
struct StreamArgs {
    /// Manifest URL.
    #[arg(long = "URL")]
    url: String,
    /// Buffer length in seconds.
    #[arg(long, default_value_t = 1.0)]
    buffer: f64,
    #[arg(long)]
    decrypt: bool,
    /// Public parameters file.
    #[arg(long = "pub")]
    public: Option<PathBuf>,
    /// User key file.
    #[arg(long = "priv")]
    private: Option<PathBuf>,
    /// Fetch parameters and key from this license service instead.
    #[arg(long, requires = "client_id", conflicts_with_all = ["public", "private"])]
    license: Option<String>,
    #[arg(long)]
    client_id: Option<String>,
    #[arg(long, default_value_t = 1)]
    download_queue: usize,
    /// Prefix for <prefix>frames.csv and <prefix>stalls.csv.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn granularities(texts: &[String]) -> Result<Vec<Granularity>> {
    texts.iter().map(|t| Ok(t.parse()?)).collect()
}

fn announce_and_wait(server: Server) {
    println!("listening on {}", server.base_url());
    let _ = std::io::stdout().flush();
    server.wait();
}

fn service_error(service: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::ServiceStart {
        service: service.to_string(),
        message: e.to_string(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn keys_command(cmd: KeysCommand) -> Result<()> {
    match cmd {
        KeysCommand::Setup { out, seed, publish: policy } => {
            create_authority(&out, seed)?;
            if let Some(q) = policy {
                publish(&out, &parse_policy(&q)?)?;
            }
        }
        KeysCommand::Publish { dir, policy } => {
            publish(&dir, &parse_policy(&policy)?)?;
        }
        KeysCommand::Keygen { dir, attrs, out } => {
            let (pp, mk) = load_authority(&dir)?;
            let attrs: AttributeSet = attrs.parse()?;
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            let key = keygen(&pp, &mk, &attrs, now, &mut ChaCha20Rng::from_entropy())?;
            write_file(&out, key.to_bytes())?;
        }
    }
    Ok(())
}

fn stream_command(a: StreamArgs) -> Result<()> {
    let stream_err = |e: pcvault_net::client::StreamError| HarnessError::Invalid(e.to_string());
    let keys = match (&a.license, &a.client_id, &a.public, &a.private) {
        (Some(base), Some(id), _, _) => Some(KeyMaterial {
            params: fetch_params(base).map_err(stream_err)?,
            key: fetch_key(base, id).map_err(stream_err)?,
        }),
        (None, _, Some(p), Some(k)) => Some(KeyMaterial {
            params: read_params(p)?,
            key: read_user_key(k)?,
        }),
        (None, _, None, None) => None,
        _ => return Err(HarnessError::Invalid("--pub and --priv go together".into())),
    };
    let cfg = PlayerConfig {
        mpd_url: a.url,
        buffer_seconds: a.buffer,
        decrypt: a.decrypt,
        keys,
        download_queue: a.download_queue,
    };
    let log = stream(&cfg).map_err(stream_err)?;
    if let Some(prefix) = &a.log {
        let dir = prefix.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = prefix.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        log.write_csvs(dir, &name).map_err(|source| HarnessError::Io {
            path: prefix.clone(),
            source,
        })?;
    }
    let duration = log.frames.len() as f64 / f64::from(log.frame_rate.max(1));
    println!(
        "frames={} stalls={} stall_ms={:.1} rebuffering_pct={:.3}",
        log.frames.len(),
        log.stalls.len(),
        log.total_stall_ms(),
        compute_rebuffering(&log, duration)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keys(k) => keys_command(k)?,
        Command::Encrypt {
            input,
            output,
            pattern,
            policy,
            public,
        } => {
            let g: Granularity = pattern.parse()?;
            let enc = encrypt_frame(
                &read_file(&input)?,
                g,
                &read_params(&public)?,
                &parse_policy(&policy)?,
                &mut ChaCha20Rng::from_entropy(),
            )?;
            write_file(&output, enc)?;
        }
        Command::Decrypt { input, output, private } => {
            write_file(&output, decrypt_frame(&read_file(&input)?, &read_user_key(&private)?)?)?;
        }
        Command::ZeroFill { input, output } => write_file(&output, zero_fill(&read_file(&input)?)?)?,
        Command::GenDataset {
            points,
            frames,
            fps,
            out,
            seed,
            levels,
            policy,
            keys,
            license_url,
        } => {
            let spec = DatasetSpec {
                points_per_frame: points,
                frame_count: frames,
                frame_rate: fps,
                seed,
            };
            let levels = granularities(&levels)?;
            let written = if levels.is_empty() {
                gen_dataset(&spec, &out, None)?
            } else {
                let dir = keys.unwrap_or_else(|| out.join(KEYS_DIR));
                if !dir.join(pcvault_harness::keyfiles::PUBLIC_FILE).exists() {
                    create_authority(&dir, Some(seed))?;
                }
                let policy = parse_policy(&policy)?;
                let params = publish(&dir, &policy)?;
                let variants = EncryptedVariants {
                    levels,
                    params: &params,
                    policy: &policy,
                    license_url,
                };
                gen_dataset(&spec, &out, Some(&variants))?
            };
            for m in written {
                println!("{}.mpd: {} frames", m.encryption_level, m.frame_count);
            }
        }
        Command::Bench {
            cloud,
            patterns,
            reps,
            out,
        } => {
            let rows = bench_codec(&cloud.bytes()?, &granularities(&patterns)?, reps, &BenchKeys::new(0))?;
            emit(out.as_deref(), &bench_csv(&rows))?;
        }
        Command::Quality { cloud, patterns, out } => {
            let patterns: Vec<Pattern> = patterns
                .iter()
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()?;
            let rows = quality_report(&cloud.bytes()?, &patterns, &BenchKeys::new(0))?;
            emit(out.as_deref(), &report_csv(&rows))?;
        }
        Command::ServeOrigin {
            root,
            bind,
            throttle,
            delays,
        } => {
            let mut table = HashMap::new();
            for d in delays {
                let (path, secs) = d
                    .rsplit_once('=')
                    .and_then(|(p, s)| Some((p.to_string(), s.parse::<f64>().ok()?)))
                    .filter(|(_, s)| *s >= 0.0 && s.is_finite())
                    .ok_or_else(|| HarnessError::Invalid(format!("bad delay `{d}`, expected /path=seconds")))?;
                table.insert(path, Duration::from_secs_f64(secs));
            }
            let config = OriginConfig {
                throttle_bytes_per_sec: throttle,
                delays: table,
            };
            announce_and_wait(serve_origin(&root, &bind, config).map_err(|e| service_error("origin", e))?);
        }
        Command::ServeLicense {
            registry,
            public,
            master,
            bind,
            today,
        } => {
            let registry = ClientRegistry::load(&registry).map_err(|e| service_error("license", e))?;
            let clock = match today {
                None => LicenseClock::System,
                Some(t) => LicenseClock::Fixed(parse_date(&t).ok_or_else(|| HarnessError::Invalid(format!("bad date `{t}`")))?),
            };
            let server = serve_license(registry, read_params(&public)?, read_master(&master)?, &bind, clock)
                .map_err(|e| service_error("license", e))?;
            announce_and_wait(server);
        }
        Command::ServeCache {
            upstream,
            bind,
            capacity_bytes,
            capacity_mb,
            disk,
        } => {
            let capacity = capacity_bytes
                .or(capacity_mb.map(|mb| (mb * 1024.0 * 1024.0) as u64))
                .ok_or_else(|| HarnessError::Invalid("give --capacity-bytes or --capacity-mb".into()))?;
            let mut config = CacheConfig::in_memory(capacity);
            config.disk_dir = disk;
            let handle = run_cache(&upstream, &bind, config).map_err(|e| service_error("cache", e))?;
            announce_and_wait(handle.server);
        }
        Command::Stream(a) => stream_command(a)?,
        Command::Experiment { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let exe = std::env::current_exe().map_err(|source| HarnessError::Io {
                path: PathBuf::from("current_exe"),
                source,
            })?;
            let report = run_experiment(&s, &out, &exe)?;
            print!("{}", summary_csv(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcvault: {e}");
            ExitCode::FAILURE
        }
    }
}
