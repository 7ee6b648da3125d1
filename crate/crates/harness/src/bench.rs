//! Codec timing statistics and obfuscation reports for a single cloud.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use pcvault_core::abe::{keygen, setup, PolicySealer, PublicParams, UserKey};
use pcvault_core::codec::{decrypt_frame, encrypt_frame};
use pcvault_core::metrics::{obfuscation_report, ReportRow};
use pcvault_core::pattern::{Granularity, Pattern};
use pcvault_core::ply::parse_ply;
use pcvault_core::policy::{parse_policy, PolicyTree};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::{csv_body, csv_f64, HarnessError, Result};

pub const BENCH_HEADER: &str = "pattern,op,mean_ms,median_ms,p95_ms,reduction_vs_full_pct";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Encrypt,
    Decrypt,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Encrypt => "encrypt",
            Op::Decrypt => "decrypt",
        })
    }
}

impl FromStr for Op {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encrypt" => Ok(Op::Encrypt),
            "decrypt" => Ok(Op::Decrypt),
            _ => Err(HarnessError::Csv(format!("unknown op `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Stats {
    /// Nearest-rank p95; the median averages the middle pair.
    pub fn of(samples: &[f64]) -> Stats {
        assert!(!samples.is_empty(), "no samples");
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Stats {
            mean: s.iter().sum::<f64>() / n as f64,
            median,
            p95: s[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pattern: Granularity,
    pub op: Op,
    pub stats: Stats,
    /// Median saving relative to FULL for the same op, when FULL was run.
    pub reduction_vs_full_pct: Option<f64>,
}

/// Authority, policy and key used for timing runs.
pub struct BenchKeys {
    pub params: PublicParams,
    pub policy: PolicyTree,
    pub key: UserKey,
}

impl BenchKeys {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (mut params, mk) = setup(&mut rng).expect("seeded setup");
        let policy = parse_policy("subscriber").expect("static policy");
        params.publish_policy(&mk, &policy).expect("publish");
        let key = keygen(&params, &mk, &"subscriber".parse().expect("static attrs"), 0, &mut rng).expect("keygen");
        BenchKeys { params, policy, key }
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// Times `repetitions` encryptions of `ply` per pattern, then as many
/// decryptions of the last ciphertext. One untimed run of each op warms up.
pub fn bench_codec(ply: &[u8], patterns: &[Granularity], repetitions: usize, keys: &BenchKeys) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(HarnessError::Invalid("repetitions must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for &g in patterns {
        let mut enc = encrypt_frame(ply, g, &keys.params, &keys.policy, &mut rng)?;
        decrypt_frame(&enc, &keys.key)?;
        let mut enc_ms = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let mut out = Ok(Vec::new());
            enc_ms.push(time_ms(|| out = encrypt_frame(ply, g, &keys.params, &keys.policy, &mut rng)));
            enc = out?;
        }
        let mut dec_ms = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let mut out = Ok(Vec::new());
            dec_ms.push(time_ms(|| out = decrypt_frame(&enc, &keys.key)));
            if out? != ply {
                return Err(HarnessError::Invalid(format!("{g}: decryption did not restore the frame")));
            }
        }
        for (op, samples) in [(Op::Encrypt, enc_ms), (Op::Decrypt, dec_ms)] {
            rows.push(BenchRow {
                pattern: g,
                op,
                stats: Stats::of(&samples),
                reduction_vs_full_pct: None,
            });
        }
    }
    let full: Vec<(Op, f64)> = rows
        .iter()
        .filter(|r| r.pattern == Granularity::Full)
        .map(|r| (r.op, r.stats.median))
        .collect();
    for row in &mut rows {
        if let Some(&(_, base)) = full.iter().find(|(op, _)| *op == row.op) {
            row.reduction_vs_full_pct = Some(100.0 * (1.0 - row.stats.median / base));
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let reduction = r.reduction_vs_full_pct.map_or(String::new(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.pattern, r.op, r.stats.mean, r.stats.median, r.stats.p95, reduction
        ));
    }
    out
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    csv_body(text, BENCH_HEADER)?
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [pattern, op, mean, median, p95, reduction] = f[..] else {
                return Err(HarnessError::Csv(format!("`{line}`: expected 6 fields")));
            };
            Ok(BenchRow {
                pattern: pattern.parse()?,
                op: op.parse()?,
                stats: Stats {
                    mean: csv_f64(mean)?,
                    median: csv_f64(median)?,
                    p95: csv_f64(p95)?,
                },
                reduction_vs_full_pct: if reduction.is_empty() { None } else { Some(csv_f64(reduction)?) },
            })
        })
        .collect()
}

/// Least-squares line through the points: (slope, intercept, R²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Chamfer and Hausdorff distances between `ply` and its zero-filled view
/// under each pattern.
pub fn quality_report(ply: &[u8], patterns: &[Pattern], keys: &BenchKeys) -> Result<Vec<ReportRow>> {
    let (cloud, _) = parse_ply(ply)?;
    let sealer = PolicySealer {
        params: &keys.params,
        policy: &keys.policy,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    Ok(obfuscation_report(&cloud, patterns, &sealer, &mut rng)?)
}
