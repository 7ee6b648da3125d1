//! End-to-end acceptance checks. Runs sequentially (timing checks must not
//! share the machine with the streaming runs) and prints one line per
//! criterion; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Instant;

use pcvault_core::abe::{keygen, setup, setup_with_bit_width, AbeError, MasterKey, PublicParams};
use pcvault_core::codec::{decrypt_frame, encrypt_frame, inspect, zero_fill, CodecError, COORD_WIDTH};
use pcvault_core::metrics::{brute, chamfer, hausdorff, obfuscation_report, PointSet};
use pcvault_core::pattern::{Granularity, Pattern};
use pcvault_core::ply::{parse_ply, write_ply, PointCloud, Vertex, VertexSchema};
use pcvault_core::policy::{bit_tag, compile_numeric, parse_policy, AttributeSet, Comparator, NumericLeaf};
use pcvault_core::synth::room_scene;
use pcvault_harness::bench::{bench_codec, linear_fit, BenchKeys, Op};
use pcvault_harness::dataset::{gen_dataset, DatasetSpec, EncryptedVariants};
use pcvault_harness::experiment::{frame_of_path, read_session, run_experiment, ExperimentReport, KEYS_DIR};
use pcvault_harness::keyfiles::{create_authority, publish};
use pcvault_harness::scenario::Scenario;
use pcvault_net::cache::LruStore;
use pcvault_net::client::{compute_rebuffering, SessionLog, StallRecord};
use pcvault_net::http::get;
use pcvault_net::license::{serve_license, today, ClientRegistry, LicenseClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn g(s: &str) -> Granularity {
    s.parse().unwrap()
}

fn p(s: &str) -> Pattern {
    s.parse().unwrap()
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

struct Ctx {
    exe: PathBuf,
    tmp: tempfile::TempDir,
    streaming: std::sync::OnceLock<PathBuf>,
}

impl Ctx {
    /// 5 s at 24 fps of 10k-point frames, plain and "X".
    fn streaming_dataset(&self) -> &Path {
        self.streaming.get_or_init(|| {
            let dir = self.tmp.path().join("stream5s");
            let keys = dir.join(KEYS_DIR);
            create_authority(&keys, Some(21)).unwrap();
            let policy = parse_policy("subscriber").unwrap();
            let params = publish(&keys, &policy).unwrap();
            let spec = DatasetSpec {
                points_per_frame: 10_000,
                frame_count: 120,
                frame_rate: 24,
                seed: 21,
            };
            let variants = EncryptedVariants {
                levels: vec![g("X")],
                params: &params,
                policy: &policy,
                license_url: None,
            };
            gen_dataset(&spec, &dir, Some(&variants)).unwrap();
            dir
        })
    }

    fn experiment(&self, name: &str, scenario: &str) -> ExperimentReport {
        let dataset = self.streaming_dataset();
        let s = Scenario::parse(&format!("{scenario}\ndataset={}\n", dataset.display())).unwrap();
        run_experiment(&s, &self.tmp.path().join(name), &self.exe).unwrap()
    }
}

fn authority(seed: u64) -> (PublicParams, MasterKey) {
    setup(&mut rng(seed)).unwrap()
}

fn random_cloud(r: &mut ChaCha20Rng) -> PointCloud {
    let n = 10f64.powf(r.gen_range(2.0..=5.0)).round() as usize;
    let schema = VertexSchema::canonical(r.gen(), r.gen());
    let coord = |r: &mut ChaCha20Rng| -> f64 {
        match r.gen_range(0..20) {
            0 => f64::from_bits(r.gen()),
            1 => -0.0,
            _ => r.gen_range(-1e3..1e3),
        }
    };
    let vertices = (0..n)
        .map(|_| {
            let mut v = Vertex::at(coord(r), coord(r), coord(r));
            if schema.has_normals() {
                v.normal = [r.gen(), r.gen(), r.gen()];
            }
            if schema.has_colors() {
                v.color = r.gen();
            }
            v
        })
        .collect();
    PointCloud::new(schema, vertices)
}

fn criterion_1(_: &Ctx) -> Check {
    let t = Instant::now();
    let (mut pp, mk) = authority(1);
    let policy = parse_policy("subscriber").unwrap();
    pp.publish_policy(&mk, &policy).unwrap();
    let key = keygen(&pp, &mk, &"subscriber".parse().unwrap(), 0, &mut rng(2)).unwrap();
    let patterns = ["XYZ", "XY", "X", "2X", "3X", "2XY", "FULL"].map(g);
    let vertices: usize = (0..50u64)
        .into_par_iter()
        .map(|i| -> Result<usize, String> {
            let mut r = rng(1000 + i);
            let cloud = random_cloud(&mut r);
            let bytes = write_ply(&cloud, None);
            for &pat in &patterns {
                let enc = encrypt_frame(&bytes, pat, &pp, &policy, &mut r).map_err(|e| e.to_string())?;
                let dec = decrypt_frame(&enc, &key).map_err(|e| e.to_string())?;
                ensure(dec == bytes, || format!("cloud {i} ({} vertices) differs after {pat}", cloud.len()))?;
            }
            Ok(cloud.len())
        })
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("50 clouds, {vertices} vertices, 7 patterns, byte-identical in {secs:.1} s"))
}

fn criterion_2(_: &Ctx) -> Check {
    let (mut pp, mk) = authority(3);
    let policy = parse_policy("researcher and (univx or europe)").unwrap();
    pp.publish_policy(&mk, &policy).unwrap();
    let frame = write_ply(&room_scene(200, 0, 1), None);
    let enc = encrypt_frame(&frame, g("X"), &pp, &policy, &mut rng(4)).unwrap();
    let tags = ["researcher", "univx", "europe", "student"];
    for mask in 0u32..16 {
        let mut attrs = AttributeSet::new();
        for (b, tag) in tags.iter().enumerate() {
            if mask & (1 << b) != 0 {
                attrs = attrs.with_tag(tag).unwrap();
            }
        }
        let key = keygen(&pp, &mk, &attrs, 0, &mut rng(5)).unwrap();
        let opened = decrypt_frame(&enc, &key);
        let expected = policy.eval(&attrs);
        ensure(opened.is_ok() == expected, || format!("{{{attrs}}}: eval {expected}, decrypt {opened:?}"))?;
        if let Ok(d) = opened {
            ensure(d == frame, || format!("{{{attrs}}} decrypted to other bytes"))?;
        }
    }
    let alice = keygen(&pp, &mk, &"researcher;univx".parse().unwrap(), 0, &mut rng(6)).unwrap();
    let bob = keygen(&pp, &mk, &"student;asia".parse().unwrap(), 0, &mut rng(7)).unwrap();
    ensure(decrypt_frame(&enc, &alice).as_deref() == Ok(&frame[..]), || "alice refused".into())?;
    ensure(
        matches!(decrypt_frame(&enc, &bob), Err(CodecError::Abe(AbeError::PolicyNotSatisfied))),
        || "bob not refused with PolicyNotSatisfied".into(),
    )?;

    let comparators = [Comparator::Lt, Comparator::Le, Comparator::Eq, Comparator::Ge, Comparator::Gt];
    let mut cases = 0;
    for width in 1..=6u32 {
        let top = 1u64 << width;
        for v in 0..top {
            for cmp in comparators {
                let leaf = NumericLeaf {
                    name: "n".into(),
                    cmp,
                    value: v,
                };
                let tree = compile_numeric(&leaf, width).map_err(|e| e.to_string())?;
                for held in 0..top {
                    let bits: BTreeSet<String> = (0..width).map(|b| bit_tag("n", b, held >> b & 1 == 1)).collect();
                    ensure(tree.eval(&bits) == cmp.holds(held, v), || {
                        format!("width {width}: n={held} against n {} {v}", cmp.symbol())
                    })?;
                    cases += 1;
                }
            }
        }
    }

    // the same through keys and ciphertexts at width 4
    let (mut pp4, mk4) = setup_with_bit_width(&mut rng(8), 4).unwrap();
    let keys: Vec<_> = (0..16u64)
        .map(|held| keygen(&pp4, &mk4, &AttributeSet::new().with_numeric("n", held).unwrap(), 0, &mut rng(9)).unwrap())
        .collect();
    let mut end_to_end = 0;
    for v in 0..16u64 {
        for cmp in comparators {
            let q = parse_policy(&format!("n {} {v}", cmp.symbol())).unwrap();
            pp4.publish_policy(&mk4, &q).unwrap();
            let enc = encrypt_frame(&frame, g("X"), &pp4, &q, &mut rng(10)).unwrap();
            for (held, key) in keys.iter().enumerate() {
                let ok = decrypt_frame(&enc, key).is_ok();
                ensure(ok == cmp.holds(held as u64, v), || format!("key n={held} vs `{q}`: decrypt {ok}"))?;
                end_to_end += 1;
            }
        }
    }
    Ok(format!(
        "16 subsets match eval, alice opens, bob refused; {cases} bit-compiled comparisons and {end_to_end} key/ciphertext pairs agree"
    ))
}

fn criterion_3(_: &Ctx) -> Check {
    let scene = room_scene(50_000, 0, 7);
    let patterns = ["XYZ", "XY", "X", "2X", "5X"].map(p);
    let (mut pp, mk) = authority(11);
    let policy = parse_policy("subscriber").unwrap();
    pp.publish_policy(&mk, &policy).unwrap();
    let sealer = pcvault_core::abe::PolicySealer {
        params: &pp,
        policy: &policy,
    };
    let rows = obfuscation_report(&scene, &patterns, &sealer, &mut rng(12)).map_err(|e| e.to_string())?;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} CD {:.4} HD {:.4}", r.pattern, r.chamfer, r.hausdorff))
        .collect();
    for w in rows.windows(2) {
        ensure(w[0].chamfer > w[1].chamfer && w[0].hausdorff > w[1].hausdorff, || {
            format!("not decreasing from {} to {}: {summary:?}", w[0].pattern, w[1].pattern)
        })?;
    }
    let x = &rows[2];
    for r in &rows[3..] {
        ensure(r.chamfer < 0.25 * x.chamfer && r.hausdorff < 0.25 * x.hausdorff, || {
            format!("{} not below 25% of X: {summary:?}", r.pattern)
        })?;
    }

    // grid index against brute force on subsets of the original and its views
    let bytes = write_ply(&scene, None);
    let subset = |cloud: &PointCloud, start: usize| {
        PointSet::new(cloud.positions().skip(start).take(2000).collect()).unwrap()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    let mut compared = 0;
    for (k, pat) in patterns.iter().enumerate() {
        let enc = encrypt_frame(&bytes, Granularity::Selective(*pat), &pp, &policy, &mut rng(13)).unwrap();
        let filled = zero_fill(&enc).unwrap();
        let (view, _) = parse_ply(&filled).unwrap();
        let a = subset(&scene, 2000 * k);
        let b = subset(&view, 2000 * k + 500);
        let (gc, bc) = (chamfer(&a, &b).unwrap(), brute::chamfer(&a, &b));
        let (gh, bh) = (hausdorff(&a, &b).unwrap(), brute::hausdorff(&a, &b));
        ensure(rel(gc, bc) <= 1e-12 && rel(gh, bh) <= 1e-12, || {
            format!("{pat}: grid CD {gc} HD {gh}, brute CD {bc} HD {bh}")
        })?;
        compared += 1;
    }
    Ok(format!("{}; grid = brute on {compared} subset pairs", summary.join(", ")))
}

fn criterion_4(_: &Ctx) -> Check {
    let keys = BenchKeys::new(14);
    let ply = write_ply(&room_scene(100_000, 0, 3), None);
    let patterns = ["FULL", "XYZ", "XY", "X"].map(g);
    let rows = bench_codec(&ply, &patterns, 200, &keys).map_err(|e| e.to_string())?;
    let median = |pat: Granularity, op: Op| {
        rows.iter()
            .find(|r| r.pattern == pat && r.op == op)
            .map(|r| r.stats.median)
            .unwrap()
    };
    let mut report = Vec::new();
    for op in [Op::Encrypt, Op::Decrypt] {
        let m: Vec<f64> = patterns.iter().map(|&pat| median(pat, op)).collect();
        report.push(format!(
            "{op} median ms FULL {:.3} XYZ {:.3} XY {:.3} X {:.3}",
            m[0], m[1], m[2], m[3]
        ));
        ensure(m.windows(2).all(|w| w[0] > w[1]), || format!("{op} medians not ordered: {m:?}"))?;
    }
    for &pat in &patterns[1..] {
        let (e, d) = (median(pat, Op::Encrypt), median(pat, Op::Decrypt));
        ensure(d < e, || format!("{pat}: decrypt {d:.3} ms not below encrypt {e:.3} ms"))?;
    }
    let reductions: Vec<String> = rows
        .iter()
        .filter(|r| r.pattern != Granularity::Full)
        .map(|r| format!("{} {} {:.0}%", r.pattern, r.op, r.reduction_vs_full_pct.unwrap()))
        .collect();

    let sizes = [10_000usize, 50_000, 100_000];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let ply = write_ply(&room_scene(n, 0, 3), None);
            let rows = bench_codec(&ply, &[g("X")], 200, &keys).unwrap();
            rows[0].stats.median
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let (slope, _, r2) = linear_fit(&xs, &times);
    ensure(r2 >= 0.95, || format!("X encrypt medians {times:?} fit R² {r2:.4}"))?;
    Ok(format!(
        "{}; savings vs FULL: {}; X encrypt {:.3}/{:.3}/{:.3} ms at 10k/50k/100k, {:.2} µs per point, R² {r2:.4}",
        report.join("; "),
        reductions.join(", "),
        times[0],
        times[1],
        times[2],
        slope * 1e3
    ))
}

fn criterion_5(_: &Ctx) -> Check {
    let (mut pp, mk) = authority(15);
    let policy = parse_policy("researcher and (univx or europe)").unwrap();
    pp.publish_policy(&mk, &policy).unwrap();
    let mut overheads = Vec::new();
    let mut with_payload = Vec::new();
    for n in [100usize, 1_000, 10_000, 50_000] {
        for (normals, colors) in [(false, false), (true, true)] {
            let mut cloud = room_scene(n, 1, 2);
            if !normals {
                cloud = PointCloud::new(VertexSchema::canonical(false, colors), cloud.vertices);
            }
            let bytes = write_ply(&cloud, None);
            for pat in ["XYZ", "XY", "X", "2X", "3X", "2XY", "5Z"].map(p) {
                let enc = encrypt_frame(&bytes, Granularity::Selective(pat), &pp, &policy, &mut rng(16)).unwrap();
                let removed = (COORD_WIDTH * pat.targeted_count(n)) as i64;
                let layout = inspect(&enc).map_err(|e| e.to_string())?;
                let marker = (enc.len() - layout.header_bytes.len() - layout.reduced_body.len() - layout.blob.len()) as i64;
                let law = bytes.len() as i64 - removed + marker + layout.blob.len() as i64;
                ensure(enc.len() as i64 == law, || format!("{n} points {pat}: |enc| {} vs law {law}", enc.len()))?;
                overheads.push(enc.len() as i64 - bytes.len() as i64);
                with_payload.push(enc.len() as i64 - bytes.len() as i64 + removed);
            }
        }
    }
    let (lo, hi) = (*overheads.iter().min().unwrap(), *overheads.iter().max().unwrap());
    let centre = (lo + hi) as f64 / 2.0;
    ensure((hi - lo) as f64 / 2.0 <= 16.0, || format!("marker + blob overhead spans {lo}..{hi} bytes"))?;
    let (plo, phi) = (*with_payload.iter().min().unwrap(), *with_payload.iter().max().unwrap());
    Ok(format!(
        "{} frames obey the size law exactly; marker + blob overhead {centre} ± {} bytes; \
         with the sealed coordinates counted it spans {plo}..{phi}",
        overheads.len(),
        (hi - lo) as f64 / 2.0
    ))
}

type Criterion = fn(&Ctx) -> Check;

/// Reference LRU: a recency-ordered list, least recent first.
struct ListLru {
    capacity: u64,
    items: Vec<(String, u64)>,
}

impl ListLru {
    fn request(&mut self, key: &str, size: u64) -> (bool, Vec<String>) {
        if let Some(i) = self.items.iter().position(|(k, _)| k == key) {
            let item = self.items.remove(i);
            self.items.push(item);
            return (true, Vec::new());
        }
        let mut evicted = Vec::new();
        if self.capacity == 0 || size > self.capacity {
            return (false, evicted);
        }
        while self.items.iter().map(|(_, s)| s).sum::<u64>() + size > self.capacity {
            evicted.push(self.items.remove(0).0);
        }
        self.items.push((key.to_string(), size));
        (false, evicted)
    }
}

fn lru_replay(seed: u64, capacity: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let sizes: Vec<u64> = (0..400).map(|_| r.gen_range(0..4096)).collect();
    let mut store = LruStore::new(capacity);
    let mut reference = ListLru {
        capacity,
        items: Vec::new(),
    };
    let mut hits = 0;
    for step in 0..10_000 {
        // skewed popularity so both hits and evictions happen
        let k = (r.gen::<f64>().powi(3) * sizes.len() as f64) as usize;
        let key = format!("/f_{k}");
        let (ref_hit, ref_evicted) = reference.request(&key, sizes[k]);
        let hit = store.get(&key).is_some();
        let evicted = if hit {
            Vec::new()
        } else {
            store.admit(&key, Arc::from(vec![0u8; sizes[k] as usize]))
        };
        ensure(hit == ref_hit && evicted == ref_evicted && store.audit(), || {
            format!("step {step} `{key}`: store hit {hit} evicted {evicted:?}, reference hit {ref_hit} evicted {ref_evicted:?}")
        })?;
        let order: Vec<&str> = reference.items.iter().map(|(k, _)| k.as_str()).collect();
        ensure(store.lru_order() == order, || format!("step {step}: recency order differs"))?;
        hits += usize::from(hit);
    }
    Ok(100.0 * hits as f64 / 10_000.0)
}

fn level_free_paths(report: &ExperimentReport) -> Vec<Option<u64>> {
    let mut v: Vec<Option<u64>> = report.measured().cache.as_ref().unwrap().records.iter().map(|r| frame_of_path(&r.path)).collect();
    v.sort();
    v
}

fn criterion_6(ctx: &Ctx) -> Check {
    let mut notes = Vec::new();
    for (seed, capacity) in [(1, 0), (2, 20_000), (3, 200_000), (4, 2_000_000)] {
        let rate = lru_replay(seed, capacity)?;
        notes.push(format!("{capacity} B {rate:.1}%"));
    }
    let replay = format!("LRU replays match reference over 10^4 requests ({})", notes.join(", "));

    let base = "clients=3\nlambda=3\nbuffer=1\nqueue=2\nseed=5";
    let zero = ctx.experiment("cap0", &format!("{base}\nlevel=X\ncache_mb=0"));
    let zero_rate = zero.measured().cache.as_ref().unwrap().hit_rate_pct;
    ensure(zero_rate == 0.0, || format!("capacity 0 hit rate {zero_rate}%"))?;

    let warm = ctx.experiment("warm", &format!("{base}\nlevel=X\ncache_mb=256\nwarmup=true"));
    let warm_cache = warm.measured().cache.as_ref().unwrap();
    ensure(warm.measured().aborted() == 0, || "warm run had aborted clients".into())?;
    ensure(warm_cache.hit_rate_pct == 100.0, || format!("measured hit rate {}%", warm_cache.hit_rate_pct))?;

    let plain = ctx.experiment("parity_none", &format!("{base}\nlevel=NONE\ncache_mb=256"));
    let sel = ctx.experiment("parity_x", &format!("{base}\nlevel=X\ncache_mb=256"));
    let (hp, hx) = (
        plain.measured().cache.as_ref().unwrap().hit_rate_pct,
        sel.measured().cache.as_ref().unwrap().hit_rate_pct,
    );
    ensure(hp == hx, || format!("hit rate NONE {hp}% vs X {hx}%"))?;
    ensure(level_free_paths(&plain) == level_free_paths(&sel), || "request sequences differ".into())?;
    Ok(format!(
        "{replay}; capacity 0 → {zero_rate}%; warm-up then measure → {}% over {} requests; cold NONE {hp:.2}% = X {hx:.2}%",
        warm_cache.hit_rate_pct, warm_cache.requests
    ))
}

/// Arrival model for one download in flight (see the streaming client):
/// returns (frame, stall seconds) per stall.
fn simulate_stalls(n: usize, fps: f64, capacity: usize, download_s: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
    let mut push = vec![0.0; n];
    let mut deq = vec![0.0; n];
    let (mut start, mut stalled, mut next) = (0.0, 0.0, 0usize);
    let mut stalls = Vec::new();
    let mut advance = |upto: usize, push: &[f64], start: f64, deq: &mut [f64]| {
        while next <= upto {
            let due = start + next as f64 / fps + stalled;
            if push[next] > due {
                stalls.push((next, push[next] - due));
                stalled += push[next] - due;
            }
            deq[next] = due.max(push[next]);
            next += 1;
        }
    };
    for i in 0..n {
        let mut t = if i == 0 { 0.0 } else { push[i - 1] } + download_s(i);
        if i >= capacity {
            advance(i - capacity, &push, start, &mut deq);
            t = t.max(deq[i - capacity]);
        }
        push[i] = t;
        if i + 1 == capacity.min(n) {
            start = t;
        }
    }
    advance(n - 1, &push, start, &mut deq);
    stalls
}

fn criterion_7(ctx: &Ctx) -> Check {
    let run = ctx.experiment("qoe", "clients=3\nlambda=3\nbuffer=1\nqueue=2\nseed=9\nlevel=X\npolicy=subscriber");
    let m = run.measured();
    ensure(m.aborted() == 0, || format!("aborted clients: {:?}", m.clients))?;
    let worst = m.clients.iter().map(|c| c.rebuffering_pct).fold(0.0, f64::max);
    ensure(worst == 0.0 && m.clients.iter().all(|c| c.frames == 120), || format!("clients {:?}", m.clients))?;

    // scripted delay through the binaries
    let dir = ctx.tmp.path().join("delay");
    let spec = DatasetSpec {
        points_per_frame: 300,
        frame_count: 144,
        frame_rate: 24,
        seed: 3,
    };
    gen_dataset(&spec, &dir, None).map_err(|e| e.to_string())?;
    let extra = 3.0 + 25.0 / 24.0;
    let mut origin = Command::new(&ctx.exe)
        .args(["serve-origin", "--bind", "127.0.0.1:0", "--delay", &format!("/NONE/f_100.ply={extra}")])
        .arg("--root")
        .arg(&dir)
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(origin.stdout.take().unwrap()), &mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let prefix = dir.join("delayed_");
    let status = Command::new(&ctx.exe)
        .args(["stream", "--URL", &format!("{base}/NONE.mpd"), "--buffer", "1", "--download-queue", "1", "--log"])
        .arg(&prefix)
        .stdout(Stdio::null())
        .status();
    let _ = origin.kill();
    let _ = origin.wait();
    ensure(status.map_err(|e| e.to_string())?.success(), || "stream exited with failure".into())?;
    let log = read_session(&prefix).map_err(|e| e.to_string())?;
    let predicted = simulate_stalls(144, 24.0, 24, |i| if i == 100 { extra } else { 0.0 });
    ensure(predicted.len() == 1 && predicted[0].0 == 100, || format!("model predicts {predicted:?}"))?;
    ensure(log.stalls.len() == 1, || format!("observed stalls {:?}", log.stalls))?;
    let observed = log.stalls[0].duration_ms / 1e3;
    ensure((observed - predicted[0].1).abs() <= 0.050, || {
        format!("stall {observed:.3} s, predicted {:.3} s", predicted[0].1)
    })?;

    let stalls = |secs: &[f64]| SessionLog {
        stalls: secs
            .iter()
            .map(|&s| StallRecord {
                start_ms: 0.0,
                duration_ms: s * 1e3,
            })
            .collect(),
        ..SessionLog::default()
    };
    let quarter = compute_rebuffering(&stalls(&[5.0, 10.0]), 60.0);
    let over = compute_rebuffering(&stalls(&[100.0, 32.0]), 60.0);
    ensure((quarter - 25.0).abs() < 1e-9, || format!("15 s / 60 s → {quarter}%"))?;
    ensure((over - 220.0).abs() < 1e-9, || format!("132 s / 60 s → {over}%"))?;
    Ok(format!(
        "3 clients level X: 0% rebuffering, 120 frames each; delayed frame stall {observed:.3} s vs predicted {:.3} s; 15/60 s → {quarter}%, 132/60 s → {over}%",
        predicted[0].1
    ))
}

fn criterion_8(_: &Ctx) -> Check {
    let (mut pp, mk) = authority(17);
    let now = today();
    let policy = parse_policy(&format!("subscriber and exp >= {now}")).unwrap();
    pp.publish_policy(&mk, &policy).unwrap();
    let frame = write_ply(&room_scene(1000, 0, 1), None);
    let enc = encrypt_frame(&frame, g("X"), &pp, &policy, &mut rng(18)).unwrap();
    let stored = enc.clone();

    let registry = ClientRegistry::parse("alice,subscriber,20200101\ncarol,subscriber,29991231\n").unwrap();
    let server = serve_license(registry, pp.clone(), mk.clone(), "127.0.0.1:0", LicenseClock::System).map_err(|e| e.to_string())?;
    let url = |id: &str| format!("{}/license?client={id}", server.base_url());
    let alice = get(&url("alice")).map_err(|e| e.to_string())?;
    ensure(alice.status == 403, || format!("expired registration got {}", alice.status))?;
    let carol = get(&url("carol")).map_err(|e| e.to_string())?;
    ensure(carol.status == 200, || format!("current registration got {}", carol.status))?;
    let carol_key = pcvault_core::abe::UserKey::from_bytes(&carol.body).map_err(|e| e.to_string())?;

    let stale = keygen(&pp, &mk, &"subscriber;exp=20200101".parse().unwrap(), 0, &mut rng(19)).unwrap();
    ensure(
        matches!(decrypt_frame(&enc, &stale), Err(CodecError::Abe(AbeError::PolicyNotSatisfied))),
        || "key with exp=20200101 was not refused".into(),
    )?;
    ensure(decrypt_frame(&enc, &carol_key).as_deref() == Ok(&frame[..]), || "issued key refused".into())?;
    ensure(enc == stored, || "ciphertext changed".into())?;
    Ok(format!(
        "expired registration → 403, exp=20200101 key refused by `{policy}`, issued key opens the unchanged ciphertext"
    ))
}

fn main() {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_pcvault"));
    let ctx = Ctx {
        exe,
        tmp: tempfile::tempdir().expect("tempdir"),
        streaming: std::sync::OnceLock::new(),
    };
    let criteria: [(&str, Criterion); 8] = [
        ("codec roundtrip", criterion_1),
        ("policy gating equivalence", criterion_2),
        ("obfuscation ordering", criterion_3),
        ("runtime ordering", criterion_4),
        ("size law", criterion_5),
        ("cache behavior", criterion_6),
        ("streaming QoE", criterion_7),
        ("revocation", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&ctx))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
