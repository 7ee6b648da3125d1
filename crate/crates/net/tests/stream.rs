use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use pcvault_core::abe::{keygen, setup, MasterKey, PublicParams};
use pcvault_core::codec::encrypt_frame;
use pcvault_core::manifest::{generate_mpd, EncryptionLevel, Manifest};
use pcvault_core::policy::parse_policy;
use pcvault_core::ply::write_ply;
use pcvault_core::synth::room_scene;
use pcvault_net::client::{stream, KeyMaterial, PlayerConfig, StreamError};
use pcvault_net::origin::{serve_origin, OriginConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const FPS: u32 = 24;

fn authority() -> (PublicParams, MasterKey) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (mut pp, mk) = setup(&mut rng).unwrap();
    pp.publish_tag(&mk, "subscriber").unwrap();
    (pp, mk)
}

fn keys(pp: &PublicParams, mk: &MasterKey, attrs: &str) -> KeyMaterial {
    let key = keygen(pp, mk, &attrs.parse().unwrap(), 0, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
    KeyMaterial { params: pp.clone(), key }
}

/// Writes `frames` frames plus a manifest named `name.mpd` into `dir`.
fn dataset(dir: &Path, name: &str, frames: u64, points: usize, level: EncryptionLevel, pp: &PublicParams) {
    let frame_dir = dir.join(name);
    std::fs::create_dir_all(&frame_dir).unwrap();
    let policy = parse_policy("subscriber").unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let ext = if level.is_encrypted() { "eply" } else { "ply" };
    let m = Manifest {
        frame_rate: FPS,
        frame_count: frames,
        media_template: format!("{name}/f_$Index$.{ext}"),
        encryption_level: level,
        policy_hint: level.is_encrypted().then(|| "subscriber".to_string()),
        license_url: None,
    };
    for i in 0..frames {
        let plain = write_ply(&room_scene(points, i as usize, 7), None);
        let bytes = match level.granularity() {
            None => plain,
            Some(g) => encrypt_frame(&plain, g, pp, &policy, &mut rng).unwrap(),
        };
        std::fs::write(dir.join(m.frame_url(i).unwrap()), bytes).unwrap();
    }
    std::fs::write(dir.join(format!("{name}.mpd")), generate_mpd(&m)).unwrap();
}

fn config(url: String, buffer: f64, queue: usize, keys: Option<KeyMaterial>) -> PlayerConfig {
    PlayerConfig {
        mpd_url: url,
        buffer_seconds: buffer,
        decrypt: keys.is_some(),
        keys,
        download_queue: queue,
    }
}

fn level(s: &str) -> EncryptionLevel {
    s.parse().unwrap()
}

#[test]
fn plain_and_selective_streams_play_without_stalls() {
    let (pp, mk) = authority();
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), "plain", 48, 2000, level("NONE"), &pp);
    dataset(dir.path(), "x", 48, 2000, level("X"), &pp);
    let origin = serve_origin(dir.path(), "127.0.0.1:0", OriginConfig::default()).unwrap();

    let plain = stream(&config(format!("{}/plain.mpd", origin.base_url()), 0.5, 1, None)).unwrap();
    let x = stream(&config(format!("{}/x.mpd", origin.base_url()), 0.5, 4, Some(keys(&pp, &mk, "subscriber")))).unwrap();
    let connections_before = origin.connections_accepted();
    for log in [&plain, &x] {
        assert!(log.stalls.is_empty(), "{:?}", log.stalls);
        let indices: Vec<u64> = log.frames.iter().map(|f| f.index).collect();
        assert_eq!(indices, (0..48).collect::<Vec<_>>());
        assert!(log.occupancy.iter().all(|&(_, n)| n <= 12));
        let dequeues: Vec<f64> = log.frames.iter().map(|f| f.dequeue_ms).collect();
        assert!(dequeues.windows(2).all(|w| w[1] > w[0]));
        for f in &log.frames {
            let due = log.playback_start_ms + f.index as f64 * 1e3 / FPS as f64;
            assert!(f.dequeue_ms >= due - 0.5, "frame {} early", f.index);
            assert!(f.dequeue_ms <= due + 1e3 / FPS as f64, "frame {} late", f.index);
            assert!(f.enqueue_ms <= f.dequeue_ms);
        }
    }
    assert!(plain.frames.iter().all(|f| f.decrypt_ms == 0.0));
    assert!(x.frames.iter().all(|f| f.decrypt_ms > 0.0));
    // one connection for the manifest and frames of each session
    assert_eq!(connections_before, 2);
}

#[test]
fn failing_sessions_abort_with_the_right_error() {
    let (pp, mk) = authority();
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), "x", 30, 500, level("X"), &pp);
    let origin = serve_origin(dir.path(), "127.0.0.1:0", OriginConfig::default()).unwrap();
    let url = format!("{}/x.mpd", origin.base_url());

    let guest = keys(&pp, &mk, "guest");
    let err = stream(&config(url.clone(), 0.5, 2, Some(guest))).unwrap_err();
    assert!(matches!(err, StreamError::Decrypt { index: 0, .. }), "{err}");

    let err = stream(&config(url.clone(), 0.5, 1, None)).unwrap_err();
    assert!(matches!(err, StreamError::DecryptDisabled(_)), "{err}");

    // manifest claims XY, frames carry X
    let text = std::fs::read_to_string(dir.path().join("x.mpd")).unwrap();
    std::fs::write(dir.path().join("xy.mpd"), text.replace("encryptionLevel=\"X\"", "encryptionLevel=\"XY\"")).unwrap();
    let err = stream(&config(format!("{}/xy.mpd", origin.base_url()), 0.5, 1, Some(keys(&pp, &mk, "subscriber")))).unwrap_err();
    assert!(matches!(err, StreamError::LevelMismatch { index: 0, .. }), "{err}");

    std::fs::remove_file(dir.path().join("x/f_17.eply")).unwrap();
    let err = stream(&config(url, 0.5, 3, Some(keys(&pp, &mk, "subscriber")))).unwrap_err();
    assert!(matches!(err, StreamError::Http { status: 404, .. }), "{err}");

    let err = stream(&config(format!("{}/none.mpd", origin.base_url()), 0.5, 1, None)).unwrap_err();
    assert!(matches!(err, StreamError::Http { status: 404, .. }), "{err}");
}

/// Clock model with one download in flight: frame `i` is requested when
/// frame `i - 1` enters the buffer, enters once downloaded and once frame
/// `i - capacity` has left, and leaves at its tick or on arrival.
/// Returns (frame index, stall seconds) for every stall.
fn simulate(n: usize, fps: f64, capacity: usize, download_s: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
    let mut push = vec![0.0; n];
    let mut deq = vec![f64::NAN; n];
    let mut start = f64::NAN;
    let mut stalled = 0.0;
    let mut stalls = Vec::new();
    let mut next_deq = 0;
    let mut dequeue_through = |upto: usize, push: &[f64], start: f64, deq: &mut Vec<f64>| {
        while next_deq <= upto {
            let due = start + next_deq as f64 / fps + stalled;
            if push[next_deq] > due {
                stalls.push((next_deq, push[next_deq] - due));
                stalled += push[next_deq] - due;
            }
            deq[next_deq] = due.max(push[next_deq]);
            next_deq += 1;
        }
    };
    for i in 0..n {
        let requested = if i == 0 { 0.0 } else { push[i - 1] };
        let mut t = requested + download_s(i);
        if i >= capacity {
            dequeue_through(i - capacity, &push, start, &mut deq);
            t = t.max(deq[i - capacity]);
        }
        push[i] = t;
        if i + 1 == capacity.min(n) {
            start = push[i];
        }
    }
    dequeue_through(n - 1, &push, start, &mut deq);
    stalls
}

#[test]
fn delayed_frame_produces_the_predicted_stall() {
    let (pp, _) = authority();
    let dir = tempfile::tempdir().unwrap();
    let frames = 144;
    dataset(dir.path(), "plain", frames, 300, level("NONE"), &pp);
    let extra = 3.0 + 25.0 / FPS as f64;
    let mut delays = HashMap::new();
    delays.insert("/plain/f_100.ply".to_string(), Duration::from_secs_f64(extra));
    let origin = serve_origin(dir.path(), "127.0.0.1:0", OriginConfig { delays, ..Default::default() }).unwrap();

    let log = stream(&config(format!("{}/plain.mpd", origin.base_url()), 1.0, 1, None)).unwrap();
    let predicted = simulate(frames as usize, FPS as f64, FPS as usize, |i| if i == 100 { extra } else { 0.0 });
    assert_eq!(predicted.len(), 1);
    assert_eq!(predicted[0].0, 100);
    assert!((predicted[0].1 - 3.0).abs() < 1e-9);

    assert_eq!(log.stalls.len(), 1, "{:?}", log.stalls);
    let stall = &log.stalls[0];
    let observed = stall.duration_ms / 1e3;
    println!("predicted stall {:.3} s, observed {:.3} s", predicted[0].1, observed);
    assert!((observed - predicted[0].1).abs() <= 0.050);
    let resumed = &log.frames[100];
    assert!((resumed.dequeue_ms - (stall.start_ms + stall.duration_ms)).abs() < 5.0);
    let due = log.playback_start_ms + 100.0 * 1e3 / FPS as f64;
    assert!((stall.start_ms - due).abs() < 5.0);
}
