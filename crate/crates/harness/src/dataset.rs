//! Synthetic frame sequences on disk.
//!
//! Layout under the output directory, one manifest per level:
//! `NONE.mpd` with `NONE/f_<i>.ply`, and for every encrypted level `L`,
//! `L.mpd` with `L/f_<i>.eply`. Encrypted variants are produced from the
//! plain frames, so zero-fill or decryption of `L` maps back onto `NONE`.

use std::path::{Path, PathBuf};

use pcvault_core::abe::PublicParams;
use pcvault_core::codec::encrypt_frame;
use pcvault_core::manifest::{generate_mpd, EncryptionLevel, Manifest};
use pcvault_core::pattern::Granularity;
use pcvault_core::ply::write_ply;
use pcvault_core::policy::PolicyTree;
use pcvault_core::synth::room_scene;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::{read_file, write_file, HarnessError, Result};

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub points_per_frame: usize,
    pub frame_count: u64,
    pub frame_rate: u32,
    pub seed: u64,
}

/// What to produce besides the plain frames.
pub struct EncryptedVariants<'a> {
    pub levels: Vec<Granularity>,
    pub params: &'a PublicParams,
    pub policy: &'a PolicyTree,
    pub license_url: Option<String>,
}

pub fn manifest_path(dir: &Path, level: EncryptionLevel) -> PathBuf {
    dir.join(format!("{level}.mpd"))
}

pub fn level_manifest(spec: &DatasetSpec, level: EncryptionLevel, policy: Option<&PolicyTree>, license_url: Option<String>) -> Manifest {
    let ext = if level.is_encrypted() { "eply" } else { "ply" };
    Manifest {
        frame_rate: spec.frame_rate,
        frame_count: spec.frame_count,
        media_template: format!("{level}/f_$Index$.{ext}"),
        encryption_level: level,
        policy_hint: policy.filter(|_| level.is_encrypted()).map(|q| q.to_string()),
        license_url: license_url.filter(|_| level.is_encrypted()),
    }
}

/// Writes the dataset and returns the manifests written, plain first.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path, variants: Option<&EncryptedVariants<'_>>) -> Result<Vec<Manifest>> {
    if spec.points_per_frame == 0 || spec.frame_count == 0 || spec.frame_rate == 0 {
        return Err(HarnessError::Invalid("points, frames and frame rate must be positive".into()));
    }
    let plain = level_manifest(spec, EncryptionLevel::None, None, None);
    (0..spec.frame_count).into_par_iter().try_for_each(|i| {
        let cloud = room_scene(spec.points_per_frame, i as usize, spec.seed);
        write_file(&out_dir.join(plain.frame_url(i)?), write_ply(&cloud, None))
    })?;
    write_file(&manifest_path(out_dir, plain.encryption_level), generate_mpd(&plain))?;
    let mut written = vec![plain.clone()];

    let Some(v) = variants else {
        return Ok(written);
    };
    for (n, &g) in v.levels.iter().enumerate() {
        let level = EncryptionLevel::from(g);
        let m = level_manifest(spec, level, Some(v.policy), v.license_url.clone());
        (0..spec.frame_count).into_par_iter().try_for_each(|i| {
            let bytes = read_file(&out_dir.join(plain.frame_url(i)?))?;
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            rng.set_stream(((n as u64 + 1) << 40) | i);
            let enc = encrypt_frame(&bytes, g, v.params, v.policy, &mut rng)?;
            write_file(&out_dir.join(m.frame_url(i)?), enc)
        })?;
        write_file(&manifest_path(out_dir, level), generate_mpd(&m))?;
        written.push(m);
    }
    Ok(written)
}

/// Total size in bytes of the frames a manifest in `dir` points at.
pub fn content_bytes(dir: &Path, m: &Manifest) -> Result<u64> {
    let mut total = 0;
    for i in 0..m.frame_count {
        let path = dir.join(m.frame_url(i)?);
        total += std::fs::metadata(&path)
            .map_err(|source| HarnessError::Io { path, source })?
            .len();
    }
    Ok(total)
}
