//! Key material on disk: raw wire encodings, one object per file.

use std::path::Path;

use pcvault_core::abe::{setup, MasterKey, PublicParams, UserKey};
use pcvault_core::policy::{AttributeSet, Comparator, PolicyTree};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::{read_file, write_file, Result};

pub const PUBLIC_FILE: &str = "pub.key";
pub const MASTER_FILE: &str = "master.key";

pub fn read_params(path: &Path) -> Result<PublicParams> {
    Ok(PublicParams::from_bytes(&read_file(path)?)?)
}

pub fn read_master(path: &Path) -> Result<MasterKey> {
    Ok(MasterKey::from_bytes(&read_file(path)?)?)
}

pub fn read_user_key(path: &Path) -> Result<UserKey> {
    Ok(UserKey::from_bytes(&read_file(path)?)?)
}

/// Runs setup and writes `pub.key` and `master.key` into `dir`. A seed makes
/// the authority reproducible; without one the OS generator is used.
pub fn create_authority(dir: &Path, seed: Option<u64>) -> Result<(PublicParams, MasterKey)> {
    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let (pp, mk) = setup(&mut rng)?;
    write_file(&dir.join(PUBLIC_FILE), pp.to_bytes())?;
    write_file(&dir.join(MASTER_FILE), mk.to_bytes())?;
    Ok((pp, mk))
}

pub fn load_authority(dir: &Path) -> Result<(PublicParams, MasterKey)> {
    Ok((
        read_params(&dir.join(PUBLIC_FILE))?,
        read_master(&dir.join(MASTER_FILE))?,
    ))
}

/// Publishes the policy's attributes and rewrites `pub.key` in `dir`.
pub fn publish(dir: &Path, policy: &PolicyTree) -> Result<PublicParams> {
    let (mut pp, mk) = load_authority(dir)?;
    pp.publish_policy(&mk, policy)?;
    write_file(&dir.join(PUBLIC_FILE), pp.to_bytes())?;
    Ok(pp)
}

/// A small attribute set satisfying `policy`, or None when no single set
/// does (e.g. `exp < 0`). Or-nodes take the first satisfiable branch.
pub fn satisfying_attributes(policy: &PolicyTree) -> Option<AttributeSet> {
    fn pick(q: &PolicyTree, out: &mut Vec<(String, Option<u64>)>) -> bool {
        match q {
            PolicyTree::Leaf(tag) => {
                out.push((tag.clone(), None));
                true
            }
            PolicyTree::Numeric(leaf) => {
                let value = match leaf.cmp {
                    Comparator::Lt => leaf.value.checked_sub(1),
                    Comparator::Gt => leaf.value.checked_add(1),
                    _ => Some(leaf.value),
                };
                value.map(|v| out.push((leaf.name.clone(), Some(v)))).is_some()
            }
            PolicyTree::And(children) => children.iter().all(|c| pick(c, out)),
            PolicyTree::Or(children) => children.iter().any(|c| {
                let mut trial = out.clone();
                let ok = pick(c, &mut trial);
                if ok {
                    *out = trial;
                }
                ok
            }),
        }
    }
    let mut picked = Vec::new();
    if !pick(policy, &mut picked) {
        return None;
    }
    let mut set = AttributeSet::new();
    for (name, value) in picked {
        set = match value {
            None if set.has_tag(&name) => set,
            None => set.with_tag(&name).ok()?,
            Some(v) => {
                set.set_numeric(&name, v).ok()?;
                set
            }
        };
    }
    policy.eval(&set).then_some(set)
}

#[cfg(test)]
mod tests {
    use pcvault_core::policy::parse_policy;

    use super::*;

    #[test]
    fn picks_satisfying_sets() {
        for text in [
            "researcher and (univx or europe)",
            "a or b and c",
            "exp >= 20260101 and subscriber",
            "n > 3 and n < 9",
            "x = 4",
        ] {
            let q = parse_policy(text).unwrap();
            let attrs = satisfying_attributes(&q).unwrap();
            assert!(q.eval(&attrs), "{text}: {attrs}");
        }
        let q = parse_policy("researcher and (univx or europe)").unwrap();
        assert_eq!(satisfying_attributes(&q).unwrap().to_string(), "researcher;univx");
        assert!(satisfying_attributes(&parse_policy("n < 0").unwrap()).is_none());
    }

    #[test]
    fn authority_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (pp, mk) = create_authority(dir.path(), Some(5)).unwrap();
        let (pp2, mk2) = load_authority(dir.path()).unwrap();
        assert_eq!(pp.to_bytes(), pp2.to_bytes());
        assert_eq!(mk.to_bytes(), mk2.to_bytes());
        let pp3 = publish(dir.path(), &parse_policy("subscriber").unwrap()).unwrap();
        assert!(pp3.is_published("subscriber"));
        assert!(read_params(&dir.path().join(PUBLIC_FILE)).unwrap().is_published("subscriber"));
    }
}
