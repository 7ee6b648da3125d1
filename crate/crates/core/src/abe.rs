//! Policy-gated envelope encryption (`pcvault-ref-v1`).
//!
//! A fresh content key encrypts the payload with ChaCha20-Poly1305. The
//! content key is secret-shared over the compiled policy: an `and` gate
//! splits its share into XOR parts, an `or` gate hands the same share to
//! every child. Each leaf share is wrapped with an X25519 exchange between
//! a per-ciphertext ephemeral key and the leaf attribute's public key.
//!
//! Attribute secrets are derived from the master key and shared by every
//! holder of the attribute, so two users can pool attributes to satisfy a
//! policy neither satisfies alone. This backend is not collusion resistant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::policy::{
    is_valid_name, AttributeSet, GateTree, PolicyError, PolicyTree, DEFAULT_BIT_WIDTH,
};
use crate::wire::{put_str16, put_str8, Reader, WireError};

pub const SCHEME_ID: &str = "pcvault-ref-v1";

const BLOB_MAGIC: &[u8; 4] = b"PCVC";
const USER_KEY_MAGIC: &[u8; 4] = b"PCVK";
const PARAMS_MAGIC: &[u8; 4] = b"PCVP";
const MASTER_MAGIC: &[u8; 4] = b"PCVM";
const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbeError {
    #[error("random source failed")]
    EntropyUnavailable,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("attribute `{0}` is not published in the public parameters")]
    UnknownAttribute(String),
    #[error("master key does not belong to these public parameters")]
    KeyMismatch,
    #[error("key attributes do not satisfy the ciphertext policy")]
    PolicyNotSatisfied,
    #[error("ciphertext failed integrity verification")]
    IntegrityFailure,
    #[error("scheme mismatch: expected {expected}, found {found}")]
    SchemeMismatch { expected: String, found: String },
    #[error("malformed encoding: {0}")]
    Malformed(#[from] WireError),
}

/// Randomness accepted by the key and encryption operations.
pub trait SecureRng: RngCore + CryptoRng {}

impl<T: RngCore + CryptoRng + ?Sized> SecureRng for T {}

fn fill(rng: &mut dyn SecureRng, buf: &mut [u8]) -> Result<(), AbeError> {
    rng.try_fill_bytes(buf).map_err(|_| AbeError::EntropyUnavailable)
}

fn derive(root: &[u8; 32], salt: &[u8; 32], label: &[u8], tag: &str) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(salt), root);
    let mut out = [0u8; 32];
    hk.expand_multi_info(&[label, tag.as_bytes()], &mut out)
        .expect("32 bytes is a valid HKDF output length");
    out
}

fn attribute_secret(root: &[u8; 32], salt: &[u8; 32], tag: &str) -> [u8; 32] {
    derive(root, salt, b"pcvault-attr:", tag)
}

fn public_of(secret: &[u8; 32]) -> [u8; 32] {
    PublicKey::from(&StaticSecret::from(*secret)).to_bytes()
}

fn slot_pad(shared: &[u8; 32], salt: &[u8; 32], ephemeral: &[u8; 32], slot: u32, tag: &str) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(salt), shared);
    let mut out = [0u8; 32];
    hk.expand_multi_info(
        &[b"pcvault-slot:", ephemeral, &slot.to_le_bytes(), tag.as_bytes()],
        &mut out,
    )
    .expect("32 bytes is a valid HKDF output length");
    out
}

fn xor(a: &[u8; 32], b: &[u8; 32]) -> [u8; 32] {
    std::array::from_fn(|i| a[i] ^ b[i])
}

#[derive(Clone, PartialEq, Eq)]
pub struct MasterKey {
    salt: [u8; 32],
    root: [u8; 32],
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MasterKey").finish_non_exhaustive()
    }
}

impl MasterKey {
    pub fn root_bytes(&self) -> &[u8; 32] {
        &self.root
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(70);
        out.extend_from_slice(MASTER_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.root);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic(MASTER_MAGIC)?;
        r.version(VERSION)?;
        let key = MasterKey {
            salt: r.array()?,
            root: r.array()?,
        };
        r.finish()?;
        Ok(key)
    }

    fn check_value(&self) -> [u8; 32] {
        public_of(&derive(&self.root, &self.salt, b"pcvault-check", ""))
    }
}

/// Public parameters: scheme, salt, and the public key of every published
/// attribute tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicParams {
    scheme: String,
    salt: [u8; 32],
    check: [u8; 32],
    bit_width: u32,
    attributes: BTreeMap<String, [u8; 32]>,
}

impl PublicParams {
    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn is_published(&self, tag: &str) -> bool {
        self.attributes.contains_key(tag)
    }

    pub fn published(&self) -> impl Iterator<Item = &str> {
        self.attributes.keys().map(String::as_str)
    }

    fn authorize(&self, mk: &MasterKey) -> Result<(), AbeError> {
        if mk.salt != self.salt || mk.check_value() != self.check {
            return Err(AbeError::KeyMismatch);
        }
        Ok(())
    }

    fn publish_raw(&mut self, mk: &MasterKey, tag: String) {
        let public = public_of(&attribute_secret(&mk.root, &mk.salt, &tag));
        self.attributes.insert(tag, public);
    }

    /// Makes a bare tag usable in policies.
    pub fn publish_tag(&mut self, mk: &MasterKey, tag: &str) -> Result<(), AbeError> {
        self.authorize(mk)?;
        if !is_valid_name(tag) {
            return Err(PolicyError::InvalidAttribute(tag.to_string()).into());
        }
        self.publish_raw(mk, tag.to_string());
        Ok(())
    }

    /// Makes a numeric attribute usable in comparisons by publishing both
    /// values of each of its bit tags.
    pub fn publish_numeric(&mut self, mk: &MasterKey, name: &str) -> Result<(), AbeError> {
        self.authorize(mk)?;
        if !is_valid_name(name) {
            return Err(PolicyError::InvalidAttribute(name.to_string()).into());
        }
        for bit in 0..self.bit_width {
            for value in [false, true] {
                self.publish_raw(mk, crate::policy::bit_tag(name, bit, value));
            }
        }
        Ok(())
    }

    /// Publishes every attribute named in `attrs` (numeric ones by name).
    pub fn publish_set(&mut self, mk: &MasterKey, attrs: &AttributeSet) -> Result<(), AbeError> {
        for (name, value) in attrs.iter() {
            match value {
                None => self.publish_tag(mk, name)?,
                Some(_) => self.publish_numeric(mk, name)?,
            }
        }
        Ok(())
    }

    /// Publishes the attributes a policy mentions.
    pub fn publish_policy(&mut self, mk: &MasterKey, policy: &PolicyTree) -> Result<(), AbeError> {
        match policy {
            PolicyTree::Leaf(tag) => self.publish_tag(mk, tag),
            PolicyTree::Numeric(leaf) => self.publish_numeric(mk, &leaf.name),
            PolicyTree::And(c) | PolicyTree::Or(c) => {
                c.iter().try_for_each(|p| self.publish_policy(mk, p))
            }
        }
    }

    /// True when every secret in `key` matches its published public key.
    pub fn verify_user_key(&self, key: &UserKey) -> bool {
        key.scheme == self.scheme
            && key.salt == self.salt
            && key.bit_width == self.bit_width
            && key.secrets.iter().all(|(tag, secret)| {
                self.attributes
                    .get(tag)
                    .is_none_or(|public| *public == public_of(secret))
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str8(&mut out, &self.scheme);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.check);
        out.push(self.bit_width as u8);
        out.extend_from_slice(&(self.attributes.len() as u32).to_le_bytes());
        for (tag, public) in &self.attributes {
            put_str16(&mut out, tag);
            out.extend_from_slice(public);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic(PARAMS_MAGIC)?;
        r.version(VERSION)?;
        let scheme = r.str8()?.to_string();
        if scheme != SCHEME_ID {
            return Err(AbeError::SchemeMismatch {
                expected: SCHEME_ID.into(),
                found: scheme,
            });
        }
        let salt = r.array()?;
        let check = r.array()?;
        let bit_width = u32::from(r.u8()?);
        if !(1..=64).contains(&bit_width) {
            return Err(WireError::Invalid("bit width").into());
        }
        let count = r.u32()? as usize;
        let mut attributes = BTreeMap::new();
        for _ in 0..count {
            let tag = r.str16()?.to_string();
            let public = r.array()?;
            if attributes.insert(tag, public).is_some() {
                return Err(WireError::Invalid("duplicate attribute").into());
            }
        }
        r.finish()?;
        Ok(PublicParams {
            scheme,
            salt,
            check,
            bit_width,
            attributes,
        })
    }
}

pub fn setup(rng: &mut dyn SecureRng) -> Result<(PublicParams, MasterKey), AbeError> {
    setup_with_bit_width(rng, DEFAULT_BIT_WIDTH)
}

pub fn setup_with_bit_width(
    rng: &mut dyn SecureRng,
    bit_width: u32,
) -> Result<(PublicParams, MasterKey), AbeError> {
    if !(1..=64).contains(&bit_width) {
        return Err(PolicyError::BadBitWidth(bit_width).into());
    }
    let mut salt = [0u8; 32];
    let mut root = [0u8; 32];
    fill(rng, &mut salt)?;
    fill(rng, &mut root)?;
    let mk = MasterKey { salt, root };
    let pp = PublicParams {
        scheme: SCHEME_ID.to_string(),
        salt,
        check: mk.check_value(),
        bit_width,
        attributes: BTreeMap::new(),
    };
    Ok((pp, mk))
}

#[derive(Clone, PartialEq, Eq)]
pub struct UserKey {
    scheme: String,
    salt: [u8; 32],
    key_id: [u8; 16],
    issued_at: u64,
    expires: Option<u64>,
    bit_width: u32,
    attributes: AttributeSet,
    secrets: BTreeMap<String, [u8; 32]>,
}

impl fmt::Debug for UserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserKey")
            .field("key_id", &self.key_id)
            .field("issued_at", &self.issued_at)
            .field("expires", &self.expires)
            .field("attributes", &self.attributes.to_string())
            .finish_non_exhaustive()
    }
}

impl UserKey {
    pub fn attributes(&self) -> &AttributeSet {
        &self.attributes
    }

    pub fn key_id(&self) -> [u8; 16] {
        self.key_id
    }

    pub fn issued_at(&self) -> u64 {
        self.issued_at
    }

    pub fn expires(&self) -> Option<u64> {
        self.expires
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(USER_KEY_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str8(&mut out, &self.scheme);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.key_id);
        out.extend_from_slice(&self.issued_at.to_le_bytes());
        match self.expires {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&e.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        out.push(self.bit_width as u8);
        out.extend_from_slice(&(self.attributes.len() as u32).to_le_bytes());
        for (name, value) in self.attributes.iter() {
            put_str16(&mut out, name);
            out.push(u8::from(value.is_some()));
            out.extend_from_slice(&value.unwrap_or(0).to_le_bytes());
        }
        out.extend_from_slice(&(self.secrets.len() as u32).to_le_bytes());
        for (tag, secret) in &self.secrets {
            put_str16(&mut out, tag);
            out.extend_from_slice(secret);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic(USER_KEY_MAGIC)?;
        r.version(VERSION)?;
        let scheme = r.str8()?.to_string();
        let salt = r.array()?;
        let key_id = r.array()?;
        let issued_at = r.u64()?;
        let expires = match (r.u8()?, r.u64()?) {
            (0, _) => None,
            (1, e) => Some(e),
            _ => return Err(WireError::Invalid("expiry flag").into()),
        };
        let bit_width = u32::from(r.u8()?);
        if !(1..=64).contains(&bit_width) {
            return Err(WireError::Invalid("bit width").into());
        }
        let mut attributes = AttributeSet::new();
        for _ in 0..r.u32()? {
            let name = r.str16()?;
            let numeric = r.u8()?;
            let value = r.u64()?;
            attributes = match numeric {
                0 => attributes.with_tag(name)?,
                1 => attributes.with_numeric(name, value)?,
                _ => return Err(WireError::Invalid("attribute flag").into()),
            };
        }
        let mut secrets = BTreeMap::new();
        for _ in 0..r.u32()? {
            let tag = r.str16()?.to_string();
            secrets.insert(tag, r.array()?);
        }
        r.finish()?;
        let expected: BTreeSet<String> = attributes.expand(bit_width)?;
        if !secrets.keys().eq(expected.iter()) {
            return Err(WireError::Invalid("secrets do not match attributes").into());
        }
        Ok(UserKey {
            scheme,
            salt,
            key_id,
            issued_at,
            expires,
            bit_width,
            attributes,
            secrets,
        })
    }
}

/// Issues a key for `attrs`. A numeric `exp` attribute doubles as the key's
/// expiry metadata.
pub fn keygen(
    pp: &PublicParams,
    mk: &MasterKey,
    attrs: &AttributeSet,
    issued_at: u64,
    rng: &mut dyn SecureRng,
) -> Result<UserKey, AbeError> {
    pp.authorize(mk)?;
    let tags = attrs.expand(pp.bit_width)?;
    let secrets = tags
        .into_iter()
        .map(|tag| {
            let secret = attribute_secret(&mk.root, &mk.salt, &tag);
            (tag, secret)
        })
        .collect();
    let mut key_id = [0u8; 16];
    fill(rng, &mut key_id)?;
    Ok(UserKey {
        scheme: pp.scheme.clone(),
        salt: pp.salt,
        key_id,
        issued_at,
        expires: attrs.numeric("exp"),
        bit_width: pp.bit_width,
        attributes: attrs.clone(),
        secrets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiphertextBlob {
    pub policy: String,
    pub scheme: String,
    pub bit_width: u32,
    pub ephemeral: [u8; 32],
    pub slots: Vec<[u8; 32]>,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl CiphertextBlob {
    fn share_section_len(&self) -> usize {
        1 + self.scheme.len() + 1 + 32 + 4 + 32 * self.slots.len()
    }

    /// Everything before the ciphertext body; authenticated as associated
    /// data.
    fn header(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.policy.len() + self.share_section_len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.policy.len() as u32).to_le_bytes());
        out.extend_from_slice(self.policy.as_bytes());
        out.extend_from_slice(&(self.share_section_len() as u32).to_le_bytes());
        put_str8(&mut out, &self.scheme);
        out.push(self.bit_width as u8);
        out.extend_from_slice(&self.ephemeral);
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for slot in &self.slots {
            out.extend_from_slice(slot);
        }
        out.extend_from_slice(&((self.nonce.len() + self.ciphertext.len()) as u32).to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn serialized_len(&self) -> usize {
        4 + 2 + 4 + self.policy.len() + 4 + self.share_section_len() + 4 + 12 + self.ciphertext.len() + 16
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.reserve(self.serialized_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic(BLOB_MAGIC)?;
        r.version(VERSION)?;
        let policy_len = r.u32()? as usize;
        let policy = std::str::from_utf8(r.bytes(policy_len)?)
            .map_err(|_| WireError::Invalid("policy utf-8"))?
            .to_string();

        let shares_len = r.u32()? as usize;
        let mut s = Reader::new(r.bytes(shares_len)?);
        let scheme = s.str8()?.to_string();
        let bit_width = u32::from(s.u8()?);
        let ephemeral = s.array()?;
        let slot_count = s.u32()? as usize;
        if slot_count.checked_mul(32) != Some(s.remaining()) {
            return Err(WireError::Invalid("slot count").into());
        }
        let slots = (0..slot_count).map(|_| s.array()).collect::<Result<_, _>>()?;

        let ct_len = r.u32()? as usize;
        if ct_len < 12 {
            return Err(WireError::Invalid("ciphertext length").into());
        }
        let nonce = r.array()?;
        let ciphertext = r.bytes(ct_len - 12)?.to_vec();
        let tag = r.array()?;
        r.finish()?;
        Ok(CiphertextBlob {
            policy,
            scheme,
            bit_width,
            ephemeral,
            slots,
            nonce,
            ciphertext,
            tag,
        })
    }
}

/// Shares `secret` over `gate` in pre-order, pushing one slot per tag leaf
/// and per constant-true leaf.
fn lay_shares(
    gate: &GateTree,
    secret: [u8; 32],
    ctx: &mut ShareContext<'_>,
) -> Result<(), AbeError> {
    match gate {
        GateTree::Const(false) => {}
        GateTree::Const(true) => ctx.slots.push(secret),
        GateTree::Tag(tag) => {
            let public = ctx
                .pp
                .attributes
                .get(tag)
                .ok_or_else(|| AbeError::UnknownAttribute(tag.clone()))?;
            let shared = ctx.ephemeral.diffie_hellman(&PublicKey::from(*public));
            let index = ctx.slots.len() as u32;
            let pad = slot_pad(shared.as_bytes(), &ctx.pp.salt, &ctx.ephemeral_public, index, tag);
            ctx.slots.push(xor(&secret, &pad));
        }
        GateTree::Or(children) => {
            for child in children {
                lay_shares(child, secret, ctx)?;
            }
        }
        GateTree::And(children) => {
            let mut rest = secret;
            let (last, init) = children.split_last().expect("and gate has children");
            for child in init {
                let mut part = [0u8; 32];
                fill(ctx.rng, &mut part)?;
                rest = xor(&rest, &part);
                lay_shares(child, part, ctx)?;
            }
            lay_shares(last, rest, ctx)?;
        }
    }
    Ok(())
}

struct ShareContext<'a> {
    pp: &'a PublicParams,
    ephemeral: StaticSecret,
    ephemeral_public: [u8; 32],
    slots: Vec<[u8; 32]>,
    rng: &'a mut dyn SecureRng,
}

fn slot_count(gate: &GateTree) -> usize {
    match gate {
        GateTree::Const(false) => 0,
        GateTree::Const(true) | GateTree::Tag(_) => 1,
        GateTree::And(c) | GateTree::Or(c) => c.iter().map(slot_count).sum(),
    }
}

/// Rebuilds the share of `gate` from slots starting at `*cursor`. Subtrees
/// not needed are skipped without any key agreement.
fn recover(
    gate: &GateTree,
    cursor: &mut usize,
    held: &BTreeSet<String>,
    key: &UserKey,
    blob: &CiphertextBlob,
) -> Option<[u8; 32]> {
    match gate {
        GateTree::Const(false) => None,
        GateTree::Const(true) => {
            let slot = blob.slots[*cursor];
            *cursor += 1;
            Some(slot)
        }
        GateTree::Tag(tag) => {
            let index = *cursor;
            *cursor += 1;
            let secret = key.secrets.get(tag)?;
            let shared = StaticSecret::from(*secret).diffie_hellman(&PublicKey::from(blob.ephemeral));
            let pad = slot_pad(shared.as_bytes(), &key.salt, &blob.ephemeral, index as u32, tag);
            Some(xor(&blob.slots[index], &pad))
        }
        GateTree::And(children) => {
            let mut acc = [0u8; 32];
            for child in children {
                acc = xor(&acc, &recover(child, cursor, held, key, blob)?);
            }
            Some(acc)
        }
        GateTree::Or(children) => {
            let mut found = None;
            for child in children {
                if found.is_none() && child.eval(held) {
                    found = recover(child, cursor, held, key, blob);
                } else {
                    *cursor += slot_count(child);
                }
            }
            found
        }
    }
}

pub fn encrypt(
    pp: &PublicParams,
    q: &PolicyTree,
    payload: &[u8],
    rng: &mut dyn SecureRng,
) -> Result<CiphertextBlob, AbeError> {
    let gate = q.compile(pp.bit_width)?;
    let mut content_key = [0u8; 32];
    fill(rng, &mut content_key)?;
    let mut nonce = [0u8; 12];
    fill(rng, &mut nonce)?;
    let mut eph = [0u8; 32];
    fill(rng, &mut eph)?;
    let ephemeral = StaticSecret::from(eph);
    let ephemeral_public = PublicKey::from(&ephemeral).to_bytes();

    let mut ctx = ShareContext {
        pp,
        ephemeral,
        ephemeral_public,
        slots: Vec::with_capacity(slot_count(&gate)),
        rng,
    };
    lay_shares(&gate, content_key, &mut ctx)?;

    let mut blob = CiphertextBlob {
        policy: q.canonical(),
        scheme: pp.scheme.clone(),
        bit_width: pp.bit_width,
        ephemeral: ephemeral_public,
        slots: ctx.slots,
        nonce,
        ciphertext: Vec::new(),
        tag: [0; 16],
    };
    let mut body = payload.to_vec();
    // the header only depends on the body length, not its contents
    blob.ciphertext = vec![0; body.len()];
    let aad = blob.header();
    let tag = ChaCha20Poly1305::new(Key::from_slice(&content_key))
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad, &mut body)
        .map_err(|_| AbeError::IntegrityFailure)?;
    blob.ciphertext = body;
    blob.tag = tag.into();
    Ok(blob)
}

pub fn decrypt(uk: &UserKey, blob: CiphertextBlob) -> Result<Vec<u8>, AbeError> {
    if blob.scheme != uk.scheme {
        return Err(AbeError::SchemeMismatch {
            expected: uk.scheme.clone(),
            found: blob.scheme,
        });
    }
    if blob.bit_width != uk.bit_width {
        return Err(AbeError::SchemeMismatch {
            expected: format!("{} with {}-bit attributes", uk.scheme, uk.bit_width),
            found: format!("{} with {}-bit attributes", blob.scheme, blob.bit_width),
        });
    }
    let policy: PolicyTree = blob.policy.parse().map_err(|_| AbeError::IntegrityFailure)?;
    if policy.canonical() != blob.policy {
        return Err(AbeError::IntegrityFailure);
    }
    if !policy.eval(&uk.attributes) {
        return Err(AbeError::PolicyNotSatisfied);
    }
    let gate = policy
        .compile(blob.bit_width)
        .map_err(|_| AbeError::IntegrityFailure)?;
    if slot_count(&gate) != blob.slots.len() {
        return Err(AbeError::IntegrityFailure);
    }
    let held: BTreeSet<String> = uk.secrets.keys().cloned().collect();
    let mut cursor = 0;
    let content_key =
        recover(&gate, &mut cursor, &held, uk, &blob).ok_or(AbeError::PolicyNotSatisfied)?;

    let aad = blob.header();
    let mut body = blob.ciphertext;
    ChaCha20Poly1305::new(Key::from_slice(&content_key))
        .decrypt_in_place_detached(
            Nonce::from_slice(&blob.nonce),
            &aad,
            &mut body,
            Tag::from_slice(&blob.tag),
        )
        .map_err(|_| AbeError::IntegrityFailure)?;
    Ok(body)
}

/// Produces ciphertext blobs for a payload.
pub trait Sealer {
    fn seal(&self, payload: &[u8], rng: &mut dyn SecureRng) -> Result<Vec<u8>, AbeError>;
}

/// Recovers payloads from ciphertext blobs.
pub trait Opener {
    fn open(&self, blob: &[u8]) -> Result<Vec<u8>, AbeError>;
}

/// The reference backend bound to a policy.
pub struct PolicySealer<'a> {
    pub params: &'a PublicParams,
    pub policy: &'a PolicyTree,
}

impl Sealer for PolicySealer<'_> {
    fn seal(&self, payload: &[u8], rng: &mut dyn SecureRng) -> Result<Vec<u8>, AbeError> {
        Ok(encrypt(self.params, self.policy, payload, rng)?.to_bytes())
    }
}

impl Opener for UserKey {
    fn open(&self, blob: &[u8]) -> Result<Vec<u8>, AbeError> {
        decrypt(self, CiphertextBlob::from_bytes(blob)?)
    }
}
