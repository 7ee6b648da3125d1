//! Selective coordinate encryption of PLY frames.
//!
//! An encrypted selective frame is the original header, the vertex records
//! with their targeted coordinates cut out, and a trailer:
//!
//! ```text
//! "ABEV" | u16 version = 1 | u8 mode | u16 len + pattern | u64 blob len | blob
//! ```
//!
//! The blob seals the removal buffer: every targeted coordinate in vertex
//! order, x before y before z, as raw little-endian IEEE-754 bits. A `FULL`
//! frame is the trailer alone, sealing the whole original file.

use rand::SeedableRng;
use thiserror::Error;

use crate::abe::{AbeError, Opener, PolicySealer, PublicParams, Sealer, SecureRng};
use crate::pattern::{Axis, Granularity, Pattern, PatternError};
use crate::ply::{parse_header, parse_ply, Header, PlyError, PointCloud, VertexSchema};
use crate::policy::PolicyTree;
use crate::wire::{Reader, WireError};

pub const MARKER_MAGIC: &[u8; 4] = b"ABEV";
const MARKER_VERSION: u16 = 1;
const MODE_SELECTIVE: u8 = 0;
const MODE_FULL: u8 = 1;
/// Bytes of a stored coordinate.
pub const COORD_WIDTH: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error("no encryption marker found")]
    MarkerNotFound,
    #[error("invalid marker: {0}")]
    BadMarker(String),
    #[error("decrypted buffer holds {found} bytes, pattern needs {expected}")]
    BufferLengthMismatch { expected: usize, found: usize },
    #[error("input has {0} bytes after the vertex body")]
    TrailingData(usize),
    #[error("a FULL frame carries no geometry in the clear")]
    FullFrame,
}

impl From<WireError> for CodecError {
    fn from(e: WireError) -> Self {
        CodecError::BadMarker(e.to_string())
    }
}

impl From<PatternError> for CodecError {
    fn from(e: PatternError) -> Self {
        CodecError::BadMarker(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    pub granularity: Granularity,
    pub blob_len: u64,
}

impl Marker {
    pub fn encoded_len(&self) -> usize {
        4 + 2 + 1 + 2 + self.granularity.to_string().len() + 8
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        let text = self.granularity.to_string();
        out.extend_from_slice(MARKER_MAGIC);
        out.extend_from_slice(&MARKER_VERSION.to_le_bytes());
        out.push(match self.granularity {
            Granularity::Full => MODE_FULL,
            Granularity::Selective(_) => MODE_SELECTIVE,
        });
        out.extend_from_slice(&(text.len() as u16).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.blob_len.to_le_bytes());
    }

    /// Decodes a marker at the start of `bytes`, returning it with its
    /// encoded length.
    pub fn decode(bytes: &[u8]) -> Result<(Marker, usize), CodecError> {
        let mut r = Reader::new(bytes);
        r.magic(MARKER_MAGIC).map_err(|_| CodecError::MarkerNotFound)?;
        r.version(MARKER_VERSION)?;
        let mode = r.u8()?;
        let text = r.str16()?;
        let granularity: Granularity = text.parse()?;
        match (mode, granularity) {
            (MODE_FULL, Granularity::Full) | (MODE_SELECTIVE, Granularity::Selective(_)) => {}
            _ => return Err(CodecError::BadMarker(format!("mode {mode} with pattern `{text}`"))),
        }
        if granularity.to_string() != text {
            return Err(CodecError::BadMarker(format!("non-canonical pattern `{text}`")));
        }
        let blob_len = r.u64()?;
        Ok((
            Marker {
                granularity,
                blob_len,
            },
            r.position(),
        ))
    }
}

/// Where the pieces of an encrypted frame live.
#[derive(Debug, Clone)]
pub struct EncryptedLayout<'a> {
    /// `None` for FULL frames.
    pub header: Option<Header>,
    pub marker: Marker,
    pub header_bytes: &'a [u8],
    pub reduced_body: &'a [u8],
    pub blob: &'a [u8],
}

impl EncryptedLayout<'_> {
    pub fn pattern(&self) -> Option<Pattern> {
        match self.marker.granularity {
            Granularity::Full => None,
            Granularity::Selective(p) => Some(p),
        }
    }
}

fn reduced_body_len(header: &Header, pattern: &Pattern) -> Option<usize> {
    header
        .body_len()?
        .checked_sub(COORD_WIDTH * pattern.targeted_count(header.vertex_count))
}

/// Finds the marker and splits an encrypted frame into its parts.
///
/// A selective marker sits where the reduced body ends, which depends on
/// the pattern the marker names, so candidates are accepted only when the
/// pattern, the body length and the blob length all agree.
pub fn inspect(enc: &[u8]) -> Result<EncryptedLayout<'_>, CodecError> {
    if enc.starts_with(MARKER_MAGIC) {
        let (marker, len) = Marker::decode(enc)?;
        if marker.granularity != Granularity::Full {
            return Err(CodecError::BadMarker("selective marker without a frame".into()));
        }
        if len as u64 + marker.blob_len != enc.len() as u64 {
            return Err(CodecError::BadMarker("blob length does not reach end of input".into()));
        }
        return Ok(EncryptedLayout {
            header: None,
            marker,
            header_bytes: &[],
            reduced_body: &[],
            blob: &enc[len..],
        });
    }

    let header = parse_header(enc)?;
    let full_body = header.body_len().ok_or(CodecError::MarkerNotFound)?;
    let max_removed = header.vertex_count.saturating_mul(3 * COORD_WIDTH);
    let lo = header.len + full_body.saturating_sub(max_removed);
    let hi = (header.len + full_body).min(enc.len());
    if lo > hi {
        return Err(CodecError::MarkerNotFound);
    }
    let window = &enc[lo..(hi + MARKER_MAGIC.len()).min(enc.len())];
    for offset in memchr::memmem::find_iter(window, MARKER_MAGIC) {
        let at = lo + offset;
        let Ok((marker, len)) = Marker::decode(&enc[at..]) else {
            continue;
        };
        let Granularity::Selective(pattern) = marker.granularity else {
            continue;
        };
        if reduced_body_len(&header, &pattern) != Some(at - header.len) {
            continue;
        }
        if (at + len) as u64 + marker.blob_len != enc.len() as u64 {
            continue;
        }
        return Ok(EncryptedLayout {
            header_bytes: &enc[..header.len],
            reduced_body: &enc[header.len..at],
            blob: &enc[at + len..],
            header: Some(header),
            marker,
        });
    }
    Err(CodecError::MarkerNotFound)
}

/// Targeted coordinates of `cloud` in removal order.
pub fn removal_buffer(cloud: &PointCloud, pattern: &Pattern) -> Vec<f64> {
    let mut out = Vec::with_capacity(pattern.targeted_count(cloud.len()));
    for (n, v) in cloud.vertices.iter().enumerate() {
        for axis in Axis::ALL {
            if pattern.is_targeted(n, axis) {
                out.push(v.position[axis.index()]);
            }
        }
    }
    out
}

fn append_marker_and_blob(out: &mut Vec<u8>, granularity: Granularity, blob: &[u8]) {
    let marker = Marker {
        granularity,
        blob_len: blob.len() as u64,
    };
    out.reserve(marker.encoded_len() + blob.len());
    marker.write_to(out);
    out.extend_from_slice(blob);
}

/// How one record splits under one targeting mask: runs of kept bytes,
/// and the offsets of targeted coordinates in removal order.
#[derive(Default)]
struct RecordPlan {
    keep: Vec<(usize, usize)>,
    cut: Vec<usize>,
}

/// Plans for all eight masks, indexed by `x | y << 1 | z << 2`.
fn record_plans(schema: &VertexSchema) -> [RecordPlan; 8] {
    let offsets = schema.axis_offsets();
    std::array::from_fn(|bits| {
        let mask = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
        let mut plan = RecordPlan::default();
        let mut at = 0;
        for prop in schema.properties() {
            let width = prop.width();
            if !prop.field.axis().is_some_and(|a| mask[a]) {
                match plan.keep.last_mut() {
                    Some((start, len)) if *start + *len == at => *len += width,
                    _ => plan.keep.push((at, width)),
                }
            }
            at += width;
        }
        plan.cut = Axis::ALL
            .iter()
            .filter(|a| mask[a.index()])
            .map(|a| offsets[a.index()])
            .collect();
        plan
    })
}

/// Mask index of each vertex in turn, without a division per vertex.
struct MaskCursor {
    strides: [usize; 3],
    phase: [usize; 3],
}

impl MaskCursor {
    fn new(pattern: &Pattern) -> Self {
        MaskCursor {
            strides: pattern.strides().map(|s| s.map_or(0, |k| k as usize)),
            phase: [0; 3],
        }
    }

    #[inline]
    fn next_bits(&mut self) -> usize {
        let mut bits = 0;
        for a in 0..3 {
            if self.strides[a] == 0 {
                continue;
            }
            if self.phase[a] == 0 {
                bits |= 1 << a;
            }
            self.phase[a] += 1;
            if self.phase[a] == self.strides[a] {
                self.phase[a] = 0;
            }
        }
        bits
    }
}

/// Encrypts a PLY frame under `granularity`, sealing the removed values
/// (or the whole file) with `sealer`.
pub fn encrypt_frame_with(
    ply: &[u8],
    granularity: Granularity,
    sealer: &dyn Sealer,
    rng: &mut dyn SecureRng,
) -> Result<Vec<u8>, CodecError> {
    let header = parse_header(ply)?;
    let body_len = match header.body_len() {
        Some(len) if header.len + len <= ply.len() => len,
        _ => {
            parse_ply(ply)?;
            unreachable!("parse_ply rejects a short body");
        }
    };
    let tail = ply.len() - header.len - body_len;
    if tail != 0 {
        return Err(CodecError::TrailingData(tail));
    }
    let pattern = match granularity {
        Granularity::Full => {
            let blob = sealer.seal(ply, rng)?;
            let mut out = Vec::new();
            append_marker_and_blob(&mut out, granularity, &blob);
            return Ok(out);
        }
        Granularity::Selective(p) => p,
    };

    let width = header.schema.record_width();
    let targeted = pattern.targeted_count(header.vertex_count);
    let plans = record_plans(&header.schema);
    let mut cursor = MaskCursor::new(&pattern);

    let mut removed = Vec::with_capacity(targeted * COORD_WIDTH);
    let mut out = Vec::with_capacity(ply.len() - targeted * COORD_WIDTH + 256);
    out.extend_from_slice(&ply[..header.len]);
    for record in ply[header.len..].chunks_exact(width) {
        let plan = &plans[cursor.next_bits()];
        for &(at, len) in &plan.keep {
            out.extend_from_slice(&record[at..at + len]);
        }
        for &at in &plan.cut {
            removed.extend_from_slice(&record[at..at + COORD_WIDTH]);
        }
    }
    let blob = sealer.seal(&removed, rng)?;
    append_marker_and_blob(&mut out, granularity, &blob);
    Ok(out)
}

/// Encrypts with the reference backend under `policy`.
pub fn encrypt_frame(
    ply: &[u8],
    granularity: Granularity,
    params: &PublicParams,
    policy: &PolicyTree,
    rng: &mut dyn SecureRng,
) -> Result<Vec<u8>, CodecError> {
    let sealer = PolicySealer { params, policy };
    encrypt_frame_with(ply, granularity, &sealer, rng)
}

/// Like [`encrypt_frame`] with an OS-seeded generator.
pub fn encrypt_frame_fresh(
    ply: &[u8],
    granularity: Granularity,
    params: &PublicParams,
    policy: &PolicyTree,
) -> Result<Vec<u8>, CodecError> {
    let mut rng = rand_chacha::ChaCha20Rng::from_entropy();
    encrypt_frame(ply, granularity, params, policy, &mut rng)
}

/// Rebuilds the full body from the reduced one, taking targeted
/// coordinates from `removed` in removal order, or zeros when it is None.
fn restore(layout: &EncryptedLayout<'_>, pattern: &Pattern, removed: Option<&[u8]>) -> Vec<u8> {
    let header = layout.header.as_ref().expect("selective layout has a header");
    let width = header.schema.record_width();
    let plans = record_plans(&header.schema);
    let mut cursor = MaskCursor::new(pattern);
    let mut out = vec![0u8; header.len + width * header.vertex_count];
    out[..header.len].copy_from_slice(layout.header_bytes);

    let mut reduced = layout.reduced_body;
    let mut removed = removed;
    for record in out[header.len..].chunks_exact_mut(width) {
        let plan = &plans[cursor.next_bits()];
        for &(at, len) in &plan.keep {
            let (head, rest) = reduced.split_at(len);
            record[at..at + len].copy_from_slice(head);
            reduced = rest;
        }
        if let Some(src) = removed.as_mut() {
            for &at in &plan.cut {
                let (head, rest) = src.split_at(COORD_WIDTH);
                record[at..at + COORD_WIDTH].copy_from_slice(head);
                *src = rest;
            }
        }
    }
    debug_assert!(reduced.is_empty());
    out
}

pub fn decrypt_frame_with(enc: &[u8], opener: &dyn Opener) -> Result<Vec<u8>, CodecError> {
    let layout = inspect(enc)?;
    let Some(pattern) = layout.pattern() else {
        return Ok(opener.open(layout.blob)?);
    };
    let header = layout.header.as_ref().unwrap();
    let expected = COORD_WIDTH * pattern.targeted_count(header.vertex_count);
    let plain = opener.open(layout.blob)?;
    if plain.len() != expected {
        return Err(CodecError::BufferLengthMismatch {
            expected,
            found: plain.len(),
        });
    }
    Ok(restore(&layout, &pattern, Some(&plain)))
}

pub fn decrypt_frame(enc: &[u8], key: &crate::abe::UserKey) -> Result<Vec<u8>, CodecError> {
    decrypt_frame_with(enc, key)
}

/// The frame an attacker gets by writing zeros where coordinates were
/// removed: valid PLY, original everywhere except targeted coordinates.
pub fn zero_fill(enc: &[u8]) -> Result<Vec<u8>, CodecError> {
    let layout = inspect(enc)?;
    let pattern = layout.pattern().ok_or(CodecError::FullFrame)?;
    Ok(restore(&layout, &pattern, None))
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::abe::{keygen, setup, MasterKey, UserKey};
    use crate::ply::{write_ply, Vertex, VertexSchema};

    fn keys() -> (PublicParams, MasterKey, UserKey, UserKey) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (mut pp, mk) = setup(&mut rng).unwrap();
        for t in ["subscriber", "guest"] {
            pp.publish_tag(&mk, t).unwrap();
        }
        let good = keygen(&pp, &mk, &"subscriber".parse().unwrap(), 0, &mut rng).unwrap();
        let bad = keygen(&pp, &mk, &"guest".parse().unwrap(), 0, &mut rng).unwrap();
        (pp, mk, good, bad)
    }

    fn cloud(n: usize, normals: bool, colors: bool) -> PointCloud {
        let vertices = (0..n)
            .map(|i| {
                let t = i as f64;
                Vertex {
                    position: [t.sin() * 3.0 + 1.0, t.cos() * 2.0 + 1.5, 0.01 * t],
                    normal: [0.0, 1.0, 0.0],
                    color: [(i % 256) as u8, 7, 200],
                }
            })
            .collect();
        PointCloud::new(VertexSchema::canonical(normals, colors), vertices)
    }

    fn g(s: &str) -> Granularity {
        s.parse().unwrap()
    }

    fn policy() -> PolicyTree {
        "subscriber".parse().unwrap()
    }

    #[test]
    fn roundtrip_all_named_patterns() {
        let (pp, _, good, _) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let original = write_ply(&cloud(257, true, true), None);
        for p in ["XYZ", "XY", "X", "2X", "3X", "2XY", "FULL", "Z", "4Y3Z"] {
            let enc = encrypt_frame(&original, g(p), &pp, &policy(), &mut rng).unwrap();
            assert_eq!(decrypt_frame(&enc, &good).unwrap(), original, "{p}");
        }
    }

    #[test]
    fn size_law_and_marker_position() {
        let (pp, _, _, _) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let c = cloud(1000, true, true);
        let original = write_ply(&c, None);
        let p: Pattern = "X".parse().unwrap();
        let enc = encrypt_frame(&original, g("X"), &pp, &policy(), &mut rng).unwrap();
        let layout = inspect(&enc).unwrap();
        assert_eq!(layout.reduced_body.len(), 1000 * 51 - 8 * 1000);
        assert_eq!(layout.marker.blob_len as usize, layout.blob.len());
        assert_eq!(
            enc.len(),
            original.len() - 8 * p.targeted_count(1000) + layout.marker.encoded_len() + layout.blob.len()
        );
        let marker_at = original.len() - 8000;
        assert_eq!(&enc[marker_at..marker_at + 4], b"ABEV");
        assert_eq!(&enc[..layout.header_bytes.len()], &original[..layout.header_bytes.len()]);
    }

    #[test]
    fn xyz_leaves_only_normals_and_colors() {
        let (pp, _, _, _) = keys();
        let c = cloud(10, true, true);
        let original = write_ply(&c, None);
        let enc = encrypt_frame(&original, g("XYZ"), &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let layout = inspect(&enc).unwrap();
        for (record, v) in layout.reduced_body.chunks(27).zip(&c.vertices) {
            assert_eq!(&record[..8], &v.normal[0].to_le_bytes());
            assert_eq!(&record[24..], &v.color);
        }
    }

    #[test]
    fn full_mode_has_no_clear_header() {
        let (pp, _, _, _) = keys();
        let original = write_ply(&cloud(5, false, false), None);
        let enc = encrypt_frame(&original, Granularity::Full, &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        assert!(enc.starts_with(b"ABEV"));
        assert!(memchr::memmem::find(&enc, b"end_header").is_none());
        assert_eq!(zero_fill(&enc).unwrap_err(), CodecError::FullFrame);
    }

    #[test]
    fn wrong_key_and_tampering() {
        let (pp, _, good, bad) = keys();
        let original = write_ply(&cloud(64, true, false), None);
        let enc = encrypt_frame(&original, g("2X"), &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            decrypt_frame(&enc, &bad).unwrap_err(),
            CodecError::Abe(AbeError::PolicyNotSatisfied)
        );
        let mut tampered = enc.clone();
        let last = tampered.len() - 20;
        tampered[last] ^= 0x10;
        assert_eq!(
            decrypt_frame(&tampered, &good).unwrap_err(),
            CodecError::Abe(AbeError::IntegrityFailure)
        );
    }

    #[test]
    fn marker_missing_or_mismatched() {
        let (pp, _, good, _) = keys();
        let original = write_ply(&cloud(32, false, false), None);
        assert_eq!(decrypt_frame(&original, &good).unwrap_err(), CodecError::MarkerNotFound);
        assert_eq!(zero_fill(&original).unwrap_err(), CodecError::MarkerNotFound);

        // a marker whose pattern disagrees with the body length is not accepted
        let enc = encrypt_frame(&original, g("2X"), &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        let at = original.len() - 8 * 16;
        assert_eq!(&enc[at..at + 4], b"ABEV");
        let mut relabeled = enc.clone();
        relabeled[at + 9] = b'3';
        assert_eq!(decrypt_frame(&relabeled, &good).unwrap_err(), CodecError::MarkerNotFound);
    }

    #[test]
    fn buffer_length_mismatch_is_detected() {
        let (pp, _, good, _) = keys();
        let original = write_ply(&cloud(32, false, false), None);
        let header_len = original.len() - 32 * 24;
        // a well-formed frame whose blob seals too few coordinates
        let mut enc = original[..header_len].to_vec();
        enc.extend_from_slice(&original[header_len..header_len + 32 * 16]);
        let blob = PolicySealer { params: &pp, policy: &policy() }
            .seal(&[0u8; 8], &mut ChaCha20Rng::seed_from_u64(7))
            .unwrap();
        append_marker_and_blob(&mut enc, g("X"), &blob);
        assert_eq!(
            decrypt_frame(&enc, &good).unwrap_err(),
            CodecError::BufferLengthMismatch {
                expected: 256,
                found: 8
            }
        );
    }

    #[test]
    fn zero_fill_views() {
        let (pp, _, _, _) = keys();
        let c = cloud(50, true, true);
        let original = write_ply(&c, None);
        let mut rng = ChaCha20Rng::seed_from_u64(8);

        let xyz = zero_fill(&encrypt_frame(&original, g("XYZ"), &pp, &policy(), &mut rng).unwrap()).unwrap();
        let (collapsed, _) = parse_ply(&xyz).unwrap();
        assert!(collapsed.positions().all(|p| p == [0.0; 3]));
        assert_eq!(collapsed.vertices.iter().map(|v| v.color).collect::<Vec<_>>(),
                   c.vertices.iter().map(|v| v.color).collect::<Vec<_>>());

        let xy = zero_fill(&encrypt_frame(&original, g("XY"), &pp, &policy(), &mut rng).unwrap()).unwrap();
        let (line, _) = parse_ply(&xy).unwrap();
        for (a, b) in line.vertices.iter().zip(&c.vertices) {
            assert_eq!(a.position, [0.0, 0.0, b.position[2]]);
        }

        let mut flat = c.clone();
        flat.vertices.iter_mut().for_each(|v| v.position[0] = 0.0);
        let flat_bytes = write_ply(&flat, None);
        let refilled = zero_fill(&encrypt_frame(&flat_bytes, g("X"), &pp, &policy(), &mut rng).unwrap()).unwrap();
        assert_eq!(refilled, flat_bytes);
    }

    #[test]
    fn removal_buffer_order_follows_axes_within_vertex() {
        let c = cloud(5, false, false);
        let p: Pattern = "2XZ".parse().unwrap();
        let buf = removal_buffer(&c, &p);
        let v = &c.vertices;
        let expected = vec![
            v[0].position[0], v[0].position[2],
            v[1].position[2],
            v[2].position[0], v[2].position[2],
            v[3].position[2],
            v[4].position[0], v[4].position[2],
        ];
        assert_eq!(buf, expected);
    }

    #[test]
    fn nan_payloads_and_negative_zero_survive() {
        let (pp, _, good, _) = keys();
        let mut c = cloud(4, false, false);
        c.vertices[0].position[0] = f64::from_bits(0x7ff8_0000_dead_beef);
        c.vertices[1].position[1] = -0.0;
        let original = write_ply(&c, None);
        let enc = encrypt_frame(&original, g("XY"), &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(decrypt_frame(&enc, &good).unwrap(), original);
    }

    #[test]
    fn trailing_bytes_are_refused() {
        let (pp, _, _, _) = keys();
        let mut original = write_ply(&cloud(3, false, false), None);
        original.push(0);
        assert_eq!(
            encrypt_frame(&original, g("X"), &pp, &policy(), &mut ChaCha20Rng::seed_from_u64(1)).unwrap_err(),
            CodecError::TrailingData(1)
        );
    }
}
