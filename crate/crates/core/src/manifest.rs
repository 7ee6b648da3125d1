//! Minimal MPD-style manifest: one `<MPD>` root carrying the frame rate,
//! frame count and encryption level, with a single `<SegmentTemplate>`.
//!
//! ```xml
//! <MPD frameRate="24" frameCount="1440" encryptionLevel="X" policy="subscriber">
//!   <SegmentTemplate media="frames/f_$Index$.eply"/>
//! </MPD>
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::pattern::{Granularity, Pattern};
use crate::policy::parse_policy;

pub const INDEX_TOKEN: &str = "$Index$";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error("schema violation at byte {offset}: {message}")]
    SchemaViolation { offset: usize, message: String },
    #[error("media template `{0}` has no $Index$ token")]
    BadTemplate(String),
    #[error("frame index {index} out of range for {count} frames")]
    IndexOutOfRange { index: u64, count: u64 },
}

fn violation(offset: usize, message: impl Into<String>) -> ManifestError {
    ManifestError::SchemaViolation {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncryptionLevel {
    None,
    Full,
    Selective(Pattern),
}

impl EncryptionLevel {
    pub fn granularity(self) -> Option<Granularity> {
        match self {
            EncryptionLevel::None => None,
            EncryptionLevel::Full => Some(Granularity::Full),
            EncryptionLevel::Selective(p) => Some(Granularity::Selective(p)),
        }
    }

    pub fn is_encrypted(self) -> bool {
        self != EncryptionLevel::None
    }
}

impl From<Granularity> for EncryptionLevel {
    fn from(g: Granularity) -> Self {
        match g {
            Granularity::Full => EncryptionLevel::Full,
            Granularity::Selective(p) => EncryptionLevel::Selective(p),
        }
    }
}

impl fmt::Display for EncryptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncryptionLevel::None => f.write_str("NONE"),
            EncryptionLevel::Full => f.write_str(Granularity::FULL_TEXT),
            EncryptionLevel::Selective(p) => p.fmt(f),
        }
    }
}

impl FromStr for EncryptionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "NONE" {
            return Ok(EncryptionLevel::None);
        }
        let g: Granularity = s.parse().map_err(|e| format!("{e}"))?;
        if g.to_string() != s {
            return Err(format!("pattern `{s}` is not canonical"));
        }
        Ok(g.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub frame_rate: u32,
    pub frame_count: u64,
    pub media_template: String,
    pub encryption_level: EncryptionLevel,
    pub policy_hint: Option<String>,
    pub license_url: Option<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.frame_rate == 0 {
            return Err(violation(0, "frameRate must be positive"));
        }
        if self.frame_count == 0 {
            return Err(violation(0, "frameCount must be positive"));
        }
        if !self.media_template.contains(INDEX_TOKEN) {
            return Err(ManifestError::BadTemplate(self.media_template.clone()));
        }
        if self.encryption_level == EncryptionLevel::None
            && (self.policy_hint.is_some() || self.license_url.is_some())
        {
            return Err(violation(0, "plain manifests carry no policy or license URL"));
        }
        if let Some(p) = &self.policy_hint {
            parse_policy(p).map_err(|e| violation(0, format!("policy: {e}")))?;
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frame_count as f64 / self.frame_rate as f64
    }

    pub fn frame_url(&self, index: u64) -> Result<String, ManifestError> {
        if index >= self.frame_count {
            return Err(ManifestError::IndexOutOfRange {
                index,
                count: self.frame_count,
            });
        }
        let width = (self.frame_count - 1).to_string().len();
        Ok(self
            .media_template
            .replace(INDEX_TOKEN, &format!("{index:0width$}")))
    }
}

pub fn frame_url(m: &Manifest, index: u64) -> Result<String, ManifestError> {
    m.frame_url(index)
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn generate_mpd(m: &Manifest) -> String {
    let mut root = format!(
        "<MPD frameRate=\"{}\" frameCount=\"{}\" encryptionLevel=\"{}\"",
        m.frame_rate, m.frame_count, m.encryption_level
    );
    if let Some(p) = &m.policy_hint {
        root.push_str(&format!(" policy=\"{}\"", escape(p)));
    }
    if let Some(u) = &m.license_url {
        root.push_str(&format!(" licenseUrl=\"{}\"", escape(u)));
    }
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n{root}>\n  <SegmentTemplate media=\"{}\"/>\n</MPD>\n",
        escape(&m.media_template)
    )
}

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

struct Element<'a> {
    name: &'a str,
    attrs: Vec<(&'a str, String, usize)>,
    self_closing: bool,
}

impl<'a> Scanner<'a> {
    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_misc(&mut self) -> Result<(), ManifestError> {
        loop {
            let trimmed = self.rest().trim_start_matches([' ', '\t', '\r', '\n']);
            self.pos = self.text.len() - trimmed.len();
            if self.rest().starts_with("<!--") {
                let end = self.rest()[4..]
                    .find("-->")
                    .ok_or_else(|| violation(self.pos, "unterminated comment"))?;
                self.pos += 4 + end + 3;
            } else {
                return Ok(());
            }
        }
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), ManifestError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(violation(self.pos, format!("expected `{s}`")))
        }
    }

    fn name(&mut self) -> Result<&'a str, ManifestError> {
        let rest = self.rest();
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == ':' || c == '.'))
            .unwrap_or(rest.len());
        if len == 0 || !rest.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_') {
            return Err(violation(self.pos, "expected a name"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn value(&mut self) -> Result<String, ManifestError> {
        let start = self.pos;
        let quote = match self.rest().chars().next() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(violation(start, "expected a quoted value")),
        };
        self.pos += 1;
        let body_len = self
            .rest()
            .find(quote)
            .ok_or_else(|| violation(start, "unterminated attribute value"))?;
        let raw = &self.rest()[..body_len];
        let base = self.pos;
        self.pos += body_len + 1;
        unescape(raw).map_err(|at| violation(base + at, "bad character or entity in value"))
    }

    fn open_tag(&mut self) -> Result<Element<'a>, ManifestError> {
        self.expect("<")?;
        let name = self.name()?;
        let mut attrs = Vec::new();
        loop {
            let had_space = self.rest().starts_with([' ', '\t', '\r', '\n']);
            self.pos = self.text.len() - self.rest().trim_start_matches([' ', '\t', '\r', '\n']).len();
            if self.eat("/>") {
                return Ok(Element { name, attrs, self_closing: true });
            }
            if self.eat(">") {
                return Ok(Element { name, attrs, self_closing: false });
            }
            if !had_space {
                return Err(violation(self.pos, "expected whitespace before attribute"));
            }
            let at = self.pos;
            let key = self.name()?;
            self.skip_ws();
            self.expect("=")?;
            self.skip_ws();
            let value = self.value()?;
            attrs.push((key, value, at));
        }
    }

    fn skip_ws(&mut self) {
        self.pos = self.text.len() - self.rest().trim_start_matches([' ', '\t', '\r', '\n']).len();
    }
}

/// Resolves the five predefined entities; the error is the byte offset of
/// the offending character.
fn unescape(raw: &str) -> Result<String, usize> {
    let mut out = String::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let rest = &raw[i..];
        let c = rest.chars().next().unwrap();
        match c {
            '<' => return Err(i),
            '&' => {
                let (text, len) = [("&lt;", '<'), ("&gt;", '>'), ("&amp;", '&'), ("&quot;", '"'), ("&apos;", '\'')]
                    .iter()
                    .find(|(e, _)| rest.starts_with(e))
                    .map(|(e, ch)| (*ch, e.len()))
                    .ok_or(i)?;
                out.push(text);
                i += len;
            }
            c => {
                out.push(c);
                i += c.len_utf8();
            }
        }
    }
    Ok(out)
}

fn take_attrs<'a, const N: usize>(
    el: &Element<'a>,
    known: [&str; N],
) -> Result<[Option<(String, usize)>; N], ManifestError> {
    let mut found: [Option<(String, usize)>; N] = std::array::from_fn(|_| None);
    for (key, value, at) in &el.attrs {
        let slot = known
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| violation(*at, format!("unknown attribute `{key}` on <{}>", el.name)))?;
        if found[slot].is_some() {
            return Err(violation(*at, format!("duplicate attribute `{key}`")));
        }
        found[slot] = Some((value.clone(), *at));
    }
    Ok(found)
}

fn positive<T: FromStr + Default + PartialEq>(
    attr: &Option<(String, usize)>,
    name: &str,
    root_at: usize,
) -> Result<T, ManifestError> {
    let (text, at) = attr
        .as_ref()
        .ok_or_else(|| violation(root_at, format!("missing attribute `{name}`")))?;
    let ok = !text.is_empty() && text.bytes().all(|b| b.is_ascii_digit());
    match text.parse::<T>() {
        Ok(v) if ok && v != T::default() => Ok(v),
        _ => Err(violation(*at, format!("`{name}` must be a positive integer"))),
    }
}

pub fn parse_mpd(text: &str) -> Result<Manifest, ManifestError> {
    let mut s = Scanner { text, pos: 0 };
    s.skip_misc()?;
    if s.eat("<?xml") {
        let end = s
            .rest()
            .find("?>")
            .ok_or_else(|| violation(s.pos, "unterminated XML declaration"))?;
        s.pos += end + 2;
    }
    s.skip_misc()?;
    let root_at = s.pos;
    let root = s.open_tag()?;
    if root.name != "MPD" {
        return Err(violation(root_at, format!("unknown root element <{}>", root.name)));
    }
    if root.self_closing {
        return Err(violation(root_at, "<MPD> needs a <SegmentTemplate> child"));
    }
    let [rate, count, level, policy, license] = take_attrs(
        &root,
        ["frameRate", "frameCount", "encryptionLevel", "policy", "licenseUrl"],
    )?;
    let frame_rate: u32 = positive(&rate, "frameRate", root_at)?;
    let frame_count: u64 = positive(&count, "frameCount", root_at)?;
    let (level_text, level_at) =
        level.ok_or_else(|| violation(root_at, "missing attribute `encryptionLevel`"))?;
    let encryption_level: EncryptionLevel = level_text
        .parse()
        .map_err(|e| violation(level_at, format!("encryptionLevel: {e}")))?;

    s.skip_misc()?;
    let child_at = s.pos;
    if s.rest().starts_with("</") {
        return Err(violation(child_at, "<MPD> needs a <SegmentTemplate> child"));
    }
    let child = s.open_tag()?;
    if child.name != "SegmentTemplate" {
        return Err(violation(child_at, format!("unknown element <{}>", child.name)));
    }
    let [media] = take_attrs(&child, ["media"])?;
    let (media_template, _) =
        media.ok_or_else(|| violation(child_at, "missing attribute `media`"))?;
    if !child.self_closing {
        s.skip_misc()?;
        s.expect("</SegmentTemplate>")?;
    }
    s.skip_misc()?;
    if !s.rest().starts_with("</") {
        return Err(violation(s.pos, "unexpected content; only one <SegmentTemplate> allowed"));
    }
    s.expect("</MPD>")?;
    s.skip_misc()?;
    if !s.rest().is_empty() {
        return Err(violation(s.pos, "content after </MPD>"));
    }

    let m = Manifest {
        frame_rate,
        frame_count,
        media_template,
        encryption_level,
        policy_hint: policy.map(|(v, _)| v),
        license_url: license.map(|(v, _)| v),
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample(level: &str) -> Manifest {
        Manifest {
            frame_rate: 24,
            frame_count: 1440,
            media_template: "frames/f_$Index$.eply".into(),
            encryption_level: level.parse().unwrap(),
            policy_hint: None,
            license_url: None,
        }
    }

    #[test]
    fn generates_expected_attributes() {
        let doc = generate_mpd(&sample("X"));
        assert!(doc.contains(r#"frameRate="24""#));
        assert!(doc.contains(r#"frameCount="1440""#));
        assert!(doc.contains(r#"encryptionLevel="X""#));
        let plain = generate_mpd(&sample("NONE"));
        assert!(!plain.contains("policy") && !plain.contains("licenseUrl"));
        assert_eq!(parse_mpd(&plain).unwrap(), sample("NONE"));
    }

    #[test]
    fn frame_urls() {
        let m = sample("X");
        assert_eq!(m.frame_url(7).unwrap(), "frames/f_0007.eply");
        let mut small = sample("NONE");
        small.frame_count = 10;
        assert_eq!(small.frame_url(9).unwrap(), "frames/f_9.eply");
        assert_eq!(
            small.frame_url(10),
            Err(ManifestError::IndexOutOfRange { index: 10, count: 10 })
        );
        small.frame_count = 3;
        let urls: Vec<String> = (0..3).map(|i| small.frame_url(i).unwrap()).collect();
        assert_eq!(urls, ["frames/f_0.eply", "frames/f_1.eply", "frames/f_2.eply"]);
    }

    #[test]
    fn schema_violations() {
        let bad = [
            r#"<MPD frameRate="24" frameCount="3"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="0" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X" codec="x"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"><Period/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="XX"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="ZX"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="+24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$&nbsp;"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/><SegmentTemplate media="g_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="NONE" policy="a"><SegmentTemplate media="f_$Index$"/></MPD>"#,
            r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/></MPD>trailing"#,
            r#"<MPD xmlns="urn:mpeg:dash" frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f_$Index$"/></MPD>"#,
        ];
        for doc in bad {
            assert!(
                matches!(parse_mpd(doc), Err(ManifestError::SchemaViolation { .. })),
                "{doc}: {:?}",
                parse_mpd(doc)
            );
        }
        assert_eq!(
            parse_mpd(r#"<MPD frameRate="24" frameCount="3" encryptionLevel="X"><SegmentTemplate media="f.ply"/></MPD>"#),
            Err(ManifestError::BadTemplate("f.ply".into()))
        );
    }

    #[test]
    fn accepts_lenient_whitespace_quotes_and_comments() {
        let doc = "<!-- generated -->\n<MPD frameRate='30'\n frameCount = \"5\" encryptionLevel='2XY' policy='a &amp; b or &quot;c&quot;' >\
                   <!-- one template --><SegmentTemplate media='x/$Index$.eply'></SegmentTemplate></MPD>\n";
        let err = parse_mpd(doc).unwrap_err();
        // the policy text is not a valid expression once unescaped
        assert!(matches!(err, ManifestError::SchemaViolation { .. }));
        let doc = doc.replace("a &amp; b or &quot;c&quot;", "a and (b or c)");
        let m = parse_mpd(&doc).unwrap();
        assert_eq!(m.frame_rate, 30);
        assert_eq!(m.encryption_level.to_string(), "2XY");
        assert_eq!(m.policy_hint.as_deref(), Some("a and (b or c)"));
    }

    fn level() -> impl Strategy<Value = EncryptionLevel> {
        prop_oneof![
            Just(EncryptionLevel::None),
            Just(EncryptionLevel::Full),
            prop::sample::select(vec!["X", "XY", "XYZ", "2X", "2XY", "3X5Z"])
                .prop_map(|s| s.parse().unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(
            rate in 1u32..240,
            count in 1u64..100_000,
            level in level(),
            prefix in "[a-z/<>&'\" _.]{0,12}",
            suffix in "[a-z.&<]{0,6}",
            url in proptest::option::of("http://[a-z]{1,8}(:[0-9]{2,5})?/license\\?x=1&y='2'"),
            policy in proptest::option::of(prop::sample::select(vec!["subscriber", "a and (b or c)", "exp >= 20260101"])),
        ) {
            let encrypted = level.is_encrypted();
            let m = Manifest {
                frame_rate: rate,
                frame_count: count,
                media_template: format!("{prefix}{INDEX_TOKEN}{suffix}"),
                encryption_level: level,
                policy_hint: policy.filter(|_| encrypted).map(str::to_string),
                license_url: url.filter(|_| encrypted),
            };
            prop_assert_eq!(parse_mpd(&generate_mpd(&m)).unwrap(), m);
        }
    }
}
