//! Attribute sets and access policies.
//!
//! Policies are boolean formulas over bare tags (`researcher`) and numeric
//! comparisons (`exp >= 20260101`). `and` binds tighter than `or`; keywords
//! are case-insensitive and tags are folded to lowercase.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Bit width used for numeric attributes unless configured otherwise.
pub const DEFAULT_BIT_WIDTH: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("invalid attribute `{0}`")]
    InvalidAttribute(String),
    #[error("value {value} does not fit in {bit_width} bits")]
    ValueOutOfRange { value: u64, bit_width: u32 },
    #[error("bit width {0} outside 1..=64")]
    BadBitWidth(u32),
}

fn syntax(offset: usize, message: impl Into<String>) -> PolicyError {
    PolicyError::Syntax {
        offset,
        message: message.into(),
    }
}

/// Lowercase alphanumeric-underscore, not a policy keyword.
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        && name != "and"
        && name != "or"
}

fn max_value(bit_width: u32) -> u64 {
    if bit_width == 64 {
        u64::MAX
    } else {
        (1u64 << bit_width) - 1
    }
}

fn check_width(bit_width: u32) -> Result<(), PolicyError> {
    if (1..=64).contains(&bit_width) {
        Ok(())
    } else {
        Err(PolicyError::BadBitWidth(bit_width))
    }
}

/// Tag naming one bit of a numeric attribute.
pub fn bit_tag(name: &str, bit: u32, value: bool) -> String {
    format!("{name}${bit}${}", u8::from(value))
}

/// A user's attributes: bare tags and `name=value` numeric attributes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttributeSet {
    attrs: BTreeMap<String, Option<u64>>,
}

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(mut self, tag: &str) -> Result<Self, PolicyError> {
        self.insert(tag, None)?;
        Ok(self)
    }

    pub fn with_numeric(mut self, name: &str, value: u64) -> Result<Self, PolicyError> {
        self.insert(name, Some(value))?;
        Ok(self)
    }

    fn insert(&mut self, name: &str, value: Option<u64>) -> Result<(), PolicyError> {
        if !is_valid_name(name) || self.attrs.contains_key(name) {
            return Err(PolicyError::InvalidAttribute(name.to_string()));
        }
        self.attrs.insert(name.to_string(), value);
        Ok(())
    }

    /// Replaces (or adds) a numeric attribute.
    pub fn set_numeric(&mut self, name: &str, value: u64) -> Result<(), PolicyError> {
        self.attrs.remove(name);
        self.insert(name, Some(value))
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        matches!(self.attrs.get(tag), Some(None))
    }

    pub fn numeric(&self, name: &str) -> Option<u64> {
        self.attrs.get(name).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<u64>)> {
        self.attrs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// The flat tag set a key holder owns: bare tags plus one bit tag per
    /// bit of every numeric attribute.
    pub fn expand(&self, bit_width: u32) -> Result<BTreeSet<String>, PolicyError> {
        check_width(bit_width)?;
        let mut tags = BTreeSet::new();
        for (name, value) in &self.attrs {
            match value {
                None => {
                    tags.insert(name.clone());
                }
                Some(v) => {
                    if *v > max_value(bit_width) {
                        return Err(PolicyError::ValueOutOfRange {
                            value: *v,
                            bit_width,
                        });
                    }
                    for bit in 0..bit_width {
                        tags.insert(bit_tag(name, bit, (v >> bit) & 1 == 1));
                    }
                }
            }
        }
        Ok(tags)
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            match value {
                None => f.write_str(name)?,
                Some(v) => write!(f, "{name}={v}")?,
            }
        }
        Ok(())
    }
}

/// `researcher;univx;exp=20261231`
impl FromStr for AttributeSet {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = AttributeSet::new();
        for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
            match item.split_once('=') {
                None => set.insert(item, None)?,
                Some((name, value)) => {
                    let value = value
                        .trim()
                        .parse()
                        .map_err(|_| PolicyError::InvalidAttribute(item.to_string()))?;
                    set.insert(name.trim(), Some(value))?
                }
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Comparator {
    pub fn holds(self, lhs: u64, rhs: u64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NumericLeaf {
    pub name: String,
    pub cmp: Comparator,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PolicyTree {
    Leaf(String),
    Numeric(NumericLeaf),
    And(Vec<PolicyTree>),
    Or(Vec<PolicyTree>),
}

impl PolicyTree {
    pub fn leaf(tag: &str) -> Self {
        PolicyTree::Leaf(tag.to_string())
    }

    pub fn numeric(name: &str, cmp: Comparator, value: u64) -> Self {
        PolicyTree::Numeric(NumericLeaf {
            name: name.to_string(),
            cmp,
            value,
        })
    }

    /// Conjunction, flattening nested conjunctions. A single child is
    /// returned as-is.
    pub fn and(children: Vec<PolicyTree>) -> Self {
        Self::join(children, true)
    }

    pub fn or(children: Vec<PolicyTree>) -> Self {
        Self::join(children, false)
    }

    fn join(children: Vec<PolicyTree>, conj: bool) -> Self {
        let mut flat = Vec::with_capacity(children.len());
        for child in children {
            match child {
                PolicyTree::And(inner) if conj => flat.extend(inner),
                PolicyTree::Or(inner) if !conj => flat.extend(inner),
                other => flat.push(other),
            }
        }
        assert!(!flat.is_empty(), "gate needs at least one child");
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else if conj {
            PolicyTree::And(flat)
        } else {
            PolicyTree::Or(flat)
        }
    }

    pub fn eval(&self, attrs: &AttributeSet) -> bool {
        match self {
            PolicyTree::Leaf(tag) => attrs.has_tag(tag),
            PolicyTree::Numeric(leaf) => attrs
                .numeric(&leaf.name)
                .is_some_and(|v| leaf.cmp.holds(v, leaf.value)),
            PolicyTree::And(children) => children.iter().all(|c| c.eval(attrs)),
            PolicyTree::Or(children) => children.iter().any(|c| c.eval(attrs)),
        }
    }

    /// Tag-only gate tree with numeric leaves compiled to bit tags.
    pub fn compile(&self, bit_width: u32) -> Result<GateTree, PolicyError> {
        Ok(match self {
            PolicyTree::Leaf(tag) => GateTree::Tag(tag.clone()),
            PolicyTree::Numeric(leaf) => compile_numeric(leaf, bit_width)?,
            PolicyTree::And(children) => GateTree::and(
                children
                    .iter()
                    .map(|c| c.compile(bit_width))
                    .collect::<Result<_, _>>()?,
            ),
            PolicyTree::Or(children) => GateTree::or(
                children
                    .iter()
                    .map(|c| c.compile(bit_width))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PolicyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyTree::Leaf(tag) => f.write_str(tag),
            PolicyTree::Numeric(leaf) => {
                write!(f, "{} {} {}", leaf.name, leaf.cmp.symbol(), leaf.value)
            }
            PolicyTree::And(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" and ")?;
                    }
                    if matches!(c, PolicyTree::Or(_)) {
                        write!(f, "({c})")?;
                    } else {
                        write!(f, "{c}")?;
                    }
                }
                Ok(())
            }
            PolicyTree::Or(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" or ")?;
                    }
                    write!(f, "{c}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PolicyTree {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_policy(s)
    }
}

pub fn eval_policy(q: &PolicyTree, attrs: &AttributeSet) -> bool {
    q.eval(attrs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token<'a> {
    Word(&'a str),
    Cmp(Comparator),
    Open,
    Close,
    And,
    Or,
}

fn tokenize(s: &str) -> Result<Vec<(usize, Token<'_>)>, PolicyError> {
    let bytes = s.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'(' => {
                tokens.push((start, Token::Open));
                i += 1;
            }
            b')' => {
                tokens.push((start, Token::Close));
                i += 1;
            }
            b'<' | b'>' | b'=' => {
                let eq_follows = bytes.get(i + 1) == Some(&b'=');
                let (cmp, len) = match (b, eq_follows) {
                    (b'<', true) => (Comparator::Le, 2),
                    (b'<', false) => (Comparator::Lt, 1),
                    (b'>', true) => (Comparator::Ge, 2),
                    (b'>', false) => (Comparator::Gt, 1),
                    (_, true) => (Comparator::Eq, 2),
                    (_, false) => (Comparator::Eq, 1),
                };
                tokens.push((start, Token::Cmp(cmp)));
                i += len;
            }
            b if b.is_ascii_alphanumeric() || b == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &s[start..i];
                let token = if word.eq_ignore_ascii_case("and") {
                    Token::And
                } else if word.eq_ignore_ascii_case("or") {
                    Token::Or
                } else {
                    Token::Word(word)
                };
                tokens.push((start, token));
            }
            _ => {
                let c = s[i..].chars().next().unwrap();
                return Err(syntax(start, format!("unexpected character `{c}`")));
            }
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn expr(&mut self, depth: usize) -> Result<PolicyTree, PolicyError> {
        let mut terms = vec![self.term(depth)?];
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            terms.push(self.term(depth)?);
        }
        Ok(PolicyTree::or(terms))
    }

    fn term(&mut self, depth: usize) -> Result<PolicyTree, PolicyError> {
        let mut factors = vec![self.factor(depth)?];
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            factors.push(self.factor(depth)?);
        }
        Ok(PolicyTree::and(factors))
    }

    fn factor(&mut self, depth: usize) -> Result<PolicyTree, PolicyError> {
        let at = self.offset();
        match self.tokens.get(self.pos).map(|(_, t)| t.clone()) {
            Some(Token::Open) => {
                if depth >= 64 {
                    return Err(syntax(at, "nesting too deep"));
                }
                self.pos += 1;
                let inner = self.expr(depth + 1)?;
                if self.peek() != Some(&Token::Close) {
                    return Err(syntax(self.offset(), "expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Token::Word(word)) => {
                self.pos += 1;
                let name = word.to_ascii_lowercase();
                if !is_valid_name(&name) {
                    return Err(syntax(at, format!("invalid attribute name `{word}`")));
                }
                if let Some(Token::Cmp(cmp)) = self.peek().cloned() {
                    self.pos += 1;
                    let value_at = self.offset();
                    let value = match self.peek() {
                        Some(Token::Word(v)) if v.bytes().all(|b| b.is_ascii_digit()) => v
                            .parse::<u64>()
                            .map_err(|_| syntax(value_at, "integer does not fit in 64 bits"))?,
                        _ => return Err(syntax(value_at, "expected an integer")),
                    };
                    self.pos += 1;
                    Ok(PolicyTree::numeric(&name, cmp, value))
                } else {
                    Ok(PolicyTree::Leaf(name))
                }
            }
            Some(_) => Err(syntax(at, "expected an attribute or `(`")),
            None => Err(syntax(at, "unexpected end of policy")),
        }
    }
}

pub fn parse_policy(text: &str) -> Result<PolicyTree, PolicyError> {
    let mut parser = Parser {
        tokens: tokenize(text)?,
        pos: 0,
        end: text.len(),
    };
    let tree = parser.expr(0)?;
    if parser.pos != parser.tokens.len() {
        return Err(syntax(parser.offset(), "unexpected trailing input"));
    }
    Ok(tree)
}

/// A policy over plain tags and constants; the shape secret shares are
/// laid over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateTree {
    Const(bool),
    Tag(String),
    And(Vec<GateTree>),
    Or(Vec<GateTree>),
}

impl GateTree {
    /// Conjunction with constant folding.
    pub fn and(children: Vec<GateTree>) -> Self {
        let mut kept = Vec::with_capacity(children.len());
        for c in children {
            match c {
                GateTree::Const(true) => {}
                GateTree::Const(false) => return GateTree::Const(false),
                GateTree::And(inner) => kept.extend(inner),
                other => kept.push(other),
            }
        }
        match kept.len() {
            0 => GateTree::Const(true),
            1 => kept.pop().unwrap(),
            _ => GateTree::And(kept),
        }
    }

    pub fn or(children: Vec<GateTree>) -> Self {
        let mut kept = Vec::with_capacity(children.len());
        for c in children {
            match c {
                GateTree::Const(false) => {}
                GateTree::Const(true) => return GateTree::Const(true),
                GateTree::Or(inner) => kept.extend(inner),
                other => kept.push(other),
            }
        }
        match kept.len() {
            0 => GateTree::Const(false),
            1 => kept.pop().unwrap(),
            _ => GateTree::Or(kept),
        }
    }

    pub fn eval(&self, tags: &BTreeSet<String>) -> bool {
        match self {
            GateTree::Const(b) => *b,
            GateTree::Tag(t) => tags.contains(t),
            GateTree::And(c) => c.iter().all(|g| g.eval(tags)),
            GateTree::Or(c) => c.iter().any(|g| g.eval(tags)),
        }
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_tags(&mut out);
        out
    }

    fn collect_tags<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            GateTree::Const(_) => {}
            GateTree::Tag(t) => {
                out.insert(t);
            }
            GateTree::And(c) | GateTree::Or(c) => c.iter().for_each(|g| g.collect_tags(out)),
        }
    }
}

/// Compiles a numeric comparison into a gate tree over the bit tags of the
/// attribute (see [`AttributeSet::expand`]).
///
/// Holders of the attribute carry exactly one of `name$b$0`/`name$b$1` for
/// every bit `b`, so a comparison that holds for every value still requires
/// the attribute to be present.
pub fn compile_numeric(leaf: &NumericLeaf, bit_width: u32) -> Result<GateTree, PolicyError> {
    check_width(bit_width)?;
    let max = max_value(bit_width);
    let v = leaf.value;
    if v > max {
        return Err(PolicyError::ValueOutOfRange {
            value: v,
            bit_width,
        });
    }
    let bit = |i: u32, b: bool| GateTree::Tag(bit_tag(&leaf.name, i, b));

    // x >= t, built from the least significant bit upwards.
    let at_least = |t: u64| {
        let mut tree = GateTree::Const(true);
        for i in 0..bit_width {
            tree = if (t >> i) & 1 == 1 {
                GateTree::and(vec![bit(i, true), tree])
            } else {
                GateTree::or(vec![bit(i, true), tree])
            };
        }
        tree
    };
    let below = |t: u64| {
        let mut tree = GateTree::Const(false);
        for i in 0..bit_width {
            tree = if (t >> i) & 1 == 1 {
                GateTree::or(vec![bit(i, false), tree])
            } else {
                GateTree::and(vec![bit(i, false), tree])
            };
        }
        tree
    };

    let tree = match leaf.cmp {
        Comparator::Eq => GateTree::and(
            (0..bit_width)
                .rev()
                .map(|i| bit(i, (v >> i) & 1 == 1))
                .collect(),
        ),
        Comparator::Ge => at_least(v),
        Comparator::Gt if v == max => GateTree::Const(false),
        Comparator::Gt => at_least(v + 1),
        Comparator::Lt => below(v),
        Comparator::Le if v == max => GateTree::Const(true),
        Comparator::Le => below(v + 1),
    };
    Ok(match tree {
        GateTree::Const(true) => GateTree::or(vec![bit(0, false), bit(0, true)]),
        other => other,
    })
}
