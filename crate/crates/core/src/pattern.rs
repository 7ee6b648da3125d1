//! Encryption granularity patterns such as `XYZ`, `X`, `2X` or `2XY`.
//!
//! A stride prefix binds to the axis that directly follows it, so `2XY`
//! targets every second x coordinate and every y coordinate. A stride `k`
//! targets vertex indices `0, k, 2k, ...`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("empty pattern")]
    EmptyPattern,
    #[error("unknown symbol `{symbol}` at byte {offset}")]
    UnknownSymbol { symbol: char, offset: usize },
    #[error("axis {0} mentioned twice")]
    DuplicateAxis(Axis),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("stride at byte {0} is not followed by an axis")]
    MissingAxis(usize),
    #[error("stride at byte {0} does not fit in 32 bits")]
    StrideOverflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_char(c: char) -> Option<Axis> {
        match c {
            'X' => Some(Axis::X),
            'Y' => Some(Axis::Y),
            'Z' => Some(Axis::Z),
            _ => None,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        })
    }
}

/// Per-axis strides; `None` leaves the axis untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pattern {
    strides: [Option<u32>; 3],
}

impl Pattern {
    pub fn new(strides: [Option<u32>; 3]) -> Result<Self, PatternError> {
        if strides.iter().all(Option::is_none) {
            return Err(PatternError::EmptyPattern);
        }
        if strides.contains(&Some(0)) {
            return Err(PatternError::ZeroStride);
        }
        Ok(Pattern { strides })
    }

    pub fn stride(&self, axis: Axis) -> Option<u32> {
        self.strides[axis.index()]
    }

    pub fn strides(&self) -> [Option<u32>; 3] {
        self.strides
    }

    #[inline]
    pub fn is_targeted(&self, vertex_index: usize, axis: Axis) -> bool {
        match self.strides[axis.index()] {
            Some(k) => vertex_index.is_multiple_of(k as usize),
            None => false,
        }
    }

    /// Per-axis targeting for one vertex, in X, Y, Z order.
    #[inline]
    pub fn mask(&self, vertex_index: usize) -> [bool; 3] {
        [
            self.is_targeted(vertex_index, Axis::X),
            self.is_targeted(vertex_index, Axis::Y),
            self.is_targeted(vertex_index, Axis::Z),
        ]
    }

    /// Number of coordinates this pattern targets in a frame of `n_vertices`.
    pub fn targeted_count(&self, n_vertices: usize) -> usize {
        self.strides
            .iter()
            .flatten()
            .map(|&k| n_vertices.div_ceil(k as usize))
            .sum()
    }

    pub fn canonical_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for axis in Axis::ALL {
            match self.stride(axis) {
                Some(1) => write!(f, "{axis}")?,
                Some(k) => write!(f, "{k}{axis}")?,
                None => {}
            }
        }
        Ok(())
    }
}

impl FromStr for Pattern {
    type Err = PatternError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        if text.is_empty() {
            return Err(PatternError::EmptyPattern);
        }
        let mut strides = [None; 3];
        let mut pending: Option<(u32, usize)> = None;
        let mut digits_start = None;
        for (offset, c) in text.char_indices() {
            if let Some(d) = c.to_digit(10) {
                let start = *digits_start.get_or_insert(offset);
                let current = pending.map_or(0, |(k, _)| k);
                let k = current
                    .checked_mul(10)
                    .and_then(|k| k.checked_add(d))
                    .ok_or(PatternError::StrideOverflow(start))?;
                pending = Some((k, start));
                continue;
            }
            let axis = Axis::from_char(c).ok_or(PatternError::UnknownSymbol { symbol: c, offset })?;
            let stride = match pending.take() {
                Some((0, _)) => return Err(PatternError::ZeroStride),
                Some((k, _)) => k,
                None => 1,
            };
            digits_start = None;
            if strides[axis.index()].replace(stride).is_some() {
                return Err(PatternError::DuplicateAxis(axis));
            }
        }
        if let Some((_, start)) = pending {
            return Err(PatternError::MissingAxis(start));
        }
        Pattern::new(strides)
    }
}

/// What an encrypted frame protects: chosen coordinates, or the whole file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Full,
    Selective(Pattern),
}

impl Granularity {
    pub const FULL_TEXT: &'static str = "FULL";
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Full => f.write_str(Self::FULL_TEXT),
            Granularity::Selective(p) => p.fmt(f),
        }
    }
}

impl FromStr for Granularity {
    type Err = PatternError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        if text == Self::FULL_TEXT {
            Ok(Granularity::Full)
        } else {
            text.parse().map(Granularity::Selective)
        }
    }
}

/// Parses a pattern string, including the whole-file `FULL` mode.
pub fn parse_pattern(text: &str) -> Result<Granularity, PatternError> {
    text.parse()
}
