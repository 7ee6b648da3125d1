//! Little-endian cursor helpers shared by the binary formats.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if n > self.remaining() {
            return Err(WireError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<(), WireError> {
        if &self.array::<4>()? != magic {
            return Err(WireError::BadMagic);
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<(), WireError> {
        match self.u16()? {
            v if v == expected => Ok(()),
            v => Err(WireError::BadVersion(v)),
        }
    }

    /// UTF-8 string behind a u8 length prefix.
    pub fn str8(&mut self) -> Result<&'a str, WireError> {
        let n = self.u8()? as usize;
        std::str::from_utf8(self.bytes(n)?).map_err(|_| WireError::Invalid("utf-8"))
    }

    pub fn str16(&mut self) -> Result<&'a str, WireError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.bytes(n)?).map_err(|_| WireError::Invalid("utf-8"))
    }

    pub fn finish(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::Invalid("trailing bytes"))
        }
    }
}

/// Appends `s` with a u8 length prefix. Panics if longer than 255 bytes.
pub fn put_str8(out: &mut Vec<u8>, s: &str) {
    out.push(u8::try_from(s.len()).expect("string too long for u8 prefix"));
    out.extend_from_slice(s.as_bytes());
}

pub fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&u16::try_from(s.len()).expect("string too long").to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
