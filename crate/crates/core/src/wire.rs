//! Length-prefixed binary framing shared by the control and relay channels.
//!
//! Layout: `u32` big-endian length of the rest, `u8` version, `u8` message
//! type, then the payload.

use std::io::{Read, Write};

pub const VERSION: u8 = 1;
/// Frames above this size are refused before any allocation.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub version: u8,
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("incomplete frame")]
    Incomplete,
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { version: VERSION, msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = 2 + self.payload.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(self.version);
        out.push(self.msg_type);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it with the
    /// number of bytes used.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), WireError> {
        if buf.len() < 4 {
            return Err(WireError::Incomplete);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        if len < 2 {
            return Err(WireError::Malformed("frame shorter than its header".into()));
        }
        if buf.len() < 4 + len {
            return Err(WireError::Incomplete);
        }
        let version = buf[4];
        if version != VERSION {
            return Err(WireError::BadVersion(version));
        }
        Ok((Frame { version, msg_type: buf[5], payload: buf[6..4 + len].to_vec() }, 4 + len))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Frame> {
        let mut head = [0u8; 4];
        r.read_exact(&mut head)?;
        let len = u32::from_be_bytes(head) as usize;
        if !(2..=MAX_FRAME).contains(&len) {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, WireError::TooLarge(len)));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        let mut buf = head.to_vec();
        buf.extend_from_slice(&body);
        Frame::decode(&buf).map(|(f, _)| f).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Cursor over a payload with length-prefixed fields.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed("truncated field".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn str16(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn bytes32(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

pub(crate) fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_bytes32(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}
