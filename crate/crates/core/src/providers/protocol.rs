//! Model-server wire protocol over a child's stdin/stdout.
//!
//! A frame is `u32 length | u8 type | payload`, where `length` counts the
//! type byte plus the payload. All integers and floats are little-endian.
//! Responses carry the request's type, or [`MsgType::Error`] with a UTF-8
//! message.
//!
//! | type | request                         | response                                    |
//! |------|---------------------------------|---------------------------------------------|
//! | 0    | HELLO (empty)                   | [`Hello`]                                   |
//! | 1    | ENCODE_TOKENS `u32 n, u32[n]`   | `f32[n·d_C]` hidden, then `f32[|V|]` logits |
//! | 2    | ENCODE_IMAGE `u64 len, f32[..]` | `f32[pooled]`                               |
//! | 3    | EMBED_TEXT `u32 len, utf8`      | `f32[pooled]`                               |
//! | 4    | DETOKENIZE `u32 n, u32[n]`      | utf8                                        |
//! | 5    | TOKENIZE `u32 len, utf8`        | `u32 n, u32[n]`                             |
//! | 255  | ERROR utf8                      |                                             |
//!
//! HELLO must be the first exchange.

use std::io::{self, Read, Write};

use serde_json::Value;

use super::{ProviderDims, ProviderError};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest frame either side accepts unless configured otherwise.
pub const DEFAULT_MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    EncodeTokens = 1,
    EncodeImage = 2,
    EmbedText = 3,
    Detokenize = 4,
    Tokenize = 5,
    Error = 255,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => MsgType::Hello,
            1 => MsgType::EncodeTokens,
            2 => MsgType::EncodeImage,
            3 => MsgType::EmbedText,
            4 => MsgType::Detokenize,
            5 => MsgType::Tokenize,
            255 => MsgType::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType, payload: Vec<u8>) -> Self {
        Self {
            kind: kind as u8,
            payload,
        }
    }

    pub fn error(message: &str) -> Self {
        Self::new(MsgType::Error, message.as_bytes().to_vec())
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let len = u32::try_from(frame.payload.len() + 1)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[frame.kind])?;
    w.write_all(&frame.payload)?;
    w.flush()
}

#[derive(Debug)]
pub enum FrameError {
    /// Clean end of stream before a new frame.
    Eof,
    Io(io::Error),
    BadLength(u32),
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Eof => write!(f, "end of stream"),
            FrameError::Io(e) => write!(f, "{e}"),
            FrameError::BadLength(n) => write!(f, "invalid frame length {n}"),
        }
    }
}

pub fn read_frame(r: &mut impl Read, max_len: u32) -> Result<Frame, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Eof),
            Ok(0) => return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrameError::Io(e)),
        }
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > max_len {
        return Err(FrameError::BadLength(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(FrameError::Io)?;
    let kind = body[0];
    body.remove(0);
    Ok(Frame { kind, payload: body })
}

/// HELLO response.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub version: u32,
    pub dims: ProviderDims,
    /// Free-form server description, e.g. which pooling it applies.
    pub metadata: Value,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.version.to_le_bytes());
        let d = &self.dims;
        for v in [d.n_p, d.d_i, d.d_c, d.vocab_size, d.pooled_dims] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.push(d.normalized as u8);
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(&meta);
        b
    }

    pub fn decode(p: &[u8]) -> Result<Self, ProviderError> {
        let mut c = Cursor::new(p);
        let version = c.u32()?;
        let mut next = || c.u64().map(|v| v as usize);
        let (n_p, d_i, d_c, vocab_size, pooled_dims) = (next()?, next()?, next()?, next()?, next()?);
        let normalized = c.u8()? != 0;
        let n = c.u32()? as usize;
        let meta = c.bytes(n)?;
        c.finish()?;
        let metadata = serde_json::from_slice(meta).map_err(|e| ProviderError::Protocol(format!("HELLO metadata: {e}")))?;
        Ok(Self {
            version,
            dims: ProviderDims {
                n_p,
                d_i,
                d_c,
                vocab_size,
                pooled_dims,
                normalized,
            },
            metadata,
        })
    }
}

/// Bounds-checked little-endian reader over a payload.
pub struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ProviderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            ProviderError::Protocol(format!(
                "payload too short: need {n} bytes at {}, have {}",
                self.pos,
                self.data.len()
            ))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, ProviderError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ProviderError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ProviderError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>, ProviderError> {
        let b = self.bytes(n.checked_mul(4).ok_or_else(|| ProviderError::Protocol("count overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ProviderError> {
        let b = self.bytes(n.checked_mul(4).ok_or_else(|| ProviderError::Protocol("count overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn utf8(&mut self, n: usize) -> Result<&'a str, ProviderError> {
        std::str::from_utf8(self.bytes(n)?).map_err(|e| ProviderError::Protocol(format!("invalid UTF-8: {e}")))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.data[self.pos..];
        self.pos = self.data.len();
        s
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    /// Errors if bytes are left over.
    pub fn finish(&self) -> Result<(), ProviderError> {
        if self.remaining() != 0 {
            return Err(ProviderError::Protocol(format!("{} trailing payload bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn encode_ids(ids: &[u32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + 4 * ids.len());
    b.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        b.extend_from_slice(&id.to_le_bytes());
    }
    b
}

pub fn decode_ids(p: &[u8]) -> Result<Vec<u32>, ProviderError> {
    let mut c = Cursor::new(p);
    let n = c.u32()? as usize;
    let ids = c.u32s(n)?;
    c.finish()?;
    Ok(ids)
}

pub fn encode_text(text: &str) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + text.len());
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    b
}

pub fn decode_text(p: &[u8]) -> Result<String, ProviderError> {
    let mut c = Cursor::new(p);
    let n = c.u32()? as usize;
    let s = c.utf8(n)?.to_string();
    c.finish()?;
    Ok(s)
}

pub fn encode_image(data: &[f32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + 4 * data.len());
    b.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    b.extend(data.iter().flat_map(|x| x.to_le_bytes()));
    b
}

pub fn decode_image(p: &[u8]) -> Result<Vec<f32>, ProviderError> {
    let mut c = Cursor::new(p);
    let n = c.u64()? as usize;
    if n % 4 != 0 {
        return Err(ProviderError::Protocol(format!("image byte length {n} is not a multiple of 4")));
    }
    let v = c.f32s(n / 4)?;
    c.finish()?;
    Ok(v)
}

pub fn encode_f32s(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Decodes a bare `f32` array of exactly `n` values.
pub fn decode_f32s(p: &[u8], n: usize) -> Result<Vec<f32>, ProviderError> {
    let mut c = Cursor::new(p);
    let v = c.f32s(n)?;
    c.finish()?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(MsgType::Tokenize, encode_text("new car"));
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(&buf[0..4], &(1 + 4 + 7u32).to_le_bytes());
        assert_eq!(buf[4], 5);
        let back = read_frame(&mut buf.as_slice(), DEFAULT_MAX_FRAME).unwrap();
        assert_eq!(back, f);
        assert_eq!(decode_text(&back.payload).unwrap(), "new car");
    }

    #[test]
    fn frame_errors() {
        assert!(matches!(read_frame(&mut &[][..], 100), Err(FrameError::Eof)));
        let big = 1000u32.to_le_bytes();
        assert!(matches!(read_frame(&mut &big[..], 100), Err(FrameError::BadLength(1000))));
        let zero = 0u32.to_le_bytes();
        assert!(matches!(read_frame(&mut &zero[..], 100), Err(FrameError::BadLength(0))));
        let short = [5u8, 0, 0, 0, 1, 2];
        assert!(matches!(read_frame(&mut &short[..], 100), Err(FrameError::Io(_))));
    }

    #[test]
    fn hello_round_trip() {
        let h = Hello {
            version: PROTOCOL_VERSION,
            dims: ProviderDims {
                n_p: 1025,
                d_i: 2048,
                d_c: 2560,
                vocab_size: 151_936,
                pooled_dims: 1024,
                normalized: true,
            },
            metadata: serde_json::json!({"pooling": "mean"}),
        };
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
        let mut bad = h.encode();
        bad.push(0);
        assert!(Hello::decode(&bad).is_err());
    }

    #[test]
    fn payload_codecs() {
        assert_eq!(decode_ids(&encode_ids(&[1, 2, 300])).unwrap(), vec![1, 2, 300]);
        let img = [1.5f32, -0.0, f32::MIN_POSITIVE];
        let back = decode_image(&encode_image(&img)).unwrap();
        assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), img.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(decode_ids(&[3, 0, 0, 0, 1]).is_err());
        assert!(decode_f32s(&[0; 8], 3).is_err());
    }
}
