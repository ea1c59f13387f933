//! Frame layout.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDFS"
//! 4       1     version (1)
//! 5       1     message type
//! 6       4     body length, u32 LE
//! 10      n     body
//! ```
//!
//! Bodies:
//!
//! ```text
//! 0x01 HELLO      server_id u64 | branch_id u8
//! 0x02 INFER_REQ  request_id u64 | policy_id u32 | branch_id u8 | tensor
//! 0x03 INFER_RESP request_id u64 | len u32 | len x f32
//! 0x7F ERR        code u16 | utf-8 message
//! ```
//!
//! All integers and floats are little-endian. `tensor` is `ndims u8 (=3)`,
//! three `u32` dims, then the values as `f32`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::{FeatureMap, TensorFault};

pub const MAGIC: [u8; 4] = *b"PDFS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_INFER_REQ: u8 = 0x02;
pub const MSG_INFER_RESP: u8 = 0x03;
pub const MSG_ERR: u8 = 0x7F;

/// Default cap on tensor values in one request (64 Ki floats).
pub const DEFAULT_MAX_VALUES: usize = 1 << 16;

/// Decoding and protocol failures. Each has a stable code carried in ERR
/// frames.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated body")]
    Truncated,
    #[error("payload exceeds the configured maximum")]
    Oversize,
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("request for branch {requested} sent to branch {served}")]
    WrongBranch { requested: u8, served: u8 },
    #[error("unexpected message type 0x{0:02x}")]
    Unexpected(u8),
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("server failed to process the request: {0}")]
    Internal(String),
}

impl WireError {
    pub fn code(&self) -> u16 {
        match self {
            WireError::BadMagic => 1,
            WireError::UnsupportedVersion(_) => 2,
            WireError::UnknownType(_) => 3,
            WireError::Truncated => 4,
            WireError::Oversize => 5,
            WireError::Malformed(_) => 6,
            WireError::WrongBranch { .. } => 7,
            WireError::Unexpected(_) => 8,
            WireError::Internal(_) => 9,
            WireError::Remote { code, .. } => *code,
        }
    }
}

impl From<TensorFault> for WireError {
    fn from(f: TensorFault) -> Self {
        match f {
            TensorFault::Truncated => WireError::Truncated,
            TensorFault::Oversize => WireError::Oversize,
            TensorFault::Rank(r) => WireError::Malformed(format!("tensor rank {r}, expected 3")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { server_id: u64, branch_id: u8 },
    InferReq { request_id: u64, policy_id: u32, branch_id: u8, tensor: FeatureMap },
    InferResp { request_id: u64, embedding: Vec<f32> },
    Err { code: u16, message: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => MSG_HELLO,
            Message::InferReq { .. } => MSG_INFER_REQ,
            Message::InferResp { .. } => MSG_INFER_RESP,
            Message::Err { .. } => MSG_ERR,
        }
    }

    pub fn error(e: &WireError) -> Self {
        Message::Err { code: e.code(), message: e.to_string() }
    }

    fn body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            Message::Hello { server_id, branch_id } => {
                b.extend_from_slice(&server_id.to_le_bytes());
                b.push(*branch_id);
            }
            Message::InferReq { request_id, policy_id, branch_id, tensor } => {
                b.extend_from_slice(&request_id.to_le_bytes());
                b.extend_from_slice(&policy_id.to_le_bytes());
                b.push(*branch_id);
                tensor.encode_f32(&mut b);
            }
            Message::InferResp { request_id, embedding } => {
                b.extend_from_slice(&request_id.to_le_bytes());
                b.extend_from_slice(&(embedding.len() as u32).to_le_bytes());
                for v in embedding {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Err { code, message } => {
                b.extend_from_slice(&code.to_le_bytes());
                b.extend_from_slice(message.as_bytes());
            }
        }
        b
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let body = msg.body();
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: u8,
    pub body_len: usize,
}

/// Validates a 10-byte header. `max_body` bounds the declared body length.
pub fn decode_header(bytes: &[u8], max_body: usize) -> Result<Header, WireError> {
    let n = bytes.len().min(4);
    if bytes[..n] != MAGIC[..n] {
        return Err(WireError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    let msg_type = bytes[5];
    if !matches!(msg_type, MSG_HELLO | MSG_INFER_REQ | MSG_INFER_RESP | MSG_ERR) {
        return Err(WireError::UnknownType(msg_type));
    }
    let body_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if body_len > max_body {
        return Err(WireError::Oversize);
    }
    Ok(Header { msg_type, body_len })
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(WireError::Truncated)?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.b[self.pos..];
        self.pos = self.b.len();
        s
    }
}

/// Decodes a body of the given type. `max_values` bounds tensor and
/// embedding lengths.
pub fn decode_body(msg_type: u8, body: &[u8], max_values: usize) -> Result<Message, WireError> {
    let mut c = Cursor { b: body, pos: 0 };
    let msg = match msg_type {
        MSG_HELLO => Message::Hello { server_id: c.u64()?, branch_id: c.u8()? },
        MSG_INFER_REQ => {
            let request_id = c.u64()?;
            let policy_id = c.u32()?;
            let branch_id = c.u8()?;
            let (tensor, used) = FeatureMap::decode_f32(c.rest(), max_values)?;
            c.pos = 13 + used;
            Message::InferReq { request_id, policy_id, branch_id, tensor }
        }
        MSG_INFER_RESP => {
            let request_id = c.u64()?;
            let len = c.u32()? as usize;
            if len > max_values {
                return Err(WireError::Oversize);
            }
            let raw = c.take(len.checked_mul(4).ok_or(WireError::Oversize)?)?;
            let embedding = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Message::InferResp { request_id, embedding }
        }
        MSG_ERR => {
            let code = c.u16()?;
            let message = std::str::from_utf8(c.rest())
                .map_err(|_| WireError::Malformed("error message is not utf-8".into()))?
                .to_string();
            Message::Err { code, message }
        }
        other => return Err(WireError::UnknownType(other)),
    };
    if c.pos != body.len() {
        return Err(WireError::Malformed(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(msg)
}

/// Largest body that can carry `max_values` tensor entries.
pub fn max_body_for(max_values: usize) -> usize {
    13 + 13 + 4 * max_values
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8], max_values: usize) -> Result<Message, WireError> {
    let h = decode_header(bytes, max_body_for(max_values))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < h.body_len {
        return Err(WireError::Truncated);
    }
    if body.len() > h.body_len {
        return Err(WireError::Malformed("bytes after frame".into()));
    }
    decode_body(h.msg_type, body, max_values)
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum ReadError {
    /// The peer closed the stream cleanly before a new frame started.
    Closed,
    Io(std::io::Error),
    Wire(WireError),
}

impl From<WireError> for ReadError {
    fn from(e: WireError) -> Self {
        ReadError::Wire(e)
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize, std::io::Error> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

pub fn read_message(r: &mut impl Read, max_values: usize) -> Result<Message, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_full(r, &mut header).map_err(ReadError::Io)?;
    if got == 0 {
        return Err(ReadError::Closed);
    }
    let h = decode_header(&header[..got], max_body_for(max_values))?;
    let mut body = vec![0u8; h.body_len];
    if read_full(r, &mut body).map_err(ReadError::Io)? < h.body_len {
        return Err(WireError::Truncated.into());
    }
    Ok(decode_body(h.msg_type, &body, max_values)?)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    w.write_all(&encode_message(msg))?;
    w.flush()
}
