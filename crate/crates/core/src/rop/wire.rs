//! Frame codec.
//!
//! A frame is `u32 payload_len | u8 message_tag | fields`, big-endian.
//! Strings and byte blobs carry a u32 length prefix. Only the seven value
//! tags below exist; there is no encoding for object graphs, so nothing
//! decoded from the wire can ever name code to load.

use std::fmt;
use std::io::{self, Read};

use crate::codec::{ByteReader, ByteWriter, Truncated};

pub const DEFAULT_MAX_FRAME: usize = 1 << 20;

pub const MSG_BIND: u8 = 1;
pub const MSG_BIND_ACK: u8 = 2;
pub const MSG_LOOKUP: u8 = 3;
pub const MSG_LOOKUP_RESULT: u8 = 4;
pub const MSG_INVOKE: u8 = 5;
pub const MSG_RESULT: u8 = 6;
pub const MSG_FAULT: u8 = 7;

pub const VAL_NULL: u8 = 0;
pub const VAL_I32: u8 = 1;
pub const VAL_F64: u8 = 2;
pub const VAL_BOOL: u8 = 3;
pub const VAL_STR: u8 = 4;
pub const VAL_BYTES: u8 = 5;
pub const VAL_REMOTE: u8 = 6;

/// Reference to an exported object on some endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RemoteRef {
    pub endpoint: String,
    pub object_id: u64,
    pub interface: String,
}

impl fmt::Display for RemoteRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}#{}", self.interface, self.endpoint, self.object_id)
    }
}

#[derive(Debug, Clone)]
pub enum WireValue {
    Null,
    I32(i32),
    F64(f64),
    Bool(bool),
    Str(String),
    Bytes(Vec<u8>),
    Remote(RemoteRef),
}

impl PartialEq for WireValue {
    fn eq(&self, other: &Self) -> bool {
        use WireValue::*;
        match (self, other) {
            (Null, Null) => true,
            (I32(a), I32(b)) => a == b,
            (F64(a), F64(b)) => a.to_bits() == b.to_bits(),
            (Bool(a), Bool(b)) => a == b,
            (Str(a), Str(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (Remote(a), Remote(b)) => a == b,
            _ => false,
        }
    }
}

impl WireValue {
    pub fn tag(&self) -> u8 {
        match self {
            WireValue::Null => VAL_NULL,
            WireValue::I32(_) => VAL_I32,
            WireValue::F64(_) => VAL_F64,
            WireValue::Bool(_) => VAL_BOOL,
            WireValue::Str(_) => VAL_STR,
            WireValue::Bytes(_) => VAL_BYTES,
            WireValue::Remote(_) => VAL_REMOTE,
        }
    }

    pub fn as_i32(&self) -> Option<i32> {
        match self {
            WireValue::I32(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            WireValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_remote(&self) -> Option<&RemoteRef> {
        match self {
            WireValue::Remote(r) => Some(r),
            _ => None,
        }
    }
}

/// Fault codes carried by `Fault` messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultCode {
    NoSuchObject,
    NoSuchMethod,
    BadArguments,
    DepthExceeded,
    BudgetExceeded,
    NoSuchObjectIndex,
    NoSuchContext,
    FetchFailed,
    UnsupportedImageFormat,
    UnknownKind,
    UnknownSurface,
    PolicyDenied,
    AppletFault,
    UnserializableValue,
    Internal,
    Other(u16),
}

impl FaultCode {
    const TABLE: [(FaultCode, u16, &'static str); 15] = [
        (FaultCode::NoSuchObject, 1, "NO_SUCH_OBJECT"),
        (FaultCode::NoSuchMethod, 2, "NO_SUCH_METHOD"),
        (FaultCode::BadArguments, 3, "BAD_ARGUMENTS"),
        (FaultCode::DepthExceeded, 4, "DEPTH_EXCEEDED"),
        (FaultCode::BudgetExceeded, 5, "BUDGET_EXCEEDED"),
        (FaultCode::NoSuchObjectIndex, 6, "NO_SUCH_OBJECT_INDEX"),
        (FaultCode::NoSuchContext, 7, "NO_SUCH_CONTEXT"),
        (FaultCode::FetchFailed, 8, "FETCH_FAILED"),
        (FaultCode::UnsupportedImageFormat, 9, "UNSUPPORTED_IMAGE_FORMAT"),
        (FaultCode::UnknownKind, 10, "UNKNOWN_KIND"),
        (FaultCode::UnknownSurface, 11, "UNKNOWN_SURFACE"),
        (FaultCode::PolicyDenied, 12, "POLICY_DENIED"),
        (FaultCode::AppletFault, 13, "APPLET_FAULT"),
        (FaultCode::UnserializableValue, 14, "UNSERIALIZABLE_VALUE"),
        (FaultCode::Internal, 15, "INTERNAL"),
    ];

    pub fn to_u16(self) -> u16 {
        match self {
            FaultCode::Other(n) => n,
            c => Self::TABLE
                .iter()
                .find(|(k, _, _)| *k == c)
                .map(|(_, n, _)| *n)
                .unwrap(),
        }
    }

    pub fn from_u16(n: u16) -> FaultCode {
        Self::TABLE
            .iter()
            .find(|(_, v, _)| *v == n)
            .map(|(k, _, _)| *k)
            .unwrap_or(FaultCode::Other(n))
    }

    pub fn name(self) -> String {
        match self {
            FaultCode::Other(n) => format!("FAULT_{n}"),
            c => Self::TABLE.iter().find(|(k, _, _)| *k == c).unwrap().2.to_string(),
        }
    }

    pub fn from_name(s: &str) -> Option<FaultCode> {
        Self::TABLE.iter().find(|(_, _, n)| *n == s).map(|(k, _, _)| *k)
    }
}

impl fmt::Display for FaultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Bind {
        address: String,
        target: RemoteRef,
    },
    BindAck,
    Lookup {
        address: String,
    },
    LookupResult(Option<RemoteRef>),
    Invoke {
        call_id: u64,
        target: u64,
        method: String,
        args: Vec<WireValue>,
    },
    Result {
        call_id: u64,
        value: WireValue,
    },
    Fault {
        call_id: u64,
        code: FaultCode,
        detail: String,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Bind { .. } => MSG_BIND,
            Message::BindAck => MSG_BIND_ACK,
            Message::Lookup { .. } => MSG_LOOKUP,
            Message::LookupResult(_) => MSG_LOOKUP_RESULT,
            Message::Invoke { .. } => MSG_INVOKE,
            Message::Result { .. } => MSG_RESULT,
            Message::Fault { .. } => MSG_FAULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("frame of {len} bytes exceeds limit {max}")]
    OversizeFrame { len: usize, max: usize },
    #[error("unserializable value tag {0}")]
    UnserializableValue(u8),
    #[error("invalid UTF-8 string")]
    InvalidUtf8,
    #[error("bad flag byte {0}")]
    BadFlag(u8),
    #[error("{0} trailing bytes in frame")]
    TrailingBytes(usize),
}

impl From<Truncated> for WireError {
    fn from(_: Truncated) -> Self {
        WireError::TruncatedFrame
    }
}

fn put_str(w: &mut ByteWriter, s: &str) {
    w.blob32(s.as_bytes());
}

fn put_ref(w: &mut ByteWriter, r: &RemoteRef) {
    put_str(w, &r.endpoint);
    w.u64(r.object_id);
    put_str(w, &r.interface);
}

fn put_value(w: &mut ByteWriter, v: &WireValue) {
    w.u8(v.tag());
    match v {
        WireValue::Null => {}
        WireValue::I32(i) => {
            w.i32(*i);
        }
        WireValue::F64(f) => {
            w.f64(*f);
        }
        WireValue::Bool(b) => {
            w.u8(*b as u8);
        }
        WireValue::Str(s) => put_str(w, s),
        WireValue::Bytes(b) => {
            w.blob32(b);
        }
        WireValue::Remote(r) => put_ref(w, r),
    }
}

/// Encode a message as one complete frame.
pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(m.tag());
    match m {
        Message::Bind { address, target } => {
            put_str(&mut w, address);
            put_ref(&mut w, target);
        }
        Message::BindAck => {}
        Message::Lookup { address } => put_str(&mut w, address),
        Message::LookupResult(r) => match r {
            None => {
                w.u8(0);
            }
            Some(r) => {
                w.u8(1);
                put_ref(&mut w, r);
            }
        },
        Message::Invoke {
            call_id,
            target,
            method,
            args,
        } => {
            w.u64(*call_id).u64(*target);
            put_str(&mut w, method);
            w.u32(args.len() as u32);
            for a in args {
                put_value(&mut w, a);
            }
        }
        Message::Result { call_id, value } => {
            w.u64(*call_id);
            put_value(&mut w, value);
        }
        Message::Fault { call_id, code, detail } => {
            w.u64(*call_id).u16(code.to_u16());
            put_str(&mut w, detail);
        }
    }
    let payload = w.into_inner();
    let mut frame = Vec::with_capacity(payload.len() + 4);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn get_str(r: &mut ByteReader<'_>) -> Result<String, WireError> {
    let n = r.u32()? as usize;
    let raw = r.take(n)?;
    String::from_utf8(raw.to_vec()).map_err(|_| WireError::InvalidUtf8)
}

fn get_ref(r: &mut ByteReader<'_>) -> Result<RemoteRef, WireError> {
    Ok(RemoteRef {
        endpoint: get_str(r)?,
        object_id: r.u64()?,
        interface: get_str(r)?,
    })
}

fn get_bool(r: &mut ByteReader<'_>) -> Result<bool, WireError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(WireError::BadFlag(b)),
    }
}

fn get_value(r: &mut ByteReader<'_>) -> Result<WireValue, WireError> {
    Ok(match r.u8()? {
        VAL_NULL => WireValue::Null,
        VAL_I32 => WireValue::I32(r.i32()?),
        VAL_F64 => WireValue::F64(r.f64()?),
        VAL_BOOL => WireValue::Bool(get_bool(r)?),
        VAL_STR => WireValue::Str(get_str(r)?),
        VAL_BYTES => {
            let n = r.u32()? as usize;
            WireValue::Bytes(r.take(n)?.to_vec())
        }
        VAL_REMOTE => WireValue::Remote(get_ref(r)?),
        other => return Err(WireError::UnserializableValue(other)),
    })
}

/// Decode a frame payload (everything after the length prefix).
pub fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let mut r = ByteReader::new(payload);
    let m = match r.u8()? {
        MSG_BIND => Message::Bind {
            address: get_str(&mut r)?,
            target: get_ref(&mut r)?,
        },
        MSG_BIND_ACK => Message::BindAck,
        MSG_LOOKUP => Message::Lookup {
            address: get_str(&mut r)?,
        },
        MSG_LOOKUP_RESULT => match r.u8()? {
            0 => Message::LookupResult(None),
            1 => Message::LookupResult(Some(get_ref(&mut r)?)),
            b => return Err(WireError::BadFlag(b)),
        },
        MSG_INVOKE => {
            let call_id = r.u64()?;
            let target = r.u64()?;
            let method = get_str(&mut r)?;
            let argc = r.u32()? as usize;
            // every value needs at least its tag byte
            if argc > r.remaining() {
                return Err(WireError::TruncatedFrame);
            }
            let mut args = Vec::with_capacity(argc);
            for _ in 0..argc {
                args.push(get_value(&mut r)?);
            }
            Message::Invoke {
                call_id,
                target,
                method,
                args,
            }
        }
        MSG_RESULT => Message::Result {
            call_id: r.u64()?,
            value: get_value(&mut r)?,
        },
        MSG_FAULT => Message::Fault {
            call_id: r.u64()?,
            code: FaultCode::from_u16(r.u16()?),
            detail: get_str(&mut r)?,
        },
        other => return Err(WireError::UnknownTag(other)),
    };
    if !r.is_empty() {
        return Err(WireError::TrailingBytes(r.remaining()));
    }
    Ok(m)
}

/// Decode one complete frame with the default size limit.
pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    decode_message_with_limit(bytes, DEFAULT_MAX_FRAME)
}

pub fn decode_message_with_limit(bytes: &[u8], max: usize) -> Result<Message, WireError> {
    let mut r = ByteReader::new(bytes);
    let len = r.u32()? as usize;
    if len > max {
        return Err(WireError::OversizeFrame { len, max });
    }
    let payload = r.take(len)?;
    if !r.is_empty() {
        return Err(WireError::TrailingBytes(r.remaining()));
    }
    decode_payload(payload)
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum ReadFrame {
    Message(Message),
    /// Stream ended cleanly between frames.
    Eof,
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Read the raw bytes of one frame (prefix included).
pub fn read_raw_frame(r: &mut impl Read, max: usize) -> Result<Option<Vec<u8>>, StreamError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::TruncatedFrame.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > max {
        return Err(WireError::OversizeFrame { len, max }.into());
    }
    let mut frame = vec![0u8; len + 4];
    frame[..4].copy_from_slice(&len_buf);
    r.read_exact(&mut frame[4..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StreamError::Wire(WireError::TruncatedFrame)
        } else {
            StreamError::Io(e)
        }
    })?;
    Ok(Some(frame))
}

pub fn read_frame(r: &mut impl Read, max: usize) -> Result<ReadFrame, StreamError> {
    match read_raw_frame(r, max)? {
        None => Ok(ReadFrame::Eof),
        Some(frame) => Ok(ReadFrame::Message(decode_payload(&frame[4..])?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invoke_round_trips() {
        let m = Message::Invoke {
            call_id: 1,
            target: 0,
            method: "constructButton".into(),
            args: vec![WireValue::Str("ok".into())],
        };
        assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }

    #[test]
    fn result_encoding_is_stable() {
        let m = Message::Result {
            call_id: 7,
            value: WireValue::I32(5),
        };
        let a = encode_message(&m);
        assert_eq!(a, encode_message(&m));
        assert_eq!(a, vec![0, 0, 0, 14, 6, 0, 0, 0, 0, 0, 0, 0, 7, 1, 0, 0, 0, 5]);
    }

    #[test]
    fn unknown_value_tag_is_unserializable() {
        let mut frame = encode_message(&Message::Result {
            call_id: 1,
            value: WireValue::Null,
        });
        let n = frame.len();
        frame[n - 1] = 9;
        assert_eq!(decode_message(&frame).unwrap_err(), WireError::UnserializableValue(9));
    }

    #[test]
    fn unknown_message_tag() {
        assert_eq!(
            decode_message(&[0, 0, 0, 1, 42]).unwrap_err(),
            WireError::UnknownTag(42)
        );
    }

    #[test]
    fn oversize_is_rejected_before_reading() {
        assert!(matches!(
            decode_message(&[0x7f, 0, 0, 0]).unwrap_err(),
            WireError::OversizeFrame { .. }
        ));
    }

    #[test]
    fn truncated() {
        let frame = encode_message(&Message::Lookup { address: "pg-x".into() });
        for n in 0..frame.len() {
            assert!(decode_message(&frame[..n]).is_err());
        }
    }

    #[test]
    fn fault_codes_round_trip() {
        for n in 0..40u16 {
            assert_eq!(FaultCode::from_u16(n).to_u16(), n);
        }
        assert_eq!(FaultCode::from_name("NO_SUCH_OBJECT"), Some(FaultCode::NoSuchObject));
    }

    #[test]
    fn huge_argc_does_not_allocate() {
        let mut w = ByteWriter::new();
        w.u8(MSG_INVOKE).u64(1).u64(2).blob32(b"m").u32(u32::MAX);
        let payload = w.into_inner();
        assert_eq!(decode_payload(&payload).unwrap_err(), WireError::TruncatedFrame);
    }
}
