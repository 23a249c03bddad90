//! Control protocol spoken by the proxy to the playground.
//!
//! Frames reuse the rop framing (`u32 len | u8 tag | body`) with their own
//! tag space. Strings and blobs are u32-length-prefixed.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::codec::{ByteReader, ByteWriter, Truncated};
use crate::rop::wire::read_raw_frame;
use crate::stubs::{AppletReport, AppletStatus};

pub const TAG_LOAD_PAGE: u8 = 0x21;
pub const TAG_LOAD_ACK: u8 = 0x22;
pub const TAG_STATUS_QUERY: u8 = 0x23;
pub const TAG_STATUS: u8 = 0x24;
pub const TAG_ERROR: u8 = 0x2F;

/// Large enough for a page of bundles.
pub const MAX_CONTROL_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppletLoad {
    pub name: String,
    pub address: String,
    pub codebase: String,
    pub bundle: Vec<u8>,
    pub params: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadPage {
    pub page_id: String,
    /// Registry endpoint; empty means the playground's default.
    pub registry: String,
    pub applets: Vec<AppletLoad>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageStatus {
    pub page_id: String,
    pub vm_id: u32,
    pub applets: Vec<AppletReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    LoadPage(LoadPage),
    LoadAck { page_id: String, ok: bool, detail: String },
    StatusQuery { page_id: String },
    Status(Vec<PageStatus>),
    Error(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed control frame: {0}")]
    Malformed(String),
    #[error("playground error: {0}")]
    Remote(String),
}

impl From<Truncated> for ControlError {
    fn from(_: Truncated) -> Self {
        ControlError::Malformed("truncated".into())
    }
}

fn put_str(w: &mut ByteWriter, s: &str) {
    w.blob32(s.as_bytes());
}

fn get_str(r: &mut ByteReader<'_>) -> Result<String, ControlError> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| ControlError::Malformed("invalid utf-8".into()))
}

fn get_blob(r: &mut ByteReader<'_>) -> Result<Vec<u8>, ControlError> {
    let n = r.u32()? as usize;
    Ok(r.take(n)?.to_vec())
}

pub fn encode(m: &ControlMessage) -> Vec<u8> {
    let mut w = ByteWriter::new();
    match m {
        ControlMessage::LoadPage(p) => {
            w.u8(TAG_LOAD_PAGE);
            put_str(&mut w, &p.page_id);
            put_str(&mut w, &p.registry);
            w.u16(p.applets.len() as u16);
            for a in &p.applets {
                put_str(&mut w, &a.name);
                put_str(&mut w, &a.address);
                put_str(&mut w, &a.codebase);
                w.blob32(&a.bundle);
                w.u16(a.params.len() as u16);
                for (k, v) in &a.params {
                    put_str(&mut w, k);
                    put_str(&mut w, v);
                }
            }
        }
        ControlMessage::LoadAck { page_id, ok, detail } => {
            w.u8(TAG_LOAD_ACK);
            put_str(&mut w, page_id);
            w.u8(*ok as u8);
            put_str(&mut w, detail);
        }
        ControlMessage::StatusQuery { page_id } => {
            w.u8(TAG_STATUS_QUERY);
            put_str(&mut w, page_id);
        }
        ControlMessage::Status(pages) => {
            w.u8(TAG_STATUS);
            w.u16(pages.len() as u16);
            for p in pages {
                put_str(&mut w, &p.page_id);
                w.u32(p.vm_id);
                w.u16(p.applets.len() as u16);
                for a in &p.applets {
                    put_str(&mut w, &a.name);
                    put_str(&mut w, &a.address);
                    put_str(&mut w, a.status.name());
                    put_str(&mut w, &a.detail);
                }
            }
        }
        ControlMessage::Error(e) => {
            w.u8(TAG_ERROR);
            put_str(&mut w, e);
        }
    }
    let body = w.into_inner();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decode one frame, length prefix included.
pub fn decode(frame: &[u8]) -> Result<ControlMessage, ControlError> {
    let mut r = ByteReader::new(frame);
    let len = r.u32()? as usize;
    if len != r.remaining() {
        return Err(ControlError::Malformed("length prefix mismatch".into()));
    }
    let m = match r.u8()? {
        TAG_LOAD_PAGE => {
            let page_id = get_str(&mut r)?;
            let registry = get_str(&mut r)?;
            let n = r.u16()?;
            let mut applets = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let name = get_str(&mut r)?;
                let address = get_str(&mut r)?;
                let codebase = get_str(&mut r)?;
                let bundle = get_blob(&mut r)?;
                let np = r.u16()?;
                let mut params = Vec::new();
                for _ in 0..np {
                    params.push((get_str(&mut r)?, get_str(&mut r)?));
                }
                applets.push(AppletLoad {
                    name,
                    address,
                    codebase,
                    bundle,
                    params,
                });
            }
            ControlMessage::LoadPage(LoadPage {
                page_id,
                registry,
                applets,
            })
        }
        TAG_LOAD_ACK => ControlMessage::LoadAck {
            page_id: get_str(&mut r)?,
            ok: r.u8()? != 0,
            detail: get_str(&mut r)?,
        },
        TAG_STATUS_QUERY => ControlMessage::StatusQuery {
            page_id: get_str(&mut r)?,
        },
        TAG_STATUS => {
            let n = r.u16()?;
            let mut pages = Vec::new();
            for _ in 0..n {
                let page_id = get_str(&mut r)?;
                let vm_id = r.u32()?;
                let na = r.u16()?;
                let mut applets = Vec::new();
                for _ in 0..na {
                    let name = get_str(&mut r)?;
                    let address = get_str(&mut r)?;
                    let status: AppletStatus = get_str(&mut r)?.parse().map_err(ControlError::Malformed)?;
                    let detail = get_str(&mut r)?;
                    applets.push(AppletReport {
                        name,
                        address,
                        status,
                        detail,
                    });
                }
                pages.push(PageStatus {
                    page_id,
                    vm_id,
                    applets,
                });
            }
            ControlMessage::Status(pages)
        }
        TAG_ERROR => ControlMessage::Error(get_str(&mut r)?),
        t => return Err(ControlError::Malformed(format!("unknown tag {t:#04x}"))),
    };
    if !r.is_empty() {
        return Err(ControlError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(m)
}

pub fn write_message(w: &mut impl Write, m: &ControlMessage) -> io::Result<()> {
    w.write_all(&encode(m))?;
    w.flush()
}

pub fn read_message(r: &mut impl Read) -> Result<Option<ControlMessage>, ControlError> {
    match read_raw_frame(r, MAX_CONTROL_FRAME) {
        Ok(Some(f)) => decode(&f).map(Some),
        Ok(None) => Ok(None),
        Err(e) => Err(ControlError::Malformed(e.to_string())),
    }
}

fn roundtrip(addr: &str, m: &ControlMessage) -> Result<ControlMessage, ControlError> {
    let mut s = TcpStream::connect(addr)?;
    s.set_read_timeout(Some(Duration::from_secs(30)))?;
    write_message(&mut s, m)?;
    match read_message(&mut s)? {
        Some(ControlMessage::Error(e)) => Err(ControlError::Remote(e)),
        Some(m) => Ok(m),
        None => Err(ControlError::Malformed("connection closed before reply".into())),
    }
}

/// Post a load page; returns the playground's acknowledgement detail.
pub fn send_load(addr: &str, page: &LoadPage) -> Result<String, ControlError> {
    match roundtrip(addr, &ControlMessage::LoadPage(page.clone()))? {
        ControlMessage::LoadAck { ok: true, detail, .. } => Ok(detail),
        ControlMessage::LoadAck { detail, .. } => Err(ControlError::Remote(detail)),
        other => Err(ControlError::Malformed(format!("unexpected reply {other:?}"))),
    }
}

/// Status of one page, or of all pages when `page_id` is empty.
pub fn query_status(addr: &str, page_id: &str) -> Result<Vec<PageStatus>, ControlError> {
    let q = ControlMessage::StatusQuery {
        page_id: page_id.to_string(),
    };
    match roundtrip(addr, &q)? {
        ControlMessage::Status(p) => Ok(p),
        other => Err(ControlError::Malformed(format!("unexpected reply {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let msgs = vec![
            ControlMessage::LoadPage(LoadPage {
                page_id: "p1".into(),
                registry: "127.0.0.1:1".into(),
                applets: vec![AppletLoad {
                    name: "Click".into(),
                    address: "pg-00".into(),
                    codebase: "http://o/".into(),
                    bundle: vec![1, 2, 3],
                    params: vec![("ContactAddress".into(), "pg-00".into())],
                }],
            }),
            ControlMessage::LoadAck {
                page_id: "p1".into(),
                ok: true,
                detail: "1 applet".into(),
            },
            ControlMessage::StatusQuery { page_id: String::new() },
            ControlMessage::Status(vec![PageStatus {
                page_id: "p1".into(),
                vm_id: 3,
                applets: vec![AppletReport {
                    name: "Click".into(),
                    address: "pg-00".into(),
                    status: AppletStatus::Running,
                    detail: String::new(),
                }],
            }]),
            ControlMessage::Error("boom".into()),
        ];
        for m in msgs {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(&[0, 0, 0, 1, 0x99]).is_err());
        assert!(decode(&[0, 0, 0, 5, TAG_ERROR]).is_err());
    }
}
