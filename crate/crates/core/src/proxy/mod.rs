//! Rewriting HTTP proxy.

pub mod html;
pub mod http;
pub mod server;

pub use server::{
    filter_class_payload, is_class_payload, AddressGenerator, ClientClass, LogRecord, Mode, Proxy, ProxyConfig,
    TagRecord,
};
