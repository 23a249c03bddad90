//! Remote-object protocol: primitive-only values, framed messages, export
//! tables, a rendezvous registry and re-entrant synchronous invocation.

pub mod export;
pub mod link;
pub mod registry;
pub mod wire;
pub mod ws;

pub use export::{
    dispatch, export_servant, invoke_serving, serve_channel, Channel, ExportTable, Servant, ServantTable,
};
pub use link::{
    ConnId, Direction, Endpoint, EndpointConfig, Event, Feed, FrameSink, IncomingCall, LocalSender, RemoteFault,
    RopError, Tap, Wait,
};
pub use registry::{serve_registry, Registry, RegistryClient};
pub use wire::{decode_message, encode_message, FaultCode, Message, RemoteRef, WireError, WireValue};
