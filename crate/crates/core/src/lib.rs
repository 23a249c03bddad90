//! Remote playground: run untrusted mobile code away from the user and
//! drive the user's display over a remote-object protocol.

pub mod cli;
pub mod codec;
pub mod demo;
pub mod display;
pub mod mcf;
pub mod playground;
pub mod proxy;
pub mod rewrite;
pub mod rop;
pub mod stubs;
