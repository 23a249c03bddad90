//! Channels and the invocation pump.
//!
//! An [`Endpoint`] owns any number of connections. Each connection has a
//! reader thread that decodes frames into a shared inbox; the owning thread
//! drives everything else. While the owner waits for a reply on one
//! connection, nested `Invoke`s arriving on that same connection are handed
//! back to it ([`Wait::Incoming`]) so they can be serviced re-entrantly.
//! Traffic for other connections is stashed or deferred until the owner
//! returns to [`Endpoint::next_event`].

use std::collections::{HashMap, VecDeque};
use std::io::{self, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{encode_message, read_frame, FaultCode, Message, ReadFrame, RemoteRef, WireValue, DEFAULT_MAX_FRAME};

pub type ConnId = u32;

pub const DEFAULT_INVOKE_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_LOOKUP_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_MAX_DEPTH: usize = 32;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const LOOKUP_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFault {
    pub code: FaultCode,
    pub detail: String,
}

impl RemoteFault {
    pub fn new(code: FaultCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for RemoteFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.detail.is_empty() {
            write!(f, "{}", self.code)
        } else {
            write!(f, "{}: {}", self.code, self.detail)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RopError {
    #[error("remote fault {0}")]
    Fault(RemoteFault),
    #[error("channel closed")]
    ChannelClosed,
    #[error("timed out")]
    Timeout,
    #[error("connect to {addr} failed: {detail}")]
    Connect { addr: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("address {0} not bound")]
    NotFound(String),
}

impl RopError {
    pub fn fault_code(&self) -> Option<FaultCode> {
        match self {
            RopError::Fault(f) => Some(f.code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EndpointConfig {
    pub invoke_timeout: Duration,
    pub request_timeout: Duration,
    pub max_depth: usize,
    pub max_frame: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            invoke_timeout: DEFAULT_INVOKE_TIMEOUT,
            request_timeout: DEFAULT_LOOKUP_TIMEOUT,
            max_depth: DEFAULT_MAX_DEPTH,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

/// Outgoing half of a connection.
pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()>;
    fn close(&mut self) {}
}

pub struct TcpSink(pub TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.0.write_all(frame)
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Records every message crossing a connection.
pub type Tap = Arc<Mutex<Vec<(Direction, Message)>>>;

enum Inbound<L> {
    Frame(ConnId, Message),
    Broken(ConnId, String),
    Eof(ConnId),
    Local(L),
}

/// Handed to whatever reads a connection's bytes.
pub struct Feed<L> {
    conn: ConnId,
    tx: Sender<Inbound<L>>,
}

impl<L> Feed<L> {
    pub fn conn(&self) -> ConnId {
        self.conn
    }

    /// Returns false once the endpoint is gone.
    pub fn message(&self, m: Message) -> bool {
        self.tx.send(Inbound::Frame(self.conn, m)).is_ok()
    }

    pub fn broken(&self, why: String) {
        let _ = self.tx.send(Inbound::Broken(self.conn, why));
    }

    pub fn eof(&self) {
        let _ = self.tx.send(Inbound::Eof(self.conn));
    }
}

/// Posts work items to an endpoint's owning thread.
pub struct LocalSender<L> {
    tx: Sender<Inbound<L>>,
}

impl<L> Clone for LocalSender<L> {
    fn clone(&self) -> Self {
        Self { tx: self.tx.clone() }
    }
}

impl<L> LocalSender<L> {
    pub fn send(&self, task: L) -> bool {
        self.tx.send(Inbound::Local(task)).is_ok()
    }
}

impl<L> std::fmt::Debug for LocalSender<L> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LocalSender")
    }
}

#[derive(Debug, Clone)]
pub struct IncomingCall {
    pub conn: ConnId,
    pub call_id: u64,
    pub target: u64,
    pub method: String,
    pub args: Vec<WireValue>,
}

#[derive(Debug)]
pub enum Event<L> {
    Invoke(IncomingCall),
    /// Bind or Lookup from a peer.
    Request {
        conn: ConnId,
        msg: Message,
    },
    Local(L),
    Closed {
        conn: ConnId,
        error: Option<String>,
    },
}

#[derive(Debug)]
pub enum Wait {
    Done(Result<WireValue, RemoteFault>),
    Incoming(IncomingCall),
}

struct Conn {
    sink: Box<dyn FrameSink>,
    peer: String,
    local: String,
    next_call: u64,
    pending: HashMap<u64, Instant>,
    replies: HashMap<u64, Result<WireValue, RemoteFault>>,
    responses: VecDeque<Message>,
    closed: bool,
    tap: Option<Tap>,
}

pub struct Endpoint<L = ()> {
    label: String,
    tx: Sender<Inbound<L>>,
    rx: Receiver<Inbound<L>>,
    conns: HashMap<ConnId, Conn>,
    next_conn: ConnId,
    deferred: VecDeque<Event<L>>,
    dispatching: Vec<(ConnId, u64)>,
    cfg: EndpointConfig,
}

impl<L: Send + 'static> Endpoint<L> {
    /// `label` is the endpoint string placed in refs this side exports.
    pub fn new(label: impl Into<String>) -> Self {
        Self::with_config(label, EndpointConfig::default())
    }

    pub fn with_config(label: impl Into<String>, cfg: EndpointConfig) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            label: label.into(),
            tx,
            rx,
            conns: HashMap::new(),
            next_conn: 1,
            deferred: VecDeque::new(),
            dispatching: Vec::new(),
            cfg,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: EndpointConfig) {
        self.cfg = cfg;
    }

    pub fn local_sender(&self) -> LocalSender<L> {
        LocalSender { tx: self.tx.clone() }
    }

    /// Current count of incoming invokes being serviced.
    pub fn depth(&self) -> usize {
        self.dispatching.len()
    }

    /// Register a connection; the caller feeds inbound frames.
    pub fn attach(&mut self, sink: Box<dyn FrameSink>, peer: impl Into<String>) -> (ConnId, Feed<L>) {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Conn {
                sink,
                peer: peer.into(),
                local: String::new(),
                next_call: 1,
                pending: HashMap::new(),
                replies: HashMap::new(),
                responses: VecDeque::new(),
                closed: false,
                tap: None,
            },
        );
        (
            id,
            Feed {
                conn: id,
                tx: self.tx.clone(),
            },
        )
    }

    pub fn attach_tcp(&mut self, stream: TcpStream) -> io::Result<ConnId> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        let local = stream.local_addr().map(|a| a.to_string()).unwrap_or_default();
        let reader = stream.try_clone()?;
        let (id, feed) = self.attach(Box::new(TcpSink(stream)), peer);
        if let Some(c) = self.conns.get_mut(&id) {
            c.local = local;
        }
        spawn_reader(reader, feed, self.cfg.max_frame);
        Ok(id)
    }

    pub fn connect(&mut self, addr: &str) -> Result<ConnId, RopError> {
        let err = |detail: String| RopError::Connect {
            addr: addr.to_string(),
            detail,
        };
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| err(e.to_string()))?
            .next()
            .ok_or_else(|| err("no address".into()))?;
        let stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(|e| err(e.to_string()))?;
        self.attach_tcp(stream).map_err(|e| err(e.to_string()))
    }

    pub fn peer(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).map(|c| c.peer.as_str())
    }

    /// Local socket address, for TCP connections.
    pub fn local(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).map(|c| c.local.as_str())
    }

    pub fn is_open(&self, conn: ConnId) -> bool {
        self.conns.get(&conn).is_some_and(|c| !c.closed)
    }

    pub fn open_connections(&self) -> Vec<ConnId> {
        let mut v: Vec<_> = self.conns.iter().filter(|(_, c)| !c.closed).map(|(k, _)| *k).collect();
        v.sort();
        v
    }

    pub fn set_tap(&mut self, conn: ConnId, tap: Tap) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.tap = Some(tap);
        }
    }

    pub fn close(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.closed = true;
            c.sink.close();
        }
    }

    /// Write a message as-is.
    pub fn send(&mut self, conn: ConnId, msg: &Message) -> Result<(), RopError> {
        let c = self.conns.get_mut(&conn).ok_or(RopError::ChannelClosed)?;
        if c.closed {
            return Err(RopError::ChannelClosed);
        }
        if let Some(t) = &c.tap {
            t.lock().unwrap().push((Direction::Sent, msg.clone()));
        }
        if let Err(e) = c.sink.send_frame(&encode_message(msg)) {
            log::debug!("send on conn {conn} failed: {e}");
            c.closed = true;
            c.sink.close();
            return Err(RopError::ChannelClosed);
        }
        Ok(())
    }

    pub fn send_invoke(
        &mut self,
        conn: ConnId,
        target: u64,
        method: &str,
        args: Vec<WireValue>,
    ) -> Result<u64, RopError> {
        let timeout = self.cfg.invoke_timeout;
        let c = self.conns.get_mut(&conn).ok_or(RopError::ChannelClosed)?;
        if c.closed {
            return Err(RopError::ChannelClosed);
        }
        let call_id = c.next_call;
        c.next_call += 1;
        c.pending.insert(call_id, Instant::now() + timeout);
        let msg = Message::Invoke {
            call_id,
            target,
            method: method.to_string(),
            args,
        };
        if let Err(e) = self.send(conn, &msg) {
            if let Some(c) = self.conns.get_mut(&conn) {
                c.pending.remove(&call_id);
            }
            return Err(e);
        }
        Ok(call_id)
    }

    /// Finish servicing an incoming call.
    pub fn reply(&mut self, call: &IncomingCall, result: Result<WireValue, RemoteFault>) -> Result<(), RopError> {
        if let Some(pos) = self.dispatching.iter().rposition(|d| *d == (call.conn, call.call_id)) {
            self.dispatching.remove(pos);
        }
        let msg = match result {
            Ok(value) => Message::Result {
                call_id: call.call_id,
                value,
            },
            Err(f) => Message::Fault {
                call_id: call.call_id,
                code: f.code,
                detail: f.detail,
            },
        };
        self.send(call.conn, &msg)
    }

    fn absorb(&mut self, item: Inbound<L>) -> Option<Event<L>> {
        match item {
            Inbound::Local(l) => Some(Event::Local(l)),
            Inbound::Eof(conn) => self.mark_closed(conn, None),
            Inbound::Broken(conn, why) => {
                log::warn!("conn {conn}: {why}");
                self.mark_closed(conn, Some(why))
            }
            Inbound::Frame(conn, msg) => {
                let c = self.conns.get_mut(&conn)?;
                if let Some(t) = &c.tap {
                    t.lock().unwrap().push((Direction::Received, msg.clone()));
                }
                match msg {
                    Message::Result { call_id, value } => {
                        if c.pending.remove(&call_id).is_some() {
                            c.replies.insert(call_id, Ok(value));
                        } else {
                            log::warn!("conn {conn}: result for unknown call {call_id}");
                        }
                        None
                    }
                    Message::Fault { call_id, code, detail } => {
                        if c.pending.remove(&call_id).is_some() {
                            c.replies.insert(call_id, Err(RemoteFault { code, detail }));
                        } else {
                            log::warn!("conn {conn}: fault for unknown call {call_id}: {code}");
                        }
                        None
                    }
                    Message::BindAck | Message::LookupResult(_) => {
                        c.responses.push_back(msg);
                        None
                    }
                    Message::Invoke {
                        call_id,
                        target,
                        method,
                        args,
                    } => Some(Event::Invoke(IncomingCall {
                        conn,
                        call_id,
                        target,
                        method,
                        args,
                    })),
                    m @ (Message::Bind { .. } | Message::Lookup { .. }) => Some(Event::Request { conn, msg: m }),
                }
            }
        }
    }

    fn mark_closed(&mut self, conn: ConnId, error: Option<String>) -> Option<Event<L>> {
        let c = self.conns.get_mut(&conn)?;
        c.closed = true;
        c.sink.close();
        Some(Event::Closed { conn, error })
    }

    /// Next top-level event. `None` on timeout.
    pub fn next_event(&mut self, timeout: Option<Duration>) -> Option<Event<L>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if let Some(ev) = self.deferred.pop_front() {
                if let Event::Invoke(call) = &ev {
                    self.dispatching.push((call.conn, call.call_id));
                }
                return Some(ev);
            }
            let item = match deadline {
                None => self.rx.recv().ok()?,
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    match self.rx.recv_timeout(left) {
                        Ok(i) => i,
                        Err(_) => return None,
                    }
                }
            };
            if let Some(ev) = self.absorb(item) {
                self.deferred.push_back(ev);
            }
        }
    }

    /// Wait for the reply to `call_id`, surfacing nested invokes that
    /// arrive on the same connection in the meantime.
    pub fn wait_reply(&mut self, conn: ConnId, call_id: u64) -> Result<Wait, RopError> {
        loop {
            let c = self.conns.get_mut(&conn).ok_or(RopError::ChannelClosed)?;
            if let Some(r) = c.replies.remove(&call_id) {
                return Ok(Wait::Done(r));
            }
            let Some(deadline) = c.pending.get(&call_id).copied() else {
                return Err(RopError::Protocol(format!("no pending call {call_id}")));
            };
            if c.closed {
                c.pending.remove(&call_id);
                return Err(RopError::ChannelClosed);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                c.pending.remove(&call_id);
                return Err(RopError::Timeout);
            }
            let item = match self.rx.recv_timeout(left) {
                Ok(i) => i,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Err(RopError::ChannelClosed),
            };
            match self.absorb(item) {
                None => {}
                Some(Event::Invoke(call)) if call.conn == conn => {
                    if self.dispatching.len() >= self.cfg.max_depth {
                        let detail = format!("nesting depth {} reached", self.cfg.max_depth);
                        let _ = self.send(
                            conn,
                            &Message::Fault {
                                call_id: call.call_id,
                                code: FaultCode::DepthExceeded,
                                detail,
                            },
                        );
                        continue;
                    }
                    self.dispatching.push((conn, call.call_id));
                    return Ok(Wait::Incoming(call));
                }
                Some(ev) => self.deferred.push_back(ev),
            }
        }
    }

    /// Invoke and block, servicing nested calls with `handler`.
    pub fn invoke_with<F>(
        &mut self,
        conn: ConnId,
        target: u64,
        method: &str,
        args: Vec<WireValue>,
        handler: &mut F,
    ) -> Result<WireValue, RopError>
    where
        F: FnMut(&mut Self, &IncomingCall) -> Result<WireValue, RemoteFault>,
    {
        let id = self.send_invoke(conn, target, method, args)?;
        loop {
            match self.wait_reply(conn, id)? {
                Wait::Done(r) => return r.map_err(RopError::Fault),
                Wait::Incoming(call) => {
                    let r = handler(self, &call);
                    let _ = self.reply(&call, r);
                }
            }
        }
    }

    /// Invoke with no local objects to offer nested callers.
    pub fn call(
        &mut self,
        conn: ConnId,
        target: u64,
        method: &str,
        args: Vec<WireValue>,
    ) -> Result<WireValue, RopError> {
        self.invoke_with(conn, target, method, args, &mut |_, c| {
            Err(RemoteFault::new(
                FaultCode::NoSuchObject,
                format!("object {}", c.target),
            ))
        })
    }

    /// Send a Bind or Lookup and wait for its answer.
    pub fn request(&mut self, conn: ConnId, msg: &Message) -> Result<Message, RopError> {
        self.send(conn, msg)?;
        let deadline = Instant::now() + self.cfg.request_timeout;
        loop {
            let c = self.conns.get_mut(&conn).ok_or(RopError::ChannelClosed)?;
            if let Some(m) = c.responses.pop_front() {
                return Ok(m);
            }
            if c.closed {
                return Err(RopError::ChannelClosed);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(RopError::Timeout);
            }
            match self.rx.recv_timeout(left) {
                Ok(item) => {
                    if let Some(ev) = self.absorb(item) {
                        self.deferred.push_back(ev);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(RopError::ChannelClosed),
            }
        }
    }

    pub fn bind(&mut self, conn: ConnId, address: &str, target: RemoteRef) -> Result<(), RopError> {
        let msg = Message::Bind {
            address: address.to_string(),
            target,
        };
        match self.request(conn, &msg)? {
            Message::BindAck => Ok(()),
            other => Err(RopError::Protocol(format!("unexpected answer to bind: {other:?}"))),
        }
    }

    pub fn lookup_once(&mut self, conn: ConnId, address: &str) -> Result<Option<RemoteRef>, RopError> {
        let msg = Message::Lookup {
            address: address.to_string(),
        };
        match self.request(conn, &msg)? {
            Message::LookupResult(r) => Ok(r),
            other => Err(RopError::Protocol(format!("unexpected answer to lookup: {other:?}"))),
        }
    }

    /// Poll until `address` is bound or `timeout` passes.
    pub fn lookup(&mut self, conn: ConnId, address: &str, timeout: Duration) -> Result<RemoteRef, RopError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(r) = self.lookup_once(conn, address)? {
                return Ok(r);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(RopError::NotFound(address.to_string()));
            }
            thread::sleep(left.min(LOOKUP_POLL));
        }
    }
}

impl<L> Drop for Endpoint<L> {
    fn drop(&mut self) {
        for c in self.conns.values_mut() {
            c.sink.close();
        }
    }
}

/// Read frames from `r` until EOF or a malformed frame.
pub fn spawn_reader<R, L>(mut r: R, feed: Feed<L>, max_frame: usize)
where
    R: io::Read + Send + 'static,
    L: Send + 'static,
{
    let name = format!("rop-reader-{}", feed.conn);
    thread::Builder::new()
        .name(name)
        .spawn(move || loop {
            match read_frame(&mut r, max_frame) {
                Ok(ReadFrame::Message(m)) => {
                    if !feed.message(m) {
                        break;
                    }
                }
                Ok(ReadFrame::Eof) => {
                    feed.eof();
                    break;
                }
                Err(e) => {
                    feed.broken(e.to_string());
                    break;
                }
            }
        })
        .expect("spawn reader thread");
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn pair() -> (Endpoint, ConnId, Endpoint, ConnId) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let mut a = Endpoint::new("a");
        let ca = a.connect(&addr).unwrap();
        let (s, _) = l.accept().unwrap();
        let mut b = Endpoint::new("b");
        let cb = b.attach_tcp(s).unwrap();
        (a, ca, b, cb)
    }

    #[test]
    fn call_ids_start_at_one() {
        let (mut a, ca, mut b, _) = pair();
        let id = a.send_invoke(ca, 3, "m", vec![]).unwrap();
        assert_eq!(id, 1);
        match b.next_event(Some(Duration::from_secs(5))).unwrap() {
            Event::Invoke(c) => {
                assert_eq!((c.call_id, c.target, c.method.as_str()), (1, 3, "m"));
                b.reply(&c, Ok(WireValue::I32(9))).unwrap();
            }
            e => panic!("{e:?}"),
        }
        match a.wait_reply(ca, id).unwrap() {
            Wait::Done(Ok(v)) => assert_eq!(v, WireValue::I32(9)),
            w => panic!("{w:?}"),
        }
    }

    #[test]
    fn invoke_after_peer_close_is_channel_closed() {
        let (mut a, ca, b, _) = pair();
        drop(b);
        thread::sleep(Duration::from_millis(50));
        let r = a.call(ca, 1, "m", vec![]);
        assert_eq!(r.unwrap_err(), RopError::ChannelClosed);
    }

    #[test]
    fn timeout_is_reported() {
        let (mut a, ca, _b, _) = pair();
        a.set_config(EndpointConfig {
            invoke_timeout: Duration::from_millis(100),
            ..Default::default()
        });
        assert_eq!(a.call(ca, 1, "m", vec![]).unwrap_err(), RopError::Timeout);
    }
}
