//! Rendezvous registry: ContactAddress → RemoteRef.

use std::collections::HashMap;
use std::net::TcpListener;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::link::{ConnId, Endpoint, Event, RopError};
use super::wire::{FaultCode, Message, RemoteRef};

/// Last writer wins.
#[derive(Clone, Default)]
pub struct Registry {
    inner: Arc<(Mutex<HashMap<String, RemoteRef>>, Condvar)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&self, address: &str, target: RemoteRef) {
        let (m, cv) = &*self.inner;
        m.lock().unwrap().insert(address.to_string(), target);
        cv.notify_all();
    }

    pub fn unbind(&self, address: &str) -> Option<RemoteRef> {
        self.inner.0.lock().unwrap().remove(address)
    }

    pub fn get(&self, address: &str) -> Option<RemoteRef> {
        self.inner.0.lock().unwrap().get(address).cloned()
    }

    pub fn lookup(&self, address: &str, timeout: Duration) -> Option<RemoteRef> {
        let (m, cv) = &*self.inner;
        let deadline = Instant::now() + timeout;
        let mut map = m.lock().unwrap();
        loop {
            if let Some(r) = map.get(address) {
                return Some(r.clone());
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            map = cv.wait_timeout(map, left).unwrap().0;
        }
    }

    pub fn addresses(&self) -> Vec<String> {
        let mut v: Vec<String> = self.inner.0.lock().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Answer a Bind or Lookup. Other messages get `None`.
    pub fn answer(&self, msg: &Message) -> Option<Message> {
        match msg {
            Message::Bind { address, target } => {
                self.bind(address, target.clone());
                Some(Message::BindAck)
            }
            Message::Lookup { address } => Some(Message::LookupResult(self.get(address))),
            _ => None,
        }
    }
}

/// Serve `registry` on `listener`, one thread per connection.
pub fn serve_registry(listener: TcpListener, registry: Registry) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name("registry".into())
        .spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let registry = registry.clone();
                thread::spawn(move || {
                    let mut ep: Endpoint = Endpoint::new("registry");
                    if ep.attach_tcp(stream).is_err() {
                        return;
                    }
                    while let Some(ev) = ep.next_event(None) {
                        match ev {
                            Event::Request { conn, msg } => {
                                if let Some(a) = registry.answer(&msg) {
                                    let _ = ep.send(conn, &a);
                                }
                            }
                            Event::Invoke(call) => {
                                let f =
                                    super::link::RemoteFault::new(FaultCode::NoSuchObject, "registry exports nothing");
                                let _ = ep.reply(&call, Err(f));
                            }
                            Event::Closed { .. } => break,
                            Event::Local(()) => {}
                        }
                    }
                });
            }
        })
        .expect("spawn registry")
}

/// A connection to a remote registry.
pub struct RegistryClient {
    ep: Endpoint,
    conn: ConnId,
}

impl RegistryClient {
    pub fn connect(addr: &str) -> Result<Self, RopError> {
        let mut ep = Endpoint::new("registry-client");
        let conn = ep
            .connect(addr)
            .map_err(|e| RopError::RegistryUnavailable(e.to_string()))?;
        Ok(Self { ep, conn })
    }

    pub fn bind(&mut self, address: &str, target: RemoteRef) -> Result<(), RopError> {
        self.ep.bind(self.conn, address, target).map_err(unavailable)
    }

    pub fn lookup(&mut self, address: &str, timeout: Duration) -> Result<RemoteRef, RopError> {
        self.ep.lookup(self.conn, address, timeout).map_err(unavailable)
    }
}

fn unavailable(e: RopError) -> RopError {
    match e {
        RopError::ChannelClosed | RopError::Timeout => RopError::RegistryUnavailable(e.to_string()),
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(id: u64) -> RemoteRef {
        RemoteRef {
            endpoint: "127.0.0.1:1".into(),
            object_id: id,
            interface: "BrowserServer".into(),
        }
    }

    #[test]
    fn rebind_replaces() {
        let reg = Registry::new();
        reg.bind("pg-a", r(1));
        reg.bind("pg-a", r(2));
        assert_eq!(reg.get("pg-a").unwrap().object_id, 2);
    }

    #[test]
    fn lookup_waits_for_late_bind() {
        let reg = Registry::new();
        let r2 = reg.clone();
        let t = thread::spawn(move || {
            thread::sleep(Duration::from_millis(50));
            r2.bind("pg-late", r(5));
        });
        assert_eq!(reg.lookup("pg-late", Duration::from_secs(10)).unwrap().object_id, 5);
        t.join().unwrap();
    }

    #[test]
    fn empty_lookup_times_out() {
        assert!(Registry::new().lookup("pg-none", Duration::from_millis(100)).is_none());
    }

    #[test]
    fn remote_client_round_trip() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        serve_registry(l, Registry::new());
        let mut c = RegistryClient::connect(&addr).unwrap();
        c.bind("pg-1", r(7)).unwrap();
        assert_eq!(c.lookup("pg-1", Duration::from_secs(1)).unwrap(), r(7));
        assert_eq!(
            c.lookup("pg-2", Duration::from_millis(100)).unwrap_err(),
            RopError::NotFound("pg-2".into())
        );
    }

    #[test]
    fn unreachable_registry() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        drop(l);
        assert!(matches!(
            RegistryClient::connect(&addr),
            Err(RopError::RegistryUnavailable(_))
        ));
    }
}
