//! Export tables and a simple servant loop.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::link::{ConnId, Endpoint, Event, IncomingCall, RemoteFault, RopError};
use super::wire::{FaultCode, Message, RemoteRef, WireValue};

/// Object id → servant. Ids start at 1 and are never reused.
pub struct ExportTable<S> {
    inner: Arc<Inner<S>>,
}

struct Inner<S> {
    map: Mutex<HashMap<u64, S>>,
    next: AtomicU64,
}

impl<S> Clone for ExportTable<S> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
        }
    }
}

impl<S> Default for ExportTable<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S> ExportTable<S> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Inner {
                map: Mutex::new(HashMap::new()),
                next: AtomicU64::new(1),
            }),
        }
    }

    pub fn export(&self, servant: S) -> u64 {
        let id = self.inner.next.fetch_add(1, Ordering::Relaxed);
        self.inner.map.lock().unwrap().insert(id, servant);
        id
    }

    pub fn export_ref(&self, servant: S, endpoint: &str, interface: &str) -> RemoteRef {
        RemoteRef {
            endpoint: endpoint.to_string(),
            object_id: self.export(servant),
            interface: interface.to_string(),
        }
    }

    pub fn unexport(&self, id: u64) -> Option<S> {
        self.inner.map.lock().unwrap().remove(&id)
    }

    pub fn len(&self) -> usize {
        self.inner.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.inner.map.lock().unwrap().keys().copied().collect();
        v.sort();
        v
    }

    /// Apply `f` to every entry, under the table lock.
    pub fn retain(&self, mut f: impl FnMut(u64, &S) -> bool) {
        self.inner.map.lock().unwrap().retain(|k, v| f(*k, v));
    }
}

impl<S: Clone> ExportTable<S> {
    pub fn get(&self, id: u64) -> Option<S> {
        self.inner.map.lock().unwrap().get(&id).cloned()
    }
}

/// A remotely callable object.
pub trait Servant: Send + Sync {
    fn interface(&self) -> &str;
    fn invoke(&self, ch: &mut Channel<'_>, method: &str, args: &[WireValue]) -> Result<WireValue, RemoteFault>;
}

pub type ServantTable = ExportTable<Arc<dyn Servant>>;

pub fn export_servant(table: &ServantTable, endpoint: &str, servant: Arc<dyn Servant>) -> RemoteRef {
    let iface = servant.interface().to_string();
    table.export_ref(servant, endpoint, &iface)
}

/// What a servant sees of the connection its call arrived on.
pub struct Channel<'a> {
    pub ep: &'a mut Endpoint,
    pub conn: ConnId,
    table: &'a ServantTable,
}

impl Channel<'_> {
    pub fn table(&self) -> &ServantTable {
        self.table
    }

    /// Call back into the peer; nested calls from it reach our table.
    pub fn invoke(&mut self, target: u64, method: &str, args: Vec<WireValue>) -> Result<WireValue, RopError> {
        let table = self.table;
        self.ep.invoke_with(self.conn, target, method, args, &mut |ep, call| {
            dispatch(table, ep, call)
        })
    }
}

pub fn no_such_method(method: &str) -> RemoteFault {
    RemoteFault::new(FaultCode::NoSuchMethod, method)
}

pub fn bad_arguments(method: &str) -> RemoteFault {
    RemoteFault::new(FaultCode::BadArguments, method)
}

/// Route one call to its servant.
pub fn dispatch(table: &ServantTable, ep: &mut Endpoint, call: &IncomingCall) -> Result<WireValue, RemoteFault> {
    let Some(servant) = table.get(call.target) else {
        return Err(RemoteFault::new(
            FaultCode::NoSuchObject,
            format!("object {}", call.target),
        ));
    };
    let mut ch = Channel {
        ep,
        conn: call.conn,
        table,
    };
    servant.invoke(&mut ch, &call.method, &call.args)
}

/// Invoke on `conn` with `table` serving nested callbacks.
pub fn invoke_serving(
    ep: &mut Endpoint,
    conn: ConnId,
    table: &ServantTable,
    target: u64,
    method: &str,
    args: Vec<WireValue>,
) -> Result<WireValue, RopError> {
    ep.invoke_with(conn, target, method, args, &mut |ep, call| dispatch(table, ep, call))
}

/// Serve invokes until every connection of `ep` has closed.
pub fn serve_channel(ep: &mut Endpoint, table: &ServantTable) {
    loop {
        if ep.open_connections().is_empty() {
            return;
        }
        match ep.next_event(None) {
            None => return,
            Some(Event::Invoke(call)) => {
                let r = dispatch(table, ep, &call);
                let _ = ep.reply(&call, r);
            }
            Some(Event::Request { conn, msg }) => {
                let answer = match msg {
                    Message::Lookup { .. } => Message::LookupResult(None),
                    _ => Message::BindAck,
                };
                let _ = ep.send(conn, &answer);
            }
            Some(Event::Local(())) => {}
            Some(Event::Closed { .. }) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl Servant for Echo {
        fn interface(&self) -> &str {
            "Echo"
        }

        fn invoke(&self, _: &mut Channel<'_>, method: &str, args: &[WireValue]) -> Result<WireValue, RemoteFault> {
            match method {
                "echo" => Ok(args.first().cloned().unwrap_or(WireValue::Null)),
                m => Err(no_such_method(m)),
            }
        }
    }

    #[test]
    fn ids_are_fresh() {
        let t: ServantTable = ExportTable::new();
        let a = export_servant(&t, "x", Arc::new(Echo));
        let b = export_servant(&t, "x", Arc::new(Echo));
        assert_ne!(a.object_id, b.object_id);
        t.unexport(b.object_id);
        let c = export_servant(&t, "x", Arc::new(Echo));
        assert!(c.object_id > b.object_id);
    }
}
