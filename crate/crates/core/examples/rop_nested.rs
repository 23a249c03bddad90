//! Two endpoints over TCP. The server calls back into the client while the
//! client's own invoke is still outstanding.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use remote_playground::rop::export::{export_servant, invoke_serving, serve_channel, Channel, Servant, ServantTable};
use remote_playground::rop::{Endpoint, FaultCode, RemoteFault, WireValue};

struct Countdown;

impl Servant for Countdown {
    fn interface(&self) -> &str {
        "Countdown"
    }

    fn invoke(&self, ch: &mut Channel<'_>, method: &str, args: &[WireValue]) -> Result<WireValue, RemoteFault> {
        let (Some(WireValue::I32(n)), Some(WireValue::Remote(peer))) = (args.first(), args.get(1)) else {
            return Err(RemoteFault::new(FaultCode::BadArguments, method));
        };
        if *n == 0 {
            return Ok(WireValue::Str(format!("bottom reached at depth {}", ch.ep.depth())));
        }
        let me = args[2].clone();
        ch.invoke(
            peer.object_id,
            "tick",
            vec![WireValue::I32(n - 1), me, WireValue::Remote(peer.clone())],
        )
        .map_err(|e| RemoteFault::new(FaultCode::Internal, e.to_string()))
    }
}

fn main() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();

    let server_table = ServantTable::new();
    let server_ref = export_servant(&server_table, "server", Arc::new(Countdown));
    let st = server_table.clone();
    let server = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        let mut ep = Endpoint::new("server");
        ep.attach_tcp(s).unwrap();
        serve_channel(&mut ep, &st);
    });

    let client_table = ServantTable::new();
    let client_ref = export_servant(&client_table, "client", Arc::new(Countdown));
    let mut ep = Endpoint::new("client");
    let conn = ep.connect(&addr).unwrap();
    let r = invoke_serving(
        &mut ep,
        conn,
        &client_table,
        server_ref.object_id,
        "tick",
        vec![
            WireValue::I32(7),
            WireValue::Remote(client_ref),
            WireValue::Remote(server_ref),
        ],
    );
    println!("{r:?}");
    ep.close(conn);
    server.join().unwrap();
}
