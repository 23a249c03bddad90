//! Rop frames over WebSocket: each binary message carries one complete
//! frame, length prefix included, byte-identical to the stream transport.

use std::io::{self, ErrorKind};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::Duration;

use tungstenite::{Message as WsMessage, WebSocket};

use super::link::{Endpoint, Feed, FrameSink};
use super::wire::decode_message_with_limit;
use super::ConnId;

const POLL: Duration = Duration::from_millis(5);

enum Out {
    Frame(Vec<u8>),
    Close,
}

struct WsSink(Sender<Out>);

impl FrameSink for WsSink {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.0
            .send(Out::Frame(frame.to_vec()))
            .map_err(|_| io::Error::new(ErrorKind::BrokenPipe, "websocket closed"))
    }

    fn close(&mut self) {
        let _ = self.0.send(Out::Close);
    }
}

/// True if the first bytes on `stream` look like an HTTP upgrade.
pub fn is_websocket_upgrade(stream: &TcpStream) -> io::Result<bool> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    for _ in 0..200 {
        got = stream.peek(&mut buf)?;
        if got >= 4 || got == 0 {
            break;
        }
        thread::sleep(POLL);
    }
    Ok(got >= 4 && &buf == b"GET ")
}

/// Complete the server handshake and attach the socket to `ep`.
pub fn accept_websocket<L: Send + 'static>(ep: &mut Endpoint<L>, stream: TcpStream) -> io::Result<ConnId> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    Ok(attach_websocket(ep, ws, peer))
}

/// Attach an established WebSocket (either role).
pub fn attach_websocket<L: Send + 'static>(ep: &mut Endpoint<L>, ws: WebSocket<TcpStream>, peer: String) -> ConnId {
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let (tx, rx) = mpsc::channel();
    let (id, feed) = ep.attach(Box::new(WsSink(tx)), peer);
    let max = ep.config().max_frame;
    thread::Builder::new()
        .name(format!("rop-ws-{id}"))
        .spawn(move || pump(ws, rx, feed, max))
        .expect("spawn websocket thread");
    id
}

fn pump<L>(mut ws: WebSocket<TcpStream>, rx: Receiver<Out>, feed: Feed<L>, max: usize) {
    loop {
        loop {
            match rx.try_recv() {
                Ok(Out::Frame(f)) => {
                    if let Err(e) = ws.send(WsMessage::Binary(f)) {
                        feed.broken(e.to_string());
                        return;
                    }
                }
                Ok(Out::Close) | Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return;
                }
                Err(TryRecvError::Empty) => break,
            }
        }
        match ws.read() {
            Ok(WsMessage::Binary(b)) => match decode_message_with_limit(&b, max) {
                Ok(m) => {
                    if !feed.message(m) {
                        return;
                    }
                }
                Err(e) => {
                    feed.broken(e.to_string());
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return;
                }
            },
            Ok(WsMessage::Close(_)) => {
                feed.eof();
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                feed.eof();
                return;
            }
            Err(e) => {
                feed.broken(e.to_string());
                return;
            }
        }
    }
}
