//! Talk to the display bridge over WebSocket, the way a browser terminal
//! would. Each binary message is one rop frame.

use remote_playground::display::{Display, DisplayConfig};
use remote_playground::rop::{decode_message, encode_message, Message, WireValue};
use tungstenite::Message as Ws;

fn main() {
    let display = Display::new(DisplayConfig::default());
    display.listen("127.0.0.1:0").unwrap();
    let bridge = display.listen_bridge("127.0.0.1:0").unwrap();
    display.open_session("pg-ws", 64, 48).unwrap();

    let (mut ws, _) = tungstenite::connect(format!("ws://{bridge}/")).unwrap();
    let mut roundtrip = |m: Message| {
        ws.send(Ws::Binary(encode_message(&m))).unwrap();
        loop {
            if let Ws::Binary(b) = ws.read().unwrap() {
                return decode_message(&b).unwrap();
            }
        }
    };

    let reply = roundtrip(Message::Lookup {
        address: "pg-ws".into(),
    });
    println!("{reply:?}");
    let Message::LookupResult(Some(term)) = reply else {
        panic!("no terminal");
    };
    for (id, method, args) in [
        (1, "surface", vec![]),
        (
            2,
            "injectEvent",
            vec![
                WireValue::Str("mouse-clicked".into()),
                WireValue::I32(3),
                WireValue::I32(4),
                WireValue::I32(0),
            ],
        ),
        (3, "stats", vec![]),
    ] {
        let reply = roundtrip(Message::Invoke {
            call_id: id,
            target: term.object_id,
            method: method.into(),
            args,
        });
        println!("{method}: {reply:?}");
    }
}
