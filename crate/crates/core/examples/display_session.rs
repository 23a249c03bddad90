//! Draw on a display surface from a remote client, then click it.

use std::time::Duration;

use remote_playground::display::{Display, DisplayConfig, InputEvent};
use remote_playground::rop::{Endpoint, WireValue};

fn main() {
    let display = Display::new(DisplayConfig::default());
    let addr = display.listen("127.0.0.1:0").unwrap().to_string();
    display.open_session("pg-example", 200, 100).unwrap();

    let mut ep: Endpoint = Endpoint::new("client");
    let conn = ep.connect(&addr).unwrap();
    let session = ep.lookup(conn, "pg-example", Duration::from_secs(1)).unwrap();
    println!("session {} is a {}", session.object_id, session.interface);

    let WireValue::Remote(g) = ep.call(conn, session.object_id, "getBrowserGraphics", vec![]).unwrap() else {
        panic!("no graphics");
    };
    ep.call(
        conn,
        g.object_id,
        "drawString",
        vec![WireValue::Str("hello".into()), WireValue::I32(10), WireValue::I32(20)],
    )
    .unwrap();
    ep.call(
        conn,
        g.object_id,
        "drawRect",
        vec![
            WireValue::I32(5),
            WireValue::I32(5),
            WireValue::I32(80),
            WireValue::I32(30),
        ],
    )
    .unwrap();
    print!("{}", display.dump("pg-example").unwrap());

    // Nobody listens yet, so the click goes nowhere.
    println!("click: {:?}", display.inject("pg-example", InputEvent::click(12, 18)));
    println!("{}", display.stats("pg-example").unwrap().to_text());
}
