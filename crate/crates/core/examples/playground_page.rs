//! Load a rewritten applet straight into a playground and watch it draw on
//! a display it reaches only through remote references.

use std::time::Duration;

use remote_playground::demo::{assemble_file, asset_dir};
use remote_playground::display::{Display, DisplayConfig, InputEvent};
use remote_playground::playground::control::{send_load, AppletLoad, LoadPage};
use remote_playground::playground::{Playground, PlaygroundConfig};
use remote_playground::rewrite::{rewrite_bundle, NameMap};

fn main() {
    let display = Display::new(DisplayConfig::default());
    let registry = display.listen("127.0.0.1:0").unwrap().to_string();
    display.open_session("pg-direct", 100, 100).unwrap();

    let playground = Playground::new(PlaygroundConfig {
        registry: Some(registry.clone()),
        ..PlaygroundConfig::default()
    });
    let control = playground.listen("127.0.0.1:0").unwrap().to_string();

    let raw = assemble_file(&asset_dir().join("applets/click.mcfa")).unwrap();
    let (bundle, _) = rewrite_bundle(&raw, &NameMap::default()).unwrap();
    let load = LoadPage {
        page_id: "example".into(),
        registry,
        applets: vec![AppletLoad {
            name: String::new(),
            address: "pg-direct".into(),
            codebase: "http://nowhere.invalid/".into(),
            bundle,
            params: vec![],
        }],
    };
    send_load(&control, &load).unwrap();
    let snap = playground.wait_settled("example", Duration::from_secs(5)).unwrap();
    for a in &snap.applets {
        println!("applet {} {} {}", a.address, a.status, a.detail);
    }

    for (x, y) in [(10, 10), (50, 60)] {
        println!("click -> {:?}", display.inject("pg-direct", InputEvent::click(x, y)));
    }
    print!("{}", display.dump("pg-direct").unwrap());

    println!("audit:");
    for r in playground.audit().records() {
        println!("  {} {} {} allowed={}", r.page, r.purpose, r.endpoint, r.allowed);
    }
    playground.shutdown();
}
