//! The whole stack on one machine: origin server, proxy, playground and
//! display, driven by the bundled click script.

use remote_playground::demo::{asset_dir, parse_script, run_demo, DemoConfig, Site, Stack, StackConfig};

fn main() {
    let page = std::env::args().nth(1).unwrap_or_else(|| "click.html".into());
    let script = std::fs::read_to_string(asset_dir().join("scripts/click.events")).unwrap();
    let site = Site::from_dir(&asset_dir()).unwrap();
    let cfg = StackConfig {
        seed: Some(1),
        ..StackConfig::default()
    };
    let stack = Stack::start(cfg.clone(), site).unwrap();
    let demo = DemoConfig {
        page,
        script: parse_script(&script).unwrap(),
        stack: cfg,
    };
    let out = run_demo(&stack, &demo).unwrap();
    print!("{}", out.transcript);
    println!("exit {} after {:?}", out.exit_code(), out.elapsed);
    stack.shutdown();
}
