//! The proxy in both modes: HTML gets applet tags replaced, and mobile code
//! never reaches a display client.

use remote_playground::demo::{assemble_file, asset_dir, Site};
use remote_playground::proxy::http::{self, Request};
use remote_playground::proxy::{Mode, Proxy, ProxyConfig};

fn main() {
    let mut site = Site::new();
    site.insert(
        "page.html",
        "<p>before</p><applet code=click.mcfb width=60 height=40></applet><p>after</p>",
    );
    site.insert(
        "click.mcfb",
        assemble_file(&asset_dir().join("applets/click.mcfa")).unwrap(),
    );
    site.insert(
        "disguised.png",
        assemble_file(&asset_dir().join("applets/flood.mcfa")).unwrap(),
    );
    let origin = site.serve("127.0.0.1:0").unwrap();

    for mode in [Mode::Trusted, Mode::Untrusted] {
        let proxy = Proxy::new(ProxyConfig {
            mode,
            seed: Some(1),
            ..ProxyConfig::default()
        });
        let addr = proxy.listen("127.0.0.1:0").unwrap().to_string();
        println!("== {mode:?}");
        for path in ["page.html", "click.mcfb", "disguised.png"] {
            let r = http::get(&format!("http://{origin}/{path}"), Some(&addr), &[]).unwrap();
            println!("{path}: {}", r.status);
            if path.ends_with(".html") {
                println!("  {}", String::from_utf8_lossy(&r.body).trim());
            }
        }
        let target = format!("/bundle?url=http://{origin}/click.mcfb");
        let r = http::exchange(&addr, &Request::get(&target)).unwrap();
        println!("bundle without token: {}", r.status);
        let r = http::exchange(
            &addr,
            &Request::get(&target).with_header("X-Playground-Token", "playground"),
        )
        .unwrap();
        println!("bundle with token: {} ({} bytes)", r.status, r.body.len());
        for line in proxy.log() {
            println!("  log: {line:?}");
        }
    }
}
