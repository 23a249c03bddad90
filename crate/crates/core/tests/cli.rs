use std::process::Command;

use remote_playground::demo::asset_dir;

fn playground(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_playground"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn asm_rewrite_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let src = asset_dir().join("applets/click.mcfa");
    let bundle = dir.path().join("click.mcfb");
    let (code, _, err) = playground(&["asm", src.to_str().unwrap(), "-o", bundle.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");

    let (code, out, err) = playground(&["rewrite", bundle.to_str().unwrap(), "--json"]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["passed"], true);

    let rewritten = dir.path().join("click.pg.mcfb");
    let (code, out, _) = playground(&["inspect", rewritten.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("pgawt/PGApplet"), "{out}");
    assert!(!out.contains("applet/Applet"), "{out}");
}

#[test]
fn rewrite_fails_on_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("sneaky.mcfb");
    let src = asset_dir().join("applets/sneaky.mcfa");
    playground(&["asm", src.to_str().unwrap(), "-o", bundle.to_str().unwrap()]);
    let (code, out, _) = playground(&["rewrite", bundle.to_str().unwrap()]);
    assert_ne!(code, 0);
    assert!(out.contains("residual net/Socket"), "{out}");
}

#[test]
fn headless_demo_prints_transcript() {
    let (code, out, err) = playground(&[
        "demo",
        "click.html",
        "--headless",
        "--seed",
        "1",
        "--script",
        "click.events",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("DrawString \"Click!\" 5 90"), "{out}");
}

#[test]
fn inject_to_unknown_bridge_fails() {
    let (code, _, err) = playground(&["inject", "--bridge", "127.0.0.1:1", "pg-x", "mouse-clicked", "1", "2"]);
    assert_ne!(code, 0);
    assert!(!err.is_empty());
}
