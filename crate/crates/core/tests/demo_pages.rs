use remote_playground::demo::{asset_dir, parse_script, run_demo, DemoConfig, Site, Stack, StackConfig};
use remote_playground::display::DisplayConfig;

fn run(page: &str, script: &str, max_windows: usize) -> (String, i32) {
    let cfg = StackConfig {
        seed: Some(1),
        display: DisplayConfig {
            max_windows,
            ..DisplayConfig::default()
        },
        ..StackConfig::default()
    };
    let stack = Stack::start(cfg.clone(), Site::from_dir(&asset_dir()).unwrap()).unwrap();
    let out = run_demo(
        &stack,
        &DemoConfig {
            page: page.into(),
            script: parse_script(script).unwrap(),
            stack: cfg,
        },
    )
    .unwrap();
    stack.shutdown();
    let code = out.exit_code();
    (out.transcript, code)
}

#[test]
fn click_transcript_is_deterministic() {
    let script = std::fs::read_to_string(asset_dir().join("scripts/click.events")).unwrap();
    let a = run("click.html", &script, 32);
    let b = run("click.html", &script, 32);
    assert_eq!(a, b);
    assert_eq!(a.1, 0);
    assert!(
        a.0.ends_with("DrawString \"Click!\" 40 25\nDrawString \"Click!\" 5 90\n"),
        "{}",
        a.0
    );
}

#[test]
fn widgets_button_updates_label() {
    let script = std::fs::read_to_string(asset_dir().join("scripts/widgets.events")).unwrap();
    let (t, code) = run("widgets.html", &script, 32);
    assert_eq!(code, 0, "{t}");
}

#[test]
fn flood_is_cut_off_without_failing_the_demo() {
    let (t, code) = run("flood.html", "", 8);
    assert!(t.contains("windows created=8 refused=1"), "{t}");
    assert!(t.contains("BUDGET_EXCEEDED"), "{t}");
    assert_eq!(code, 0);
}

#[test]
fn crashing_applet_leaves_sibling_working() {
    let (t, code) = run("crash.html", "mouse-clicked 7 8 1\n", 32);
    assert!(t.contains("divide by zero"), "{t}");
    assert!(t.contains("DrawString \"Click!\" 7 8"), "{t}");
    assert_eq!(code, 1);
}

#[test]
fn unverifiable_bundle_is_rejected_by_proxy() {
    let (t, code) = run("sneaky.html", "", 32);
    assert!(t.contains("rejected:") && t.contains("net/Socket"), "{t}");
    assert_eq!(code, 1);
}

#[test]
fn gallery_draws_original_and_filtered() {
    let (t, code) = run("gallery.html", "", 32);
    assert_eq!(code, 0, "{t}");
    assert!(t.contains("DrawImage"), "{t}");
}
