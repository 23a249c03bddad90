//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remote_playground::demo::{self, asset_dir, parse_script, DemoConfig, Site, Stack, StackConfig};
use remote_playground::display::{Delivery, Display, DisplayConfig, DrawCommand, Image, InputEvent};
use remote_playground::mcf::classfile::{parse_attempts, serialize_classfile, MAGIC};
use remote_playground::mcf::vm::vms_created;
use remote_playground::mcf::{assemble_bundle, parse_classfile, Bundle, ConstantPoolEntry};
use remote_playground::playground::control::{self, AppletLoad, LoadPage};
use remote_playground::playground::{CapabilityPolicy, ConnectRecord};
use remote_playground::proxy::http::{self, Request};
use remote_playground::proxy::Mode;
use remote_playground::rewrite::{rewrite_bundle, NameMap};
use remote_playground::rop::{
    decode_message, encode_message, Direction, Endpoint, FaultCode, IncomingCall, Message, RemoteFault, RemoteRef,
    RopError, Tap, WireValue,
};
use remote_playground::stubs::AppletStatus;

type Check = Result<String, String>;
type Criterion = (&'static str, fn(&mut Ctx) -> Check);

#[derive(Default)]
struct Ctx {
    /// Audit records and the policy in force, per stack used.
    audits: Vec<(Vec<ConnectRecord>, CapabilityPolicy)>,
    corpus: Vec<Vec<u8>>,
}

impl Ctx {
    fn retire(&mut self, st: Stack) {
        st.shutdown();
        self.audits
            .push((st.playground.audit().records(), st.playground.policy().clone()));
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn site() -> Site {
    Site::from_dir(&asset_dir()).expect("assets load")
}

fn stack(f: impl FnOnce(&mut StackConfig)) -> Stack {
    let mut cfg = StackConfig {
        seed: Some(11),
        ..StackConfig::default()
    };
    f(&mut cfg);
    Stack::start(cfg, site()).expect("stack starts")
}

fn stack_with(site: Site, f: impl FnOnce(&mut StackConfig)) -> Stack {
    let mut cfg = StackConfig {
        seed: Some(11),
        ..StackConfig::default()
    };
    f(&mut cfg);
    Stack::start(cfg, site).expect("stack starts")
}

fn draw_string(x: i32, y: i32) -> DrawCommand {
    DrawCommand::DrawString {
        text: "Click!".into(),
        x,
        y,
    }
}

fn click_end_to_end(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let st = stack(|_| {});
    let cfg = DemoConfig {
        page: "click.html".into(),
        script: parse_script("mouse-clicked 40 25\nmouse-clicked 5 90\n").map_err(|e| e.to_string())?,
        stack: StackConfig::default(),
    };
    let out = demo::run_demo(&st, &cfg).map_err(|e| e.to_string())?;
    let sessions = st.display.sessions();
    ensure(sessions.len() == 1, || format!("{} sessions", sessions.len()))?;
    let log: Vec<DrawCommand> = st
        .display
        .draw_log(&sessions[0])
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| e.cmd)
        .collect();
    ctx.retire(st);
    let elapsed = t.elapsed();
    ensure(log == vec![draw_string(40, 25), draw_string(5, 90)], || {
        format!("draw log {log:?}")
    })?;
    ensure(out.transcript.ends_with("DrawString \"Click!\" 5 90\n"), || {
        out.transcript.clone()
    })?;
    ensure(out.exit_code() == 0, || "demo exit code nonzero".into())?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("2 draws in order, {:.2}s", elapsed.as_secs_f64()))
}

// Reference substitution, written against the format rather than the
// rewriter's helpers.
const RULES: [(&str, &str); 9] = [
    ("applet/Applet", "pgawt/PGApplet"),
    ("awt/Button", "pgawt/PGButton"),
    ("awt/Frame", "pgawt/PGFrame"),
    ("awt/Label", "pgawt/PGLabel"),
    ("awt/TextField", "pgawt/PGTextField"),
    ("awt/Graphics", "pgawt/PGGraphics"),
    ("awt/Image", "pgawt/PGImage"),
    ("awt/event/MouseEvent", "pgawt/PGMouseEvent"),
    ("awt/image/RGBImageFilter", "pgawt/PGRGBImageFilter"),
];

fn oracle_name(name: &str) -> Option<String> {
    RULES.iter().find_map(|(from, to)| {
        if name == *from {
            Some(to.to_string())
        } else {
            name.strip_prefix(from)
                .filter(|rest| rest.starts_with('/'))
                .map(|rest| format!("{to}{rest}"))
        }
    })
}

/// One type at the head of `s`: mapped text and the remainder.
fn oracle_type(s: &str) -> Option<(String, &str)> {
    match s.as_bytes().first()? {
        b'I' | b'D' | b'Z' => Some((s[..1].to_string(), &s[1..])),
        b'L' => {
            let end = s.find(';')?;
            let name = &s[1..end];
            if name.is_empty() || name.contains('(') || name.contains(')') {
                return None;
            }
            let mapped = oracle_name(name).unwrap_or_else(|| name.to_string());
            Some((format!("L{mapped};"), &s[end + 1..]))
        }
        _ => None,
    }
}

/// `Some` when `s` is a descriptor, with class names substituted.
fn oracle_descriptor(s: &str) -> Option<String> {
    if let Some(mut rest) = s.strip_prefix('(') {
        let mut out = String::from("(");
        while !rest.starts_with(')') {
            let (t, r) = oracle_type(rest)?;
            out += &t;
            rest = r;
        }
        rest = &rest[1..];
        out.push(')');
        if rest == "V" {
            out.push('V');
        } else {
            let (t, r) = oracle_type(rest)?;
            if !r.is_empty() {
                return None;
            }
            out += &t;
        }
        return Some(out);
    }
    match oracle_type(s)? {
        (t, "") if s.starts_with('L') => Some(t),
        _ => None,
    }
}

fn oracle_utf8(s: &str) -> Option<String> {
    match oracle_descriptor(s) {
        Some(d) => (d != s).then_some(d),
        None => oracle_name(s),
    }
}

fn oracle_rewrite(bytes: &[u8]) -> Vec<u8> {
    let mut b = Bundle::parse(bytes).expect("corpus parses");
    for e in &mut b.entries {
        for c in &mut e.class.constant_pool {
            if let ConstantPoolEntry::Utf8(s) = c {
                if let Some(n) = oracle_utf8(s) {
                    *s = n;
                }
            }
        }
        if let Some(n) = oracle_name(&e.name) {
            e.name = n;
        }
    }
    b.serialize().expect("oracle serializes")
}

fn pool_text(bytes: &[u8]) -> Vec<String> {
    let b = Bundle::parse(bytes).expect("parses");
    b.entries
        .iter()
        .flat_map(|e| {
            let cf = &e.class;
            std::iter::once(format!("class {}", e.name)).chain(cf.constant_pool.iter().map(move |c| c.describe(cf)))
        })
        .collect()
}

fn code_bytes(bytes: &[u8]) -> Vec<Vec<u8>> {
    let b = Bundle::parse(bytes).expect("parses");
    b.entries
        .iter()
        .flat_map(|e| e.class.methods.iter().map(|m| m.code.clone()))
        .collect()
}

fn generated_source(rng: &mut ChaCha8Rng, n: usize) -> String {
    const SUPERS: [&str; 5] = [
        "applet/Applet",
        "lang/Object",
        "awt/Frame",
        "my/Base",
        "awt/image/RGBImageFilter",
    ];
    const TYPES: [&str; 9] = [
        "I",
        "Z",
        "D",
        "Lawt/Graphics;",
        "Lawt/FrameSet;",
        "Lawt/Frame/Inner;",
        "Lawt/image/RGBImageFilter;",
        "Lmy/Thing;",
        "Llang/String;",
    ];
    const CLASSES: [&str; 8] = [
        "awt/Button",
        "awt/Label",
        "awt/TextField",
        "awt/event/MouseEvent",
        "my/Thing",
        "awt/Frame",
        "awt/Framework",
        "awt/Image",
    ];
    const STRINGS: [&str; 6] = [
        "Click!",
        "awt/Button",
        "Lawt/Frame;",
        "(Lawt/Image;)V",
        "hello world",
        "awt/Frame/x",
    ];
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    let mut s = String::new();
    let _ = writeln!(s, "# generated {n}");
    let classes = rng.random_range(1..=3);
    for c in 0..classes {
        let _ = writeln!(s, ".class gen/C{n}x{c} extends {}", pick(rng, &SUPERS));
        for f in 0..rng.random_range(0..3) {
            let _ = writeln!(s, ".field f{f} {}", pick(rng, &TYPES));
        }
        for m in 0..rng.random_range(1..4) {
            let params: String = (0..rng.random_range(0..3)).map(|_| pick(rng, &TYPES)).collect();
            let ret = if rng.random_bool(0.5) {
                "V".to_string()
            } else {
                pick(rng, &TYPES).to_string()
            };
            if rng.random_bool(0.2) {
                let _ = writeln!(s, ".method native m{m} ({params}){ret}");
                continue;
            }
            let _ = writeln!(s, ".method m{m} ({params}){ret} 4 4");
            for _ in 0..rng.random_range(1..6) {
                match rng.random_range(0..5) {
                    0 => {
                        let _ = writeln!(s, "    SCONST \"{}\"\n    POP", pick(rng, &STRINGS));
                    }
                    1 => {
                        let _ = writeln!(s, "    NEW {}\n    POP", pick(rng, &CLASSES));
                    }
                    2 => {
                        let _ = writeln!(s, "    ICONST {}\n    POP", rng.random::<i32>());
                    }
                    3 => {
                        let p: String = (0..rng.random_range(0..3)).map(|_| pick(rng, &TYPES)).collect();
                        let _ = writeln!(s, "    INVOKE {}.call ({p})V", pick(rng, &CLASSES));
                    }
                    _ => {
                        let _ = writeln!(
                            s,
                            "    LOAD 0\n    GETF {}.slot {}\n    POP",
                            pick(rng, &CLASSES),
                            pick(rng, &TYPES)
                        );
                    }
                }
            }
            let _ = writeln!(s, "    RET");
        }
    }
    s
}

fn build_corpus() -> Vec<Vec<u8>> {
    let mut corpus = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(asset_dir().join("applets"))
        .expect("applets dir")
        .map(|e| e.expect("entry").path())
        .collect();
    names.sort();
    for p in names {
        corpus.push(demo::assemble_file(&p).expect("asset assembles"));
    }
    corpus.push(
        remote_playground::stubs::pgawt_bundle()
            .serialize()
            .expect("stubs serialize"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 0..24 {
        let src = generated_source(&mut rng, n);
        let b = assemble_bundle(&src).unwrap_or_else(|e| panic!("generated source {n}: {e}\n{src}"));
        corpus.push(b.serialize().expect("serializes"));
    }
    corpus
}

fn rewriter_correctness(ctx: &mut Ctx) -> Check {
    let corpus = build_corpus();
    let map = NameMap::default();
    let t = Instant::now();
    let mut subs = 0;
    for (i, bytes) in corpus.iter().enumerate() {
        let (out, report) = rewrite_bundle(bytes, &map).map_err(|e| format!("bundle {i}: {e}"))?;
        subs += report.substitution_count();
        let expect = oracle_rewrite(bytes);
        ensure(pool_text(&out) == pool_text(&expect), || {
            format!("bundle {i}: constant pool differs from oracle")
        })?;
        ensure(out == expect, || format!("bundle {i}: bytes differ from oracle"))?;
        ensure(code_bytes(&out) == code_bytes(bytes), || {
            format!("bundle {i}: code bytes changed")
        })?;
        let (again, r2) = rewrite_bundle(&out, &map).map_err(|e| e.to_string())?;
        ensure(again == out && r2.substitution_count() == 0, || {
            format!("bundle {i}: not idempotent")
        })?;
        ctx.corpus.push(out);
    }
    let elapsed = t.elapsed();
    ctx.corpus.extend(corpus.iter().cloned());
    ensure(corpus.len() >= 10, || format!("corpus has {} bundles", corpus.len()))?;
    ensure(subs > 0, || "corpus exercised no substitutions".into())?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} bundles, {subs} substitutions, {:.3}s",
        corpus.len(),
        elapsed.as_secs_f64()
    ))
}

fn multi_applet_addressing(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let st = stack(|_| {});
    let page = st.open("multi.html").map_err(|e| e.to_string())?;
    let addrs: HashSet<&str> = page.surfaces.iter().map(|s| s.address.as_str()).collect();
    ensure(page.surfaces.len() == 3 && addrs.len() == 3, || {
        format!("{} surfaces, {} distinct addresses", page.surfaces.len(), addrs.len())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut expected: Vec<Vec<DrawCommand>> = vec![Vec::new(); 3];
    for round in 0..100 {
        let mut evs: Vec<(usize, i32, i32)> = (0..3)
            .flat_map(|k| (0..2).map(move |j| (k, 1000 * k as i32 + round, j)))
            .collect();
        evs.shuffle(&mut rng);
        for (k, x, y) in evs {
            let d = st.display.inject(&page.surfaces[k].address, InputEvent::click(x, y));
            ensure(d == Ok(Delivery::Delivered { listeners: 1 }), || {
                format!("round {round} surface {k}: {d:?}")
            })?;
            expected[k].push(draw_string(x, y));
        }
    }
    for (k, s) in page.surfaces.iter().enumerate() {
        let log: Vec<DrawCommand> = st
            .display
            .draw_log(&s.address)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|e| e.cmd)
            .collect();
        ensure(log == expected[k], || {
            format!("surface {k} log diverges ({} entries)", log.len())
        })?;
    }
    ctx.retire(st);
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "3 addresses, 600 events over 100 orders, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn random_value(rng: &mut ChaCha8Rng, code: &[u8]) -> WireValue {
    match rng.random_range(0..7) {
        0 => WireValue::Null,
        1 => WireValue::I32(rng.random()),
        2 => WireValue::F64(rng.random()),
        3 => WireValue::Bool(rng.random()),
        4 => WireValue::Str(["pg", "http://o/x.mcfb", "defineClass", "Frame", ""][rng.random_range(0..5)].into()),
        5 => WireValue::Bytes(code.to_vec()),
        _ => WireValue::Remote(RemoteRef {
            endpoint: "evil".into(),
            object_id: rng.random_range(0..64),
            interface: "ClassLoader".into(),
        }),
    }
}

fn fuzz_frame(rng: &mut ChaCha8Rng, code: &[u8], server: u64) -> Vec<u8> {
    const METHODS: [&str; 12] = [
        "constructFrame",
        "construct",
        "getImage",
        "filterImage",
        "add",
        "drawString",
        "defineClass",
        "loadClass",
        "injectEvent",
        "getBrowserGraphics",
        "addPGMouseListener",
        "setText",
    ];
    match rng.random_range(0..4) {
        0 => {
            let n = rng.random_range(0..48usize);
            let mut f = (n as u32).to_be_bytes().to_vec();
            f.extend((0..n).map(|_| rng.random::<u8>()));
            f
        }
        1 | 2 => {
            let args = (0..rng.random_range(0..4)).map(|_| random_value(rng, code)).collect();
            let target = if rng.random_bool(0.5) {
                server
            } else {
                rng.random_range(0..64)
            };
            encode_message(&Message::Invoke {
                call_id: rng.random_range(1..1 << 20),
                target,
                method: METHODS[rng.random_range(0..METHODS.len())].into(),
                args,
            })
        }
        _ => {
            let mut f = encode_message(&Message::Invoke {
                call_id: 1,
                target: server,
                method: "defineClass".into(),
                args: vec![WireValue::Bytes(code.to_vec())],
            });
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..f.len());
                f[i] ^= 1 << rng.random_range(0..8);
            }
            f
        }
    }
}

fn drain(s: &TcpStream) {
    if let Ok(mut r) = s.try_clone() {
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while matches!(r.read(&mut buf), Ok(n) if n > 0) {}
        });
    }
}

fn class_loading_prevention(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let mut notes = Vec::new();

    // Unverified code reaching the playground directly still cannot load
    // anything outside the stubs.
    let st = stack(|_| {});
    let addr = "pg-direct-sneaky";
    st.display.open_session(addr, 50, 50).map_err(|e| e.to_string())?;
    let raw = demo::assemble_file(&asset_dir().join("applets/sneaky.mcfa")).map_err(|e| e.to_string())?;
    let (bundle, _) = rewrite_bundle(&raw, &NameMap::default()).map_err(|e| e.to_string())?;
    let load = LoadPage {
        page_id: "direct-1".into(),
        registry: st.display.endpoint().unwrap_or_default(),
        applets: vec![AppletLoad {
            name: String::new(),
            address: addr.into(),
            codebase: st.url("/"),
            bundle,
            params: vec![("ContactAddress".into(), addr.into())],
        }],
    };
    control::send_load(&st.playground.endpoint().unwrap_or_default(), &load).map_err(|e| e.to_string())?;
    let snap = st
        .playground
        .wait_settled("direct-1", Duration::from_secs(10))
        .ok_or("page missing")?;
    let a = &snap.applets[0];
    ensure(
        a.status == AppletStatus::Faulted && a.detail.contains("class not found: net/Socket"),
        || format!("applet {} {}", a.status, a.detail),
    )?;
    notes.push(format!("direct load faulted ({})", a.detail));
    let page = st.open("sneaky.html").map_err(|e| e.to_string())?;
    ensure(page.pages == vec![None], || {
        "proxy forwarded an unverifiable bundle".into()
    })?;
    ctx.retire(st);

    // Decoder fuzz against a bare display.
    let display = Display::new(DisplayConfig::default());
    let ep = display.listen("127.0.0.1:0").map_err(|e| e.to_string())?.to_string();
    let session = "pg-fuzz";
    let server = display
        .open_session(session, 100, 100)
        .map_err(|e| e.to_string())?
        .object_id;
    let code = raw.clone();
    let (vms0, parsed0) = (vms_created(), parse_attempts());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let connect_scoped = || -> Result<TcpStream, String> {
        let mut s = TcpStream::connect(&ep).map_err(|e| e.to_string())?;
        s.write_all(&encode_message(&Message::Lookup {
            address: session.into(),
        }))
        .map_err(|e| e.to_string())?;
        drain(&s);
        Ok(s)
    };
    let mut scoped = connect_scoped()?;
    let (mut decoded, mut malformed) = (0, 0);
    for _ in 0..10_000 {
        let f = fuzz_frame(&mut rng, &code, server);
        if decode_message(&f).is_ok() {
            decoded += 1;
            if scoped.write_all(&f).is_err() {
                scoped = connect_scoped()?;
            }
        } else {
            malformed += 1;
            let mut s = connect_scoped()?;
            let _ = s.write_all(&f);
        }
    }
    drop(scoped);
    let mut probe: Endpoint<()> = Endpoint::new("probe");
    let conn = probe.connect(&ep).map_err(|e| e.to_string())?;
    let alive = probe.lookup_once(conn, session).map_err(|e| e.to_string())?;
    ensure(alive.is_some(), || "display stopped answering".into())?;
    let images = display.image_count(session).map_err(|e| e.to_string())?;
    ensure(vms_created() == vms0, || "a VM was created during the fuzz".into())?;
    ensure(parse_attempts() == parsed0, || {
        "a classfile parse ran during the fuzz".into()
    })?;
    ensure(images == 0, || format!("{images} images materialized"))?;
    notes.push(format!(
        "fuzz {decoded} well-formed + {malformed} malformed frames, 0 code paths"
    ));

    // Trusted proxy in front of a display client.
    let (leaks, blocked, total) = trusted_corpus(ctx)?;
    ensure(leaks == 0, || {
        format!("{leaks} of {total} responses leaked mobile code")
    })?;
    notes.push(format!("trusted {total} requests, {blocked} blocked, 0 leaks"));
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{}; {:.2}s", notes.join("; "), elapsed.as_secs_f64()))
}

fn trusted_corpus(ctx: &mut Ctx) -> Result<(usize, usize, usize), String> {
    let bundle = demo::assemble_file(&asset_dir().join("applets/click.mcfa")).map_err(|e| e.to_string())?;
    let class = serialize_classfile(&Bundle::parse(&bundle).map_err(|e| e.to_string())?.entries[0].class)
        .map_err(|e| e.to_string())?;
    let mut png_with_class = b"\x89PNG\r\n\x1a\n".to_vec();
    png_with_class.extend_from_slice(&class);
    let mut junk_then_bundle = b"GIF89a..".to_vec();
    junk_then_bundle.extend_from_slice(&bundle);
    let mut html_with_class = b"<html><body><pre>".to_vec();
    html_with_class.extend_from_slice(&class);
    let bodies: Vec<Vec<u8>> = vec![
        class.clone(),
        bundle.clone(),
        png_with_class,
        junk_then_bundle,
        html_with_class,
        MAGIC.to_vec(),
        [&bundle[..], b"trailer"].concat(),
    ];
    let exts = [
        ".mcfb",
        ".mcfc",
        ".MCFB",
        ".png",
        ".html",
        ".txt",
        "",
        ".mcfb.png",
        ".htm",
        ".bin",
        ".js",
    ];
    let mut site = Site::new();
    let mut paths = Vec::new();
    for i in 0..190 {
        let p = format!("adv/f{i}{}", exts[i % exts.len()]);
        site.insert(&p, bodies[i % bodies.len()].clone());
        let q = if i % 3 == 0 { "?v=1.png" } else { "" };
        paths.push(format!("{p}{q}"));
    }
    site.insert("ok/logo.png", b"\x89PNG\r\n\x1a\nplain".to_vec());
    let st = stack_with(site, |c| c.mode = Mode::Trusted);
    let (mut leaks, mut blocked, mut total) = (0, 0, 0);
    let mut judge = |status: u16, body: &[u8]| {
        total += 1;
        if status == 200 && body.windows(4).any(|w| w == MAGIC) {
            leaks += 1;
        }
        if status == 403 {
            blocked += 1;
        }
    };
    for p in &paths {
        let r = http::get(&st.url(p), Some(&st.proxy_addr), &[]).map_err(|e| e.to_string())?;
        judge(r.status, &r.body);
    }
    for p in &paths[..5] {
        let r = http::get(&st.url(p), Some(&st.proxy_addr), &[("X-Playground-Token", "guess")])
            .map_err(|e| e.to_string())?;
        judge(r.status, &r.body);
    }
    for p in &paths[..5] {
        let target = format!("/bundle?url={}", st.url(p));
        let r = http::exchange(&st.proxy_addr, &Request::get(&target)).map_err(|e| e.to_string())?;
        judge(r.status, &r.body);
    }
    let ok = http::get(&st.url("ok/logo.png"), Some(&st.proxy_addr), &[]).map_err(|e| e.to_string())?;
    ensure(ok.status == 200, || format!("benign image got {}", ok.status))?;
    ctx.retire(st);
    Ok((leaks, blocked, total))
}

#[derive(Debug, Clone)]
enum Step {
    Operand(&'static str, i32),
    Op(&'static str),
}

fn filter_program(rng: &mut ChaCha8Rng) -> Vec<Step> {
    let mut p = Vec::new();
    for _ in 0..rng.random_range(1..5) {
        let op = ["IADD", "ISUB", "IMUL", "IDIV"][rng.random_range(0..4)];
        let operand = if op == "IDIV" {
            let mut k = rng.random_range(2..40);
            if rng.random_bool(0.5) {
                k = -k;
            }
            Step::Operand("ICONST", k)
        } else {
            match rng.random_range(0..4) {
                0 => Step::Operand("LOAD", 1),
                1 => Step::Operand("LOAD", 2),
                2 => Step::Operand("LOAD", 3),
                _ => Step::Operand("ICONST", rng.random_range(-70000..70000)),
            }
        };
        p.push(operand);
        p.push(Step::Op(op));
    }
    p
}

fn eval_filter(p: &[Step], x: i32, y: i32, rgb: u32) -> u32 {
    let mut acc = rgb as i32;
    let mut operand = 0;
    for s in p {
        match *s {
            Step::Operand("LOAD", 1) => operand = x,
            Step::Operand("LOAD", 2) => operand = y,
            Step::Operand("LOAD", _) => operand = rgb as i32,
            Step::Operand(_, k) => operand = k,
            Step::Op("IADD") => acc = acc.wrapping_add(operand),
            Step::Op("ISUB") => acc = acc.wrapping_sub(operand),
            Step::Op("IMUL") => acc = acc.wrapping_mul(operand),
            Step::Op(_) => acc = acc.wrapping_div(operand),
        }
    }
    acc as u32 & 0xFF_FFFF
}

fn filter_applet(name: &str, image: &str, body: &str) -> String {
    format!(
        ".class {name} extends applet/Applet
.method init ()V 5 3
    LOAD 0
    LOAD 0
    INVOKE applet/Applet.getCodeBase ()Llang/String;
    SCONST \"{image}\"
    INVOKE applet/Applet.getImage (Llang/String;Llang/String;)Lawt/Image;
    STORE 1
    LOAD 0
    LOAD 1
    NEW {name}Filter
    INVOKE applet/Applet.createFilteredImage (Lawt/Image;Lawt/image/RGBImageFilter;)Lawt/Image;
    STORE 2
    RET
.class {name}Filter extends awt/image/RGBImageFilter
.method filterRGB (III)I 4 4
    LOAD 3
{body}    RETV
"
    )
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    if rng.random_bool(0.5) {
        let c = rng.random_range(1..=24usize);
        let cmap = (0..c).map(|_| rng.random::<u32>() & 0xFF_FFFF).collect();
        let (w, h) = (rng.random_range(1..10u16), rng.random_range(1..10u16));
        let idx = (0..w as usize * h as usize)
            .map(|_| rng.random_range(0..c) as u8)
            .collect();
        Image::indexed(w, h, cmap, idx)
    } else {
        let (w, h) = (rng.random_range(1..7u16), rng.random_range(1..7u16));
        let px = (0..w as usize * h as usize)
            .map(|_| rng.random::<u32>() & 0xFF_FFFF)
            .collect();
        Image::direct(w, h, px)
    }
}

fn filter_callbacks(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut site = site();
    let mut cases = Vec::new();
    for i in 0..50 {
        let img = random_image(&mut rng);
        let prog = filter_program(&mut rng);
        let body: String = prog
            .iter()
            .map(|s| match s {
                Step::Operand(op, k) => format!("    {op} {k}\n"),
                Step::Op(op) => format!("    {op}\n"),
            })
            .collect();
        let src = filter_applet(&format!("Pair{i}"), &format!("img{i}.mci"), &body);
        let b = assemble_bundle(&src).map_err(|e| format!("pair {i}: {e}"))?;
        site.insert(&format!("pair{i}.mcfb"), b.serialize().map_err(|e| e.to_string())?);
        site.insert(&format!("img{i}.mci"), img.encode());
        site.insert(
            &format!("pair{i}.html"),
            format!("<applet code=pair{i}.mcfb width=10 height=10></applet>"),
        );
        cases.push((img, prog));
    }
    // Faults on the fourth colormap entry, after three good callbacks.
    let bad_img = Image::indexed(2, 2, vec![0x10, 0x20, 0x30, 0x40, 0x50], vec![0, 1, 2, 3]);
    let bad_src = filter_applet(
        "Bad",
        "bad.mci",
        "    ICONST 1\n    LOAD 3\n    ICONST 64\n    ISUB\n    IDIV\n",
    );
    let b = assemble_bundle(&bad_src).map_err(|e| e.to_string())?;
    site.insert("bad.mcfb", b.serialize().map_err(|e| e.to_string())?);
    site.insert("bad.mci", bad_img.encode());
    site.insert("bad.html", "<applet code=bad.mcfb width=10 height=10></applet>");

    let st = stack_with(site, |_| {});
    for (i, (img, prog)) in cases.iter().enumerate() {
        let page = st.open(&format!("pair{i}.html")).map_err(|e| e.to_string())?;
        let addr = &page.surfaces[0].address;
        let snap = st.snapshot(&page, 0).ok_or("no snapshot")?;
        ensure(snap.applets[0].status == AppletStatus::Running, || {
            format!("pair {i}: {} {}", snap.applets[0].status, snap.applets[0].detail)
        })?;
        let got = st
            .display
            .image(addr, 1)
            .map_err(|e| e.to_string())?
            .ok_or("no filtered image")?;
        let want = match &img.colormap {
            Some(c) => Image {
                colormap: Some(c.iter().map(|&rgb| eval_filter(prog, -1, -1, rgb)).collect()),
                ..img.clone()
            },
            None => {
                let mut px = Vec::new();
                for y in 0..img.height {
                    for x in 0..img.width {
                        px.push(eval_filter(prog, x as i32, y as i32, img.rgb_at(x, y)));
                    }
                }
                Image::direct(img.width, img.height, px)
            }
        };
        ensure(got.to_rgb() == want.to_rgb() && got.colormap == want.colormap, || {
            format!("pair {i}: pixels differ from local oracle")
        })?;
        let calls = st.display.stats(addr).map_err(|e| e.to_string())?.filter_callbacks;
        let expect = match &img.colormap {
            Some(c) => c.len() as u64,
            None => img.width as u64 * img.height as u64,
        };
        ensure(calls == expect, || {
            format!("pair {i}: {calls} callbacks, expected {expect}")
        })?;
    }
    let page = st.open("bad.html").map_err(|e| e.to_string())?;
    let addr = &page.surfaces[0].address;
    let snap = st.snapshot(&page, 0).ok_or("no snapshot")?;
    let stored = st.display.image_count(addr).map_err(|e| e.to_string())?;
    let calls = st.display.stats(addr).map_err(|e| e.to_string())?.filter_callbacks;
    ensure(snap.applets[0].status == AppletStatus::Faulted, || {
        "faulting filter did not fault".into()
    })?;
    ensure(stored == 1 && calls == 4, || {
        format!("{stored} images stored after {calls} callbacks")
    })?;
    ctx.retire(st);
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "50 pairs pixel-exact, faulting filter stored nothing, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn window_flood_defense(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let st = stack(|c| c.display.max_windows = 8);
    let page = st.open("siege.html").map_err(|e| e.to_string())?;
    let (flood, sibling) = (&page.surfaces[0].address, &page.surfaces[1].address);
    let d = st.display.inject(sibling, InputEvent::click(1, 1));
    ensure(d == Ok(Delivery::Delivered { listeners: 1 }), || {
        format!("first sibling click {d:?}")
    })?;
    let ctx_id = st.display.draw_log(sibling).map_err(|e| e.to_string())?[0].ctx;
    let mut draws = 0;
    let mut refused_at = None;
    for round in 0..10 {
        match st.display.inject(flood, InputEvent::click(0, 0)) {
            Ok(Delivery::Delivered { .. }) => {}
            Ok(Delivery::Failed(_)) if refused_at.is_none() => refused_at = Some(round),
            Ok(Delivery::Failed(_)) => {}
            other => return Err(format!("flood click {round}: {other:?}")),
        }
        for j in 0..3 {
            let d = st.display.inject(sibling, InputEvent::click(10 + round, j));
            if d == Ok(Delivery::Delivered { listeners: 1 }) {
                draws += 1;
            }
        }
    }
    let b = st.display.budget();
    let log = st.display.draw_log(sibling).map_err(|e| e.to_string())?;
    let snap = st.snapshot(&page, 0).ok_or("no snapshot")?;
    let flood_report = &snap.applets[0];
    ensure(b.created == 8, || format!("{} windows created", b.created))?;
    ensure(refused_at == Some(8), || {
        format!("first refusal at round {refused_at:?}")
    })?;
    ensure(
        flood_report.status == AppletStatus::Faulted && flood_report.detail.contains("BUDGET_EXCEEDED"),
        || format!("flood applet {} {}", flood_report.status, flood_report.detail),
    )?;
    ensure(draws >= 20 && log.len() == draws + 1, || {
        format!("{draws} sibling draws, log {}", log.len())
    })?;
    ensure(log.iter().all(|e| e.ctx == ctx_id), || "sibling context changed".into())?;
    ctx.retire(st);

    let st = stack(|c| c.display.max_windows = 8);
    st.open("flood.html").map_err(|e| e.to_string())?;
    let b = st.display.budget();
    ensure(b.created == 8 && b.refused == 1, || {
        format!("init flood created {} refused {}", b.created, b.refused)
    })?;
    ctx.retire(st);
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "stopped after 8 windows, {draws} sibling draws on one context, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn value_strategy() -> impl Strategy<Value = WireValue> {
    prop_oneof![
        Just(WireValue::Null),
        any::<i32>().prop_map(WireValue::I32),
        any::<f64>().prop_map(WireValue::F64),
        any::<bool>().prop_map(WireValue::Bool),
        ".{0,24}".prop_map(WireValue::Str),
        proptest::collection::vec(any::<u8>(), 0..48).prop_map(WireValue::Bytes),
        ref_strategy().prop_map(WireValue::Remote),
    ]
}

fn ref_strategy() -> impl Strategy<Value = RemoteRef> {
    (".{0,16}", any::<u64>(), "[A-Za-z]{0,12}").prop_map(|(endpoint, object_id, interface)| RemoteRef {
        endpoint,
        object_id,
        interface,
    })
}

fn message_strategy() -> impl Strategy<Value = Message> {
    prop_oneof![
        (".{0,24}", ref_strategy()).prop_map(|(address, target)| Message::Bind { address, target }),
        Just(Message::BindAck),
        ".{0,24}".prop_map(|address| Message::Lookup { address }),
        proptest::option::of(ref_strategy()).prop_map(Message::LookupResult),
        (
            any::<u64>(),
            any::<u64>(),
            "[A-Za-z]{0,16}",
            proptest::collection::vec(value_strategy(), 0..6)
        )
            .prop_map(|(call_id, target, method, args)| Message::Invoke {
                call_id,
                target,
                method,
                args,
            }),
        (any::<u64>(), value_strategy()).prop_map(|(call_id, value)| Message::Result { call_id, value }),
        (any::<u64>(), 1u16..40, ".{0,24}").prop_map(|(call_id, code, detail)| Message::Fault {
            call_id,
            code: FaultCode::from_u16(code),
            detail,
        }),
    ]
}

fn nest_handler(ep: &mut Endpoint, call: &IncomingCall) -> Result<WireValue, RemoteFault> {
    let arg = |i: usize| match call.args.get(i) {
        Some(WireValue::I32(v)) => *v,
        _ => 0,
    };
    let (depth, seed) = (arg(0), arg(1));
    if call.method == "fail" {
        return Err(RemoteFault::new(FaultCode::AppletFault, format!("seed {seed}")));
    }
    let mut sum = 1;
    if depth > 0 {
        let fan = 1 + (seed as u32 % 2);
        for k in 0..fan {
            let s = seed.wrapping_mul(31).wrapping_add(k as i32 + 7);
            let method = if s % 5 == 0 { "fail" } else { "nest" };
            let r = ep.invoke_with(
                call.conn,
                1,
                method,
                vec![WireValue::I32(depth - 1), WireValue::I32(s)],
                &mut |ep, c| nest_handler(ep, c),
            );
            match r {
                Ok(WireValue::I32(v)) => sum += v,
                Ok(other) => return Err(RemoteFault::new(FaultCode::BadArguments, format!("{other:?}"))),
                Err(RopError::Fault(_)) => {}
                Err(e) => return Err(RemoteFault::new(FaultCode::Internal, e.to_string())),
            }
        }
    }
    Ok(WireValue::I32(sum))
}

/// Every Invoke sent on this side saw exactly one Result or Fault.
fn replies_balanced(tap: &Tap) -> Result<usize, String> {
    let log = tap.lock().unwrap();
    let mut sent = BTreeSet::new();
    let mut replies: BTreeMap<u64, usize> = BTreeMap::new();
    for (dir, m) in log.iter() {
        match (dir, m) {
            (Direction::Sent, Message::Invoke { call_id, .. }) => {
                sent.insert(*call_id);
            }
            (Direction::Received, Message::Result { call_id, .. } | Message::Fault { call_id, .. }) => {
                *replies.entry(*call_id).or_default() += 1;
            }
            _ => {}
        }
    }
    for id in &sent {
        let n = replies.get(id).copied().unwrap_or(0);
        ensure(n == 1, || format!("call {id} got {n} replies"))?;
    }
    ensure(replies.keys().all(|id| sent.contains(id)), || {
        "reply to an unknown call".into()
    })?;
    Ok(sent.len())
}

fn protocol_properties(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let cfg = Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new(cfg.clone());
    runner
        .run(&message_strategy(), |m| {
            let back = decode_message(&encode_message(&m)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, m);
            Ok(())
        })
        .map_err(|e| format!("message round trip: {e}"))?;
    let mut runner = TestRunner::new(cfg);
    runner
        .run(&value_strategy(), |v| {
            let m = Message::Result { call_id: 9, value: v };
            let back = decode_message(&encode_message(&m)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, m);
            Ok(())
        })
        .map_err(|e| format!("value round trip: {e}"))?;

    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?.to_string();
    let server_tap: Tap = Default::default();
    let st = server_tap.clone();
    let server = thread::spawn(move || {
        let (s, _) = listener.accept().expect("accept");
        let mut ep: Endpoint = Endpoint::new("nest-server");
        let conn = ep.attach_tcp(s).expect("attach");
        ep.set_tap(conn, st);
        while let Some(ev) = ep.next_event(None) {
            match ev {
                remote_playground::rop::Event::Invoke(call) => {
                    let r = nest_handler(&mut ep, &call);
                    let _ = ep.reply(&call, r);
                }
                remote_playground::rop::Event::Closed { .. } => break,
                _ => {}
            }
        }
    });
    let mut ep: Endpoint = Endpoint::new("nest-client");
    let conn = ep.connect(&addr).map_err(|e| e.to_string())?;
    let client_tap: Tap = Default::default();
    ep.set_tap(conn, client_tap.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let depth = rng.random_range(0..8);
        let seed = rng.random_range(0..1 << 20);
        let method = if rng.random_bool(0.1) { "fail" } else { "nest" };
        let _ = ep.invoke_with(
            conn,
            1,
            method,
            vec![WireValue::I32(depth), WireValue::I32(seed)],
            &mut |ep, c| nest_handler(ep, c),
        );
    }
    ep.close(conn);
    drop(ep);
    server.join().map_err(|_| "nest server panicked")?;
    let calls = replies_balanced(&client_tap)? + replies_balanced(&server_tap)?;

    let mut classes = 0;
    for bytes in &ctx.corpus {
        let b = Bundle::parse(bytes).map_err(|e| e.to_string())?;
        ensure(&b.serialize().map_err(|e| e.to_string())? == bytes, || {
            "bundle not byte-exact".into()
        })?;
        for e in &b.entries {
            let raw = serialize_classfile(&e.class).map_err(|e| e.to_string())?;
            let cf = parse_classfile(&raw).map_err(|e| e.to_string())?;
            ensure(serialize_classfile(&cf).map_err(|e| e.to_string())? == raw, || {
                format!("class {} not byte-exact", e.name)
            })?;
            classes += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "20000 round trips, {calls} nested invokes balanced, {classes} classfiles byte-exact, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn isolation(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let st = stack(|_| {});
    let (a, b) = thread::scope(|s| {
        let h1 = s.spawn(|| st.open("click.html"));
        let h2 = s.spawn(|| st.open("multi.html"));
        (h1.join(), h2.join())
    });
    let a = a.map_err(|_| "open panicked")?.map_err(|e| e.to_string())?;
    let b = b.map_err(|_| "open panicked")?.map_err(|e| e.to_string())?;
    let sa = st.snapshot(&a, 0).ok_or("no snapshot")?;
    let sb = st.snapshot(&b, 0).ok_or("no snapshot")?;
    ensure(sa.page_id != sb.page_id && sa.vm_id != sb.vm_id, || {
        "pages share a VM".into()
    })?;
    let disjoint = |x: &[String], y: &[String]| x.iter().all(|v| !y.contains(v));
    let ptrs = |s: &remote_playground::playground::PageSnapshot| {
        s.classes.iter().map(|(_, p)| p.to_string()).collect::<Vec<_>>()
    };
    ensure(!sa.classes.is_empty() && disjoint(&ptrs(&sa), &ptrs(&sb)), || {
        "pages share classes".into()
    })?;
    ensure(!sa.channels.is_empty() && disjoint(&sa.channels, &sb.channels), || {
        "pages share channels".into()
    })?;
    ensure(!sa.exported.is_empty() && disjoint(&sa.exported, &sb.exported), || {
        "pages share object ids".into()
    })?;
    let d = st.display.inject(&a.surfaces[0].address, InputEvent::click(3, 4));
    ensure(d == Ok(Delivery::Delivered { listeners: 1 }), || format!("{d:?}"))?;
    for s in &b.surfaces {
        let n = st.display.draw_log(&s.address).map_err(|e| e.to_string())?.len();
        ensure(n == 0, || "event crossed pages".into())?;
    }
    let expected: BTreeSet<String> = [st.display.endpoint().unwrap_or_default(), st.proxy_addr.clone()].into();
    ctx.retire(st);

    let mut dials = 0;
    for (records, policy) in &ctx.audits {
        for r in records.iter().filter(|r| r.allowed) {
            ensure(policy.check(&r.endpoint).is_ok(), || {
                format!("dialed {} outside policy", r.endpoint)
            })?;
            dials += 1;
        }
    }
    let last = &ctx.audits.last().ok_or("no audit")?.0;
    ensure(last.iter().all(|r| expected.contains(&r.endpoint)), || {
        format!("unexpected endpoint in {last:?}")
    })?;
    ensure(dials > 0, || "audit recorded nothing".into())?;
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{dials} audited dials all allowlisted; concurrent pages disjoint, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let criteria: [Criterion; 8] = [
        ("click end-to-end", click_end_to_end),
        ("rewriter correctness", rewriter_correctness),
        ("multi-applet addressing", multi_applet_addressing),
        ("class-loading prevention", class_loading_prevention),
        ("filter callbacks", filter_callbacks),
        ("window-flood defense", window_flood_defense),
        ("protocol properties", protocol_properties),
        ("isolation", isolation),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
