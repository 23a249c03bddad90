//! Command-line front end. Exit codes: 0 ok, 1 failure or faulted applet,
//! 2 usage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::demo::{self, DemoConfig, Site, Stack, StackConfig};
use crate::display::{Display, DisplayConfig, EventKind};
use crate::mcf::code::{disassemble, Instr};
use crate::mcf::vm::VmLimits;
use crate::mcf::{Bundle, ClassFile};
use crate::playground::{EndpointPattern, FetchConfig, Playground, PlaygroundConfig};
use crate::proxy::{Mode, Proxy, ProxyConfig};
use crate::rewrite::{rewrite_bundle, verify_rewritten, Allowlist, NameMap};
use crate::rop::{Endpoint, WireValue};

#[derive(Debug, Parser)]
#[command(name = "playground", version, about = "Run untrusted applets on a remote playground")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the rewriting HTTP proxy.
    ServeProxy(ServeProxy),
    /// Run the playground that executes applets.
    ServePlayground(ServePlayground),
    /// Run the graphics server with its registry and terminal bridge.
    ServeDisplay(ServeDisplay),
    /// Run every service in-process and open a page.
    Demo(DemoArgs),
    /// Rewrite a bundle for the playground.
    Rewrite(RewriteArgs),
    /// Print the contents of a bundle or classfile.
    Inspect { path: PathBuf },
    /// Assemble `.mcfa` source into a bundle.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Send one input event to a display session over its bridge.
    Inject(InjectArgs),
    /// Print a display session's draw log.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct ServeProxy {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    #[arg(long, default_value = "untrusted")]
    pub mode: Mode,
    /// Playground control endpoint.
    #[arg(long)]
    pub playground: Option<String>,
    /// Registry endpoint handed to the playground.
    #[arg(long)]
    pub registry: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "playground")]
    pub token: String,
}

#[derive(Debug, Args)]
pub struct ServePlayground {
    #[arg(long, default_value = "127.0.0.1:7100")]
    pub listen: String,
    #[arg(long)]
    pub registry: Option<String>,
    /// Extra endpoint patterns applets may reach.
    #[arg(long)]
    pub allow: Vec<EndpointPattern>,
    /// Fetch missing classes through this proxy.
    #[arg(long)]
    pub fetch_proxy: Option<String>,
    #[arg(long, default_value = "playground")]
    pub token: String,
    #[arg(long, default_value_t = VmLimits::default().fuel)]
    pub fuel: u64,
    #[arg(long, default_value_t = 10_000)]
    pub lookup_timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct DisplayOpts {
    #[arg(long, default_value_t = 32)]
    pub max_windows: usize,
    #[arg(long, default_value_t = 4.0)]
    pub max_window_rate: f64,
    #[arg(long)]
    pub eager_event_copy: bool,
    #[arg(long)]
    pub per_pixel_filter: bool,
}

impl DisplayOpts {
    fn config(&self) -> DisplayConfig {
        DisplayConfig {
            max_windows: self.max_windows,
            max_window_rate: self.max_window_rate,
            eager_event_copy: self.eager_event_copy,
            per_pixel_filter: self.per_pixel_filter,
            ..DisplayConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeDisplay {
    #[arg(long, default_value = "127.0.0.1:7000")]
    pub listen: String,
    #[arg(long, default_value = "127.0.0.1:7001")]
    pub bridge: String,
    /// HTTP proxy for image fetches.
    #[arg(long)]
    pub proxy: Option<String>,
    #[command(flatten)]
    pub display: DisplayOpts,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Page file, e.g. `pages/click.html`.
    pub page: PathBuf,
    /// Event script to replay.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Replay the script and exit instead of serving.
    #[arg(long)]
    pub headless: bool,
    /// Directory served by the origin; defaults to the page's asset tree.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[arg(long, default_value = "untrusted")]
    pub mode: Mode,
    /// Seed for ContactAddress generation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub proxy_port: u16,
    #[arg(long, default_value_t = 0)]
    pub playground_port: u16,
    #[arg(long, default_value_t = 0)]
    pub display_port: u16,
    #[arg(long, default_value_t = 0)]
    pub bridge_port: u16,
    #[command(flatten)]
    pub display: DisplayOpts,
}

#[derive(Debug, Args)]
pub struct RewriteArgs {
    pub bundle: PathBuf,
    /// Output path; defaults to `<name>.pg.mcfb` next to the input.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[arg(long, default_value = "127.0.0.1:7001")]
    pub bridge: String,
    pub address: String,
    /// mouse-clicked, mouse-pressed, mouse-released or action.
    pub kind: EventKind,
    #[arg(allow_negative_numbers = true)]
    pub x: i32,
    #[arg(allow_negative_numbers = true)]
    pub y: i32,
    /// Widget id for action events.
    #[arg(default_value_t = 0)]
    pub target: i32,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long, default_value = "127.0.0.1:7001")]
    pub bridge: String,
    pub address: String,
    /// Also print the widget tree and session counters.
    #[arg(long)]
    pub all: bool,
}

/// Run a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let r = match cli.command {
        Command::ServeProxy(a) => serve_proxy(a),
        Command::ServePlayground(a) => serve_playground(a),
        Command::ServeDisplay(a) => serve_display(a),
        Command::Demo(a) => return run_demo(a),
        Command::Rewrite(a) => rewrite(a),
        Command::Inspect { path } => std::fs::read(&path)
            .map_err(|e| format!("{}: {e}", path.display()))
            .and_then(|b| inspect_text(&b))
            .map(|t| print!("{t}")),
        Command::Asm { source, out } => asm(&source, out),
        Command::Inject(a) => inject(a),
        Command::Dump(a) => dump(a),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn park() -> ! {
    loop {
        thread::park();
    }
}

fn serve_proxy(a: ServeProxy) -> Result<(), String> {
    let p = Proxy::new(ProxyConfig {
        mode: a.mode,
        playground: a.playground,
        registry: a.registry,
        seed: a.seed,
        playground_token: a.token,
        ..ProxyConfig::default()
    });
    let addr = p.listen(&a.listen).map_err(|e| e.to_string())?;
    println!("proxy listening on {addr} ({} mode)", a.mode);
    park()
}

fn serve_playground(a: ServePlayground) -> Result<(), String> {
    let pg = Playground::new(PlaygroundConfig {
        registry: a.registry,
        allow: a.allow,
        lookup_timeout: Duration::from_millis(a.lookup_timeout_ms),
        limits: VmLimits {
            fuel: a.fuel,
            ..VmLimits::default()
        },
        fetch: a.fetch_proxy.map(|proxy| FetchConfig { proxy, token: a.token }),
        ..PlaygroundConfig::default()
    });
    let addr = pg.listen(&a.listen).map_err(|e| e.to_string())?;
    println!("playground listening on {addr}");
    park()
}

fn serve_display(a: ServeDisplay) -> Result<(), String> {
    let mut cfg = a.display.config();
    cfg.proxy = a.proxy;
    let d = Display::new(cfg);
    let addr = d.listen(&a.listen).map_err(|e| e.to_string())?;
    let bridge = d.listen_bridge(&a.bridge).map_err(|e| e.to_string())?;
    println!("display and registry on {addr}, bridge on {bridge}");
    park()
}

/// Where to find a path given on the command line: as given, else inside
/// the bundled assets, else in one of their subdirectories.
fn locate(p: &Path) -> PathBuf {
    if p.exists() {
        return p.to_path_buf();
    }
    let root = demo::asset_dir();
    ["", "pages", "scripts"]
        .iter()
        .map(|d| root.join(d).join(p))
        .find(|c| c.exists())
        .unwrap_or_else(|| p.to_path_buf())
}

fn run_demo(a: DemoArgs) -> i32 {
    match demo_inner(a) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn demo_inner(a: DemoArgs) -> Result<i32, String> {
    let ports = [a.proxy_port, a.playground_port, a.display_port, a.bridge_port];
    for (i, p) in ports.iter().enumerate() {
        if *p != 0 && ports[..i].contains(p) {
            eprintln!("error: port {p} given twice");
            return Ok(2);
        }
    }
    let page = locate(&a.page);
    if !page.is_file() {
        return Err(format!("{}: no such page", a.page.display()));
    }
    let assets = match a.assets {
        Some(d) => d,
        None => {
            let dir = page.parent().unwrap_or(Path::new(".")).to_path_buf();
            match dir.parent() {
                Some(up) if dir.file_name().is_some_and(|n| n == "pages") => up.to_path_buf(),
                _ => dir,
            }
        }
    };
    let site = Site::from_dir(&assets).map_err(|e| e.to_string())?;
    let script = match &a.script {
        Some(p) => {
            let p = locate(p);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            demo::parse_script(&text).map_err(|e| e.to_string())?
        }
        None => Vec::new(),
    };
    let addr = |p: u16| format!("127.0.0.1:{p}");
    let cfg = StackConfig {
        mode: a.mode,
        seed: a.seed,
        display: a.display.config(),
        proxy_addr: addr(a.proxy_port),
        playground_addr: addr(a.playground_port),
        display_addr: addr(a.display_port),
        bridge_addr: (!a.headless).then(|| addr(a.bridge_port)),
        ..StackConfig::default()
    };
    let stack = Stack::start(cfg.clone(), site).map_err(|e| e.to_string())?;
    let name = page
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let dc = DemoConfig {
        page: name,
        script,
        stack: cfg,
    };
    let outcome = demo::run_demo(&stack, &dc).map_err(|e| e.to_string())?;
    print!("{}", outcome.transcript);
    if a.headless {
        stack.shutdown();
        return Ok(outcome.exit_code());
    }
    println!(
        "serving: proxy {} origin {} display {} bridge {}",
        stack.proxy_addr,
        stack.origin,
        stack.display.endpoint().unwrap_or_default(),
        stack.display.bridge_endpoint().unwrap_or_default()
    );
    park()
}

fn rewrite(a: RewriteArgs) -> Result<(), String> {
    let bytes = std::fs::read(&a.bundle).map_err(|e| format!("{}: {e}", a.bundle.display()))?;
    let (out, mut report) = rewrite_bundle(&bytes, &NameMap::default()).map_err(|e| e.to_string())?;
    report.residuals = verify_rewritten(&out, &Allowlist::default())
        .map_err(|e| e.to_string())?
        .residuals;
    let dest = a.out.unwrap_or_else(|| {
        let stem = a.bundle.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
        a.bundle.with_file_name(format!("{stem}.pg.mcfb"))
    });
    std::fs::write(&dest, &out).map_err(|e| format!("{}: {e}", dest.display()))?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
        println!("wrote {}", dest.display());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(format!("{} residual reference(s)", report.residuals.len()))
    }
}

fn asm(source: &Path, out: Option<PathBuf>) -> Result<(), String> {
    let bytes = demo::assemble_file(source).map_err(|e| e.to_string())?;
    let dest = out.unwrap_or_else(|| source.with_extension("mcfb"));
    std::fs::write(&dest, &bytes).map_err(|e| format!("{}: {e}", dest.display()))?;
    println!("wrote {} ({} bytes)", dest.display(), bytes.len());
    Ok(())
}

/// Render a bundle, or a lone classfile, for humans.
pub fn inspect_text(bytes: &[u8]) -> Result<String, String> {
    let bundle = match Bundle::parse(bytes) {
        Ok(b) => b,
        Err(be) => match crate::mcf::parse_classfile(bytes) {
            Ok(cf) => {
                let mut b = Bundle::new();
                b.push(cf).map_err(|e| e.to_string())?;
                b
            }
            Err(ce) if bytes.starts_with(&crate::mcf::classfile::MAGIC) => {
                return Err(format!("ParseFailure: {ce}"));
            }
            Err(_) => {
                let at = be.offset().map(|o| format!(" at offset {o}")).unwrap_or_default();
                return Err(format!("ParseFailure{at}: {be}"));
            }
        },
    };
    let mut out = String::new();
    for e in &bundle.entries {
        describe_class(&mut out, &e.name, &e.class);
    }
    Ok(out)
}

fn describe_class(out: &mut String, name: &str, cf: &ClassFile) {
    let sup = cf.super_name().ok().flatten().unwrap_or("-");
    let _ = writeln!(out, "class {name} extends {sup} (version {})", cf.version);
    let _ = writeln!(out, "constant pool ({} entries)", cf.constant_pool.len());
    for (i, e) in cf.constant_pool.iter().enumerate() {
        let _ = writeln!(out, "  #{} {}", i + 1, e.describe(cf));
    }
    for f in &cf.fields {
        let _ = writeln!(
            out,
            "field {} {}",
            cf.utf8(f.name_index).unwrap_or("?"),
            cf.utf8(f.descriptor_index).unwrap_or("?")
        );
    }
    for m in &cf.methods {
        let mname = cf.method_name(m).unwrap_or("?");
        let desc = cf.method_descriptor(m).unwrap_or("?");
        if m.is_native() {
            let _ = writeln!(out, "method native {mname} {desc}");
            continue;
        }
        let _ = writeln!(
            out,
            "method {mname} {desc} stack={} locals={} code={}",
            m.max_stack,
            m.max_locals,
            m.code.len()
        );
        match disassemble(&m.code) {
            Ok(instrs) => {
                for (pc, ins) in instrs {
                    let _ = writeln!(out, "  {pc:4} {}", render_instr(cf, &ins));
                }
            }
            Err(e) => {
                let _ = writeln!(out, "  ! {e}");
            }
        }
    }
}

fn render_instr(cf: &ClassFile, ins: &Instr) -> String {
    let op = ins.opcode().mnemonic();
    let cp = |i: u16| cf.entry(i).map(|e| e.describe(cf)).unwrap_or_else(|| format!("#{i}?"));
    match *ins {
        Instr::Iconst(v) => format!("{op} {v}"),
        Instr::Load(l) | Instr::Store(l) => format!("{op} {l}"),
        Instr::Ifeq(o) | Instr::Iflt(o) | Instr::Goto(o) => format!("{op} {o:+}"),
        Instr::Sconst(i) | Instr::New(i) | Instr::Invoke(i) | Instr::Getf(i) | Instr::Putf(i) => {
            format!("{op} #{i} {}", cp(i))
        }
        _ => op.to_string(),
    }
}

/// Call one method on the Terminal servant of `address` at `bridge`.
pub fn terminal_call(bridge: &str, address: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, String> {
    let mut ep: Endpoint<()> = Endpoint::new("terminal-cli");
    let conn = ep.connect(bridge).map_err(|e| format!("{bridge}: {e}"))?;
    let term = ep
        .lookup_once(conn, address)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| format!("UnknownAddress: {address}"))?;
    ep.call(conn, term.object_id, method, args).map_err(|e| e.to_string())
}

fn inject(a: InjectArgs) -> Result<(), String> {
    let args = vec![
        WireValue::Str(a.kind.name().into()),
        WireValue::I32(a.x),
        WireValue::I32(a.y),
        WireValue::I32(a.target),
    ];
    match terminal_call(&a.bridge, &a.address, "injectEvent", args)? {
        WireValue::Str(s) => println!("ack {s}"),
        other => println!("ack {other:?}"),
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Result<(), String> {
    let text = |v: WireValue| match v {
        WireValue::Str(s) => s,
        other => format!("{other:?}\n"),
    };
    print!(
        "{}",
        text(terminal_call(
            &a.bridge,
            &a.address,
            "drawLog",
            vec![WireValue::I32(0)]
        )?)
    );
    if a.all {
        print!("{}", text(terminal_call(&a.bridge, &a.address, "widgets", vec![])?));
        println!("{}", text(terminal_call(&a.bridge, &a.address, "stats", vec![])?));
    }
    Ok(())
}
