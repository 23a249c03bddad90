//! In-process deployment of the whole system plus a headless event-script
//! runner.
//!
//! A [`Stack`] runs an origin web server, the proxy, the playground and the
//! display (which also hosts the registry), all on loopback. [`run_demo`]
//! opens a page through it, replays a script and renders a transcript.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::display::{Browser, Delivery, Display, DisplayConfig, EventKind, InputEvent, Surface, WidgetKind};
use crate::mcf::asm::assemble_bundle;
use crate::mcf::vm::VmLimits;
use crate::playground::{FetchConfig, PageSnapshot, Playground, PlaygroundConfig};
use crate::proxy::http::{self, Response};
use crate::proxy::{Mode, Proxy, ProxyConfig};
use crate::stubs::AppletStatus;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: {msg}")]
    Asset { path: String, msg: String },
    #[error("script line {line}: {msg}")]
    Script { line: usize, msg: String },
    #[error("{0}")]
    Browser(String),
}

/// Files served by the origin, keyed by URL path.
#[derive(Debug, Clone, Default)]
pub struct Site {
    files: BTreeMap<String, (String, Vec<u8>)>,
}

fn content_type(name: &str) -> &'static str {
    match Path::new(name).extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html",
        "mcfb" | "mcfc" => "application/octet-stream",
        "mci" => "image/x-mci",
        "txt" | "events" => "text/plain",
        _ => "application/octet-stream",
    }
}

impl Site {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, bytes: impl Into<Vec<u8>>) {
        let path = if path.starts_with('/') {
            path.to_string()
        } else {
            format!("/{path}")
        };
        let ct = content_type(&path).to_string();
        self.files.insert(path, (ct, bytes.into()));
    }

    /// Every file under `root`, flattened to `/<file name>`. Assembly
    /// sources are served assembled, as `/<stem>.mcfb`.
    pub fn from_dir(root: &Path) -> Result<Site, DemoError> {
        let mut site = Site::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                if p.extension().is_some_and(|e| e == "mcfa") {
                    let bytes = assemble_file(&p)?;
                    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    site.insert(&format!("{stem}.mcfb"), bytes);
                } else {
                    site.insert(&name, std::fs::read(&p)?);
                }
            }
        }
        Ok(site)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(|(_, b)| b.as_slice())
    }

    fn respond(&self, target: &str) -> Response {
        let path = if target.starts_with("http://") {
            url::Url::parse(target)
                .map(|u| u.path().to_string())
                .unwrap_or_default()
        } else {
            target.split(['?', '#']).next().unwrap_or("").to_string()
        };
        match self.files.get(&path) {
            Some((ct, body)) => Response::new(200, ct, body.clone()),
            None => Response::text(404, "not found\n"),
        }
    }

    /// Serve on `addr` from a background thread.
    pub fn serve(self, addr: &str) -> io::Result<SocketAddr> {
        let l = TcpListener::bind(addr)?;
        let local = l.local_addr()?;
        let site = Arc::new(self);
        thread::Builder::new().name("origin".into()).spawn(move || {
            for s in l.incoming() {
                let Ok(s) = s else { continue };
                let site = site.clone();
                let _ = thread::Builder::new()
                    .name("origin-client".into())
                    .spawn(move || serve_one(&site, s));
            }
        })?;
        Ok(local)
    }
}

fn serve_one(site: &Site, stream: TcpStream) {
    let Ok(mut w) = stream.try_clone() else { return };
    let mut r = BufReader::new(stream);
    let resp = match http::read_request(&mut r) {
        Ok(Some(req)) if req.method == "GET" => site.respond(&req.target),
        Ok(Some(_)) => Response::text(405, "only GET\n"),
        Ok(None) => return,
        Err(e) => Response::text(400, &format!("{e}\n")),
    };
    let _ = resp.write_to(&mut w);
}

/// Assemble an `.mcfa` file into bundle bytes.
pub fn assemble_file(path: &Path) -> Result<Vec<u8>, DemoError> {
    let err = |msg: String| DemoError::Asset {
        path: path.display().to_string(),
        msg,
    };
    let src = std::fs::read_to_string(path)?;
    let b = assemble_bundle(&src).map_err(|e| err(e.to_string()))?;
    b.serialize().map_err(|e| err(e.to_string()))
}

/// Directory holding the bundled demo pages, applets and scripts.
pub fn asset_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub mode: Mode,
    pub seed: Option<u64>,
    pub display: DisplayConfig,
    pub limits: VmLimits,
    pub lookup_timeout: Duration,
    /// Let the playground fetch missing classes through the proxy.
    pub network_fetch: bool,
    /// Listen addresses; port 0 picks a free port.
    pub proxy_addr: String,
    pub playground_addr: String,
    pub display_addr: String,
    /// Also open the terminal bridge.
    pub bridge_addr: Option<String>,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Untrusted,
            seed: None,
            display: DisplayConfig::default(),
            limits: VmLimits::default(),
            lookup_timeout: Duration::from_secs(5),
            network_fetch: true,
            proxy_addr: "127.0.0.1:0".into(),
            playground_addr: "127.0.0.1:0".into(),
            display_addr: "127.0.0.1:0".into(),
            bridge_addr: None,
        }
    }
}

pub struct Stack {
    pub display: Display,
    pub playground: Playground,
    pub proxy: Proxy,
    pub origin: String,
    pub proxy_addr: String,
    browser: Browser,
}

/// A page opened through the stack, after its applets started.
#[derive(Debug, Clone)]
pub struct OpenedPage {
    pub url: String,
    pub status: u16,
    pub surfaces: Vec<Surface>,
    pub refused: Vec<String>,
    /// Playground page id per surface; `None` when no applet was loaded.
    pub pages: Vec<Option<String>>,
}

impl Stack {
    pub fn start(cfg: StackConfig, site: Site) -> Result<Stack, DemoError> {
        let proxy_l = TcpListener::bind(&cfg.proxy_addr)?;
        let proxy_addr = proxy_l.local_addr()?.to_string();
        let pg_l = TcpListener::bind(&cfg.playground_addr)?;
        let pg_addr = pg_l.local_addr()?.to_string();

        let mut dcfg = cfg.display.clone();
        dcfg.proxy = Some(proxy_addr.clone());
        let display = Display::new(dcfg);
        let reg = display.listen(&cfg.display_addr)?.to_string();
        if let Some(b) = &cfg.bridge_addr {
            display.listen_bridge(b)?;
        }

        let pcfg = ProxyConfig {
            mode: cfg.mode,
            playground: Some(pg_addr),
            registry: Some(reg.clone()),
            seed: cfg.seed,
            ..ProxyConfig::default()
        };
        let token = pcfg.playground_token.clone();
        let proxy = Proxy::new(pcfg);
        proxy.listen_on(proxy_l)?;

        let playground = Playground::new(PlaygroundConfig {
            registry: Some(reg),
            lookup_timeout: cfg.lookup_timeout,
            limits: cfg.limits,
            fetch: cfg.network_fetch.then(|| FetchConfig {
                proxy: proxy_addr.clone(),
                token,
            }),
            ..PlaygroundConfig::default()
        });
        playground.listen_on(pg_l)?;

        let origin = site.serve("127.0.0.1:0")?.to_string();
        let browser = Browser::new(display.clone(), Some(proxy_addr.clone()));
        Ok(Stack {
            display,
            playground,
            proxy,
            origin,
            proxy_addr,
            browser,
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}/{}", self.origin, path.trim_start_matches('/'))
    }

    /// Load `path` from the origin and wait until its applets settled.
    pub fn open(&self, path: &str) -> Result<OpenedPage, DemoError> {
        let url = self.url(path);
        let lp = self.browser.open(&url).map_err(|e| DemoError::Browser(e.to_string()))?;
        self.proxy.wait_idle();
        let timeout = self.playground.config().lookup_timeout * 2;
        let pages = lp
            .surfaces
            .iter()
            .map(|s| {
                let id = self.playground.find_page(&s.address)?;
                self.playground.wait_settled(&id, timeout);
                Some(id)
            })
            .collect();
        Ok(OpenedPage {
            url,
            status: lp.status,
            surfaces: lp.surfaces,
            refused: lp.refused,
            pages,
        })
    }

    pub fn snapshot(&self, page: &OpenedPage, surface: usize) -> Option<PageSnapshot> {
        page.pages
            .get(surface)?
            .as_deref()
            .and_then(|id| self.playground.snapshot(id))
    }

    pub fn shutdown(&self) {
        self.playground.shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Draws {
        count: usize,
        surface: Option<String>,
    },
    Widget(String),
    Status {
        status: AppletStatus,
        surface: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Mouse {
        kind: EventKind,
        x: i32,
        y: i32,
        surface: Option<String>,
    },
    /// Press the widget whose text is `widget`.
    Action {
        widget: String,
    },
    Wait(Duration),
    Expect(Expect),
}

/// One step per line; `#` starts a comment.
///
/// ```text
/// mouse-clicked 40 25 [surface]
/// action <widget text>
/// wait <ms>
/// expect draws <n> [surface] | expect widget <text> | expect status <status> [surface]
/// ```
///
/// A surface is a 0-based index into the page's applets or a ContactAddress.
pub fn parse_script(text: &str) -> Result<Vec<Step>, DemoError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |msg: String| DemoError::Script { line, msg };
        let body = raw.split('#').next().unwrap_or("").trim();
        let toks: Vec<&str> = body.split_whitespace().collect();
        let Some(&head) = toks.first() else { continue };
        let num = |t: &str| t.parse::<i32>().map_err(|_| bad(format!("bad number {t:?}")));
        let step = match (head, &toks[1..]) {
            ("mouse-clicked" | "mouse-pressed" | "mouse-released", [x, y, rest @ ..]) if rest.len() <= 1 => {
                Step::Mouse {
                    kind: head.parse().map_err(bad)?,
                    x: num(x)?,
                    y: num(y)?,
                    surface: rest.first().map(|s| s.to_string()),
                }
            }
            ("action", [_, ..]) => Step::Action {
                widget: toks[1..].join(" "),
            },
            ("wait", [ms]) => Step::Wait(Duration::from_millis(num(ms)?.max(0) as u64)),
            ("expect", ["draws", n, rest @ ..]) if rest.len() <= 1 => Step::Expect(Expect::Draws {
                count: num(n)?.max(0) as usize,
                surface: rest.first().map(|s| s.to_string()),
            }),
            ("expect", ["widget", _, ..]) => Step::Expect(Expect::Widget(toks[2..].join(" "))),
            ("expect", ["status", s, rest @ ..]) if rest.len() <= 1 => Step::Expect(Expect::Status {
                status: s.parse().map_err(bad)?,
                surface: rest.first().map(|s| s.to_string()),
            }),
            _ => return Err(bad(format!("cannot parse {body:?}"))),
        };
        steps.push(step);
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    /// Page path on the origin, e.g. `click.html`.
    pub page: String,
    pub script: Vec<Step>,
    pub stack: StackConfig,
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub transcript: String,
    pub faulted: bool,
    pub failed_expectations: usize,
    pub elapsed: Duration,
}

impl DemoOutcome {
    /// 0 ok, 1 faulted applet or failed expectation.
    pub fn exit_code(&self) -> i32 {
        if self.faulted || self.failed_expectations > 0 {
            1
        } else {
            0
        }
    }
}

fn surface_index(page: &OpenedPage, s: &Option<String>) -> Option<usize> {
    match s {
        None => (!page.surfaces.is_empty()).then_some(0),
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|i| *i < page.surfaces.len())
            .or_else(|| page.surfaces.iter().position(|x| &x.address == s)),
    }
}

/// A window refused by the budget is the defense working, not a failure.
fn is_budget_fault(detail: &str) -> bool {
    detail.contains("BUDGET_EXCEEDED") || detail.contains("BudgetExceeded")
}

/// Open the page, replay the script and describe what happened.
pub fn run_demo(stack: &Stack, cfg: &DemoConfig) -> Result<DemoOutcome, DemoError> {
    let start = Instant::now();
    let mut out = String::new();
    let mut failed = 0usize;
    let page = stack.open(&cfg.page)?;
    let _ = writeln!(out, "page {} status {}", cfg.page, page.status);
    for code in &page.refused {
        let _ = writeln!(out, "refused applet code={code}");
    }
    for (i, s) in page.surfaces.iter().enumerate() {
        let _ = writeln!(out, "surface {i} {} {}x{}", s.address, s.width, s.height);
    }
    describe_applets(stack, &page, &mut out);

    for (n, step) in cfg.script.iter().enumerate() {
        let n = n + 1;
        match step {
            Step::Mouse { kind, x, y, surface } => {
                let Some(i) = surface_index(&page, surface) else {
                    let _ = writeln!(out, "event {n} {} {x} {y} -> no such surface", kind.name());
                    failed += 1;
                    continue;
                };
                let ev = InputEvent {
                    kind: *kind,
                    x: *x,
                    y: *y,
                    target: 0,
                };
                let d = stack.display.inject(&page.surfaces[i].address, ev);
                let _ = writeln!(
                    out,
                    "event {n} {} {x} {y} surface {i} -> {}",
                    kind.name(),
                    delivery_text(&d)
                );
            }
            Step::Action { widget } => {
                let hit = page.surfaces.iter().enumerate().find_map(|(i, s)| {
                    let tree = stack.display.widgets(&s.address).ok()?;
                    let w = tree
                        .iter()
                        .find(|w| w.text == *widget && w.kind == WidgetKind::Button)
                        .or_else(|| tree.iter().find(|w| w.text == *widget))?;
                    Some((i, w.id))
                });
                match hit {
                    Some((i, id)) => {
                        let d = stack.display.inject(&page.surfaces[i].address, InputEvent::action(id));
                        let _ = writeln!(out, "event {n} action {widget:?} surface {i} -> {}", delivery_text(&d));
                    }
                    None => {
                        let _ = writeln!(out, "event {n} action {widget:?} -> no such widget");
                        failed += 1;
                    }
                }
            }
            Step::Wait(d) => thread::sleep(*d),
            Step::Expect(e) => {
                let (ok, what) = check(stack, &page, e);
                let _ = writeln!(out, "expect {what} -> {}", if ok { "ok" } else { "FAILED" });
                if !ok {
                    failed += 1;
                }
            }
        }
    }

    let b = stack.display.budget();
    let _ = writeln!(
        out,
        "windows created={} refused={} live={}",
        b.created, b.refused, b.live
    );
    let faulted = describe_applets(stack, &page, &mut out);
    for (i, s) in page.surfaces.iter().enumerate() {
        let log = stack.display.draw_log(&s.address).unwrap_or_default();
        let _ = writeln!(out, "draw log {i} ({} entries)", log.len());
        for e in log {
            let _ = writeln!(out, "{}", e.cmd);
        }
    }
    Ok(DemoOutcome {
        transcript: out,
        faulted,
        failed_expectations: failed,
        elapsed: start.elapsed(),
    })
}

fn delivery_text(d: &Result<Delivery, crate::rop::RemoteFault>) -> String {
    match d {
        Ok(d) => d.to_text(),
        Err(f) => format!("fault {f}"),
    }
}

/// Write one line per applet; returns whether any faulted for a reason
/// other than the window budget.
fn describe_applets(stack: &Stack, page: &OpenedPage, out: &mut String) -> bool {
    let mut faulted = false;
    for (i, s) in page.surfaces.iter().enumerate() {
        let report = stack
            .snapshot(page, i)
            .and_then(|snap| snap.applets.into_iter().find(|a| a.address == s.address));
        match report {
            Some(a) => {
                if a.status == AppletStatus::Faulted && !is_budget_fault(&a.detail) {
                    faulted = true;
                }
                if a.detail.is_empty() {
                    let _ = writeln!(out, "applet {i} {} {}", a.name, a.status);
                } else {
                    let _ = writeln!(out, "applet {i} {} {}: {}", a.name, a.status, a.detail);
                }
            }
            None => {
                faulted = true;
                let why = stack
                    .proxy
                    .log()
                    .into_iter()
                    .filter(|r| r.kind == "bundle")
                    .filter_map(|r| r.incident)
                    .next_back()
                    .unwrap_or_else(|| "not loaded".into());
                let _ = writeln!(out, "applet {i} rejected: {why}");
            }
        }
    }
    faulted
}

fn check(stack: &Stack, page: &OpenedPage, e: &Expect) -> (bool, String) {
    match e {
        Expect::Draws { count, surface } => {
            let got = surface_index(page, surface)
                .and_then(|i| stack.display.draw_log(&page.surfaces[i].address).ok())
                .map(|l| l.len());
            (
                got == Some(*count),
                format!("draws {count} (got {})", got.map_or("none".into(), |g| g.to_string())),
            )
        }
        Expect::Widget(text) => {
            let ok = page.surfaces.iter().any(|s| {
                stack
                    .display
                    .widgets(&s.address)
                    .map(|t| t.iter().any(|w| w.text == *text))
                    .unwrap_or(false)
            });
            (ok, format!("widget {text:?}"))
        }
        Expect::Status { status, surface } => {
            let got = surface_index(page, surface).and_then(|i| {
                let addr = &page.surfaces[i].address;
                stack
                    .snapshot(page, i)?
                    .applets
                    .into_iter()
                    .find(|a| &a.address == addr)
                    .map(|a| a.status)
            });
            (got == Some(*status), format!("status {status}"))
        }
    }
}
