//! The rewriting proxy.
//!
//! Pages pass through with their applet tags pointed at the graphics
//! server. Each page's bundles are then fetched, rewritten, verified and
//! posted to the playground as one load page. In trusted mode, mobile-code
//! payloads never reach display-class clients.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use url::Url;

use super::html::{rewrite_html, AppletTag, CONTACT_PARAM, DEFAULT_SERVER_NAME};
use super::http::{self, Request, Response};
use crate::mcf::{classfile::MAGIC, parse_classfile, Bundle};
use crate::playground::control::{self, AppletLoad, LoadPage};
use crate::playground::TOKEN_HEADER;
use crate::rewrite::{rewrite_bundle, verify_rewritten, Allowlist, NameMap};

pub const BUNDLE_CONTENT_TYPE: &str = "application/x-mcf-bundle";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Trusted,
    Untrusted,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trusted" => Ok(Mode::Trusted),
            "untrusted" => Ok(Mode::Untrusted),
            _ => Err(format!("mode must be trusted or untrusted, not {s:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Trusted => "trusted",
            Mode::Untrusted => "untrusted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientClass {
    Display,
    Playground,
}

impl ClientClass {
    fn name(self) -> &'static str {
        match self {
            ClientClass::Display => "display",
            ClientClass::Playground => "playground",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub mode: Mode,
    /// Playground control endpoint.
    pub playground: Option<String>,
    /// Registry endpoint handed to the playground.
    pub registry: Option<String>,
    pub server_name: String,
    /// Deterministic address generation, for tests.
    pub seed: Option<u64>,
    /// Shared secret identifying playground clients.
    pub playground_token: String,
    pub name_map: NameMap,
    pub allowlist: Allowlist,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Trusted,
            playground: None,
            registry: None,
            server_name: DEFAULT_SERVER_NAME.into(),
            seed: None,
            playground_token: "playground".into(),
            name_map: NameMap::default(),
            allowlist: Allowlist::default(),
        }
    }
}

/// `pg-` plus 128 random bits in lowercase hex; never repeats.
pub struct AddressGenerator {
    rng: ChaCha20Rng,
    issued: HashSet<String>,
}

impl AddressGenerator {
    pub fn new(seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self {
            rng,
            issued: HashSet::new(),
        }
    }

    pub fn next_address(&mut self) -> String {
        loop {
            let a = format!("pg-{:032x}", self.rng.random::<u128>());
            if self.issued.insert(a.clone()) {
                return a;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagRecord {
    pub tag: AppletTag,
    pub address: String,
    pub bundle_url: String,
    pub codebase: String,
}

/// One per request, plus one per pipeline step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogRecord {
    pub seq: u64,
    pub kind: String,
    pub client: String,
    pub method: String,
    pub target: String,
    pub status: u16,
    pub page: String,
    pub incident: Option<String>,
}

/// Whether a response looks like mobile code.
pub fn is_class_payload(target: &str, body: &[u8]) -> bool {
    let path = target.split(['?', '#']).next().unwrap_or("").to_ascii_lowercase();
    body.windows(MAGIC.len()).any(|w| w == MAGIC)
        || path.ends_with(".mcfb")
        || path.ends_with(".mcfc")
        || (body.len() >= 2 && Bundle::parse(body).is_ok_and(|b| !b.is_empty()))
}

/// Trusted-mode filter. Returns the response a client of `class` may see.
pub fn filter_class_payload(
    mode: Mode,
    class: ClientClass,
    target: &str,
    resp: Response,
) -> Result<Response, Response> {
    if mode == Mode::Trusted && class == ClientClass::Display && is_class_payload(target, &resp.body) {
        return Err(Response::text(403, "blocked: mobile code may not reach the display\n"));
    }
    Ok(resp)
}

struct Shared {
    cfg: ProxyConfig,
    addresses: Mutex<AddressGenerator>,
    tags: Mutex<BTreeMap<String, Vec<TagRecord>>>,
    log: Mutex<Vec<LogRecord>>,
    next_page: AtomicU64,
    /// Pipelines still running.
    pipelines: Mutex<usize>,
    pipelines_done: Condvar,
}

/// Marks one pipeline finished when dropped, panics included.
struct PipelineDone<'a>(&'a Shared);

impl Drop for PipelineDone<'_> {
    fn drop(&mut self) {
        *self.0.pipelines.lock().unwrap() -= 1;
        self.0.pipelines_done.notify_all();
    }
}

/// Handle to the proxy. Cheap to clone.
#[derive(Clone)]
pub struct Proxy {
    sh: Arc<Shared>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleFailure {
    #[error("OriginUnreachable: {0}")]
    OriginUnreachable(String),
    #[error("origin answered {0}")]
    OriginStatus(u16),
    #[error("ParseFailure: {0}")]
    ParseFailure(String),
    #[error("VerifyFailed: residual references {0:?}")]
    VerifyFailed(Vec<String>),
}

impl Proxy {
    pub fn new(cfg: ProxyConfig) -> Self {
        Self {
            sh: Arc::new(Shared {
                addresses: Mutex::new(AddressGenerator::new(cfg.seed)),
                cfg,
                tags: Mutex::new(BTreeMap::new()),
                log: Mutex::new(Vec::new()),
                next_page: AtomicU64::new(1),
                pipelines: Mutex::new(0),
                pipelines_done: Condvar::new(),
            }),
        }
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.sh.cfg
    }

    pub fn listen(&self, addr: &str) -> io::Result<SocketAddr> {
        self.listen_on(TcpListener::bind(addr)?)
    }

    pub fn listen_on(&self, l: TcpListener) -> io::Result<SocketAddr> {
        let local = l.local_addr()?;
        let p = self.clone();
        thread::Builder::new().name("proxy-accept".into()).spawn(move || {
            for s in l.incoming() {
                let Ok(s) = s else { continue };
                let p = p.clone();
                let _ = thread::Builder::new()
                    .name("proxy-client".into())
                    .spawn(move || p.serve(s));
            }
        })?;
        Ok(local)
    }

    fn serve(&self, stream: TcpStream) {
        let Ok(mut w) = stream.try_clone() else { return };
        let mut r = BufReader::new(stream);
        let resp = match http::read_request(&mut r) {
            Ok(Some(req)) => self.handle(&req),
            Ok(None) => return,
            Err(e) => Response::text(400, &format!("{e}\n")),
        };
        let _ = resp.write_to(&mut w);
    }

    pub fn next_address(&self) -> String {
        self.sh.addresses.lock().unwrap().next_address()
    }

    pub fn pages(&self) -> Vec<String> {
        self.sh.tags.lock().unwrap().keys().cloned().collect()
    }

    pub fn tag_map(&self, page: &str) -> Option<Vec<TagRecord>> {
        self.sh.tags.lock().unwrap().get(page).cloned()
    }

    pub fn log(&self) -> Vec<LogRecord> {
        self.sh.log.lock().unwrap().clone()
    }

    pub fn log_json_lines(&self) -> String {
        self.log()
            .iter()
            .map(|r| serde_json::to_string(r).unwrap_or_default() + "\n")
            .collect()
    }

    /// Block until every started bundle pipeline has finished.
    pub fn wait_idle(&self) {
        let n = self.sh.pipelines.lock().unwrap();
        let _idle = self.sh.pipelines_done.wait_while(n, |n| *n > 0).unwrap();
    }

    fn record(&self, kind: &str, client: &str, req: (&str, &str), status: u16, page: &str, incident: Option<String>) {
        let mut log = self.sh.log.lock().unwrap();
        let r = LogRecord {
            seq: log.len() as u64 + 1,
            kind: kind.into(),
            client: client.into(),
            method: req.0.into(),
            target: req.1.into(),
            status,
            page: page.into(),
            incident,
        };
        let line = serde_json::to_string(&r).unwrap_or_default();
        if r.incident.is_some() {
            log::warn!("{line}");
        } else {
            log::info!("{line}");
        }
        log.push(r);
    }

    pub fn classify(&self, req: &Request) -> ClientClass {
        match req.header(TOKEN_HEADER) {
            Some(t) if t == self.sh.cfg.playground_token => ClientClass::Playground,
            _ => ClientClass::Display,
        }
    }

    /// Answer one request.
    pub fn handle(&self, req: &Request) -> Response {
        let class = self.classify(req);
        let (resp, page, incident) = self.route(req, class);
        self.record(
            "access",
            class.name(),
            (&req.method, &req.target),
            resp.status,
            &page,
            incident,
        );
        resp
    }

    fn route(&self, req: &Request, class: ClientClass) -> (Response, String, Option<String>) {
        if req.method != "GET" {
            return (Response::text(405, "only GET is supported\n"), String::new(), None);
        }
        if req.target.starts_with("/bundle") {
            if class != ClientClass::Playground {
                let r = Response::text(403, "bundle route is for the playground\n");
                return (r, String::new(), Some("bundle route without token".into()));
            }
            let origin = Url::parse(&format!("http://proxy{}", req.target))
                .ok()
                .and_then(|u| u.query_pairs().find(|(k, _)| k == "url").map(|(_, v)| v.into_owned()));
            let Some(origin) = origin else {
                return (Response::text(400, "missing url parameter\n"), String::new(), None);
            };
            return match self.handle_bundle_request(&origin) {
                Ok((_, bytes)) => (Response::new(200, BUNDLE_CONTENT_TYPE, bytes), String::new(), None),
                Err(BundleFailure::OriginStatus(s)) => (Response::text(s, "origin error\n"), String::new(), None),
                Err(e) => {
                    let status = match e {
                        BundleFailure::OriginUnreachable(_) => 502,
                        _ => 403,
                    };
                    (
                        Response::text(status, &format!("{e}\n")),
                        String::new(),
                        Some(e.to_string()),
                    )
                }
            };
        }
        if !req.target.starts_with("http://") {
            return (
                Response::text(400, "expected an absolute http URL\n"),
                String::new(),
                None,
            );
        }
        let resp = match http::get(&req.target, None, &[]) {
            Ok(r) => r,
            Err(e) => {
                let why = format!("OriginUnreachable: {e}");
                return (Response::text(502, &format!("{why}\n")), String::new(), Some(why));
            }
        };
        let resp = match filter_class_payload(self.sh.cfg.mode, class, &req.target, resp) {
            Ok(r) => r,
            Err(blocked) => return (blocked, String::new(), Some("mobile code blocked".into())),
        };
        if resp.status == 200 && is_html(&req.target, &resp) {
            return self.handle_page(&req.target, resp);
        }
        (resp, String::new(), None)
    }

    fn handle_page(&self, url: &str, mut resp: Response) -> (Response, String, Option<String>) {
        let page_id = format!("page-{}", self.sh.next_page.fetch_add(1, Ordering::Relaxed));
        let rw = {
            let mut gen = self.sh.addresses.lock().unwrap();
            rewrite_html(&resp.body, &self.sh.cfg.server_name, || gen.next_address())
        };
        resp.body = rw.page;
        if rw.tags.is_empty() {
            return (resp, String::new(), None);
        }
        let records: Vec<TagRecord> = rw
            .tags
            .into_iter()
            .map(|(tag, address)| {
                let codebase = resolve(url, tag.codebase.as_deref().unwrap_or("."));
                let codebase = if codebase.ends_with('/') {
                    codebase
                } else {
                    codebase + "/"
                };
                let bundle_url = resolve(&codebase, &tag.code);
                TagRecord {
                    tag,
                    address,
                    bundle_url,
                    codebase,
                }
            })
            .collect();
        self.sh.tags.lock().unwrap().insert(page_id.clone(), records.clone());
        let p = self.clone();
        let id = page_id.clone();
        *self.sh.pipelines.lock().unwrap() += 1;
        let spawned = thread::Builder::new().name(format!("pipeline-{id}")).spawn(move || {
            let _done = PipelineDone(&p.sh);
            p.run_pipeline(&id, &records)
        });
        if let Err(e) = spawned {
            PipelineDone(&self.sh);
            log::error!("pipeline for {page_id} not started: {e}");
        }
        (resp, page_id, None)
    }

    /// Fetch, rewrite and verify one bundle. Returns the main class name
    /// and the rewritten bytes.
    pub fn handle_bundle_request(&self, origin_url: &str) -> Result<(String, Vec<u8>), BundleFailure> {
        let resp = http::get(origin_url, None, &[]).map_err(|e| BundleFailure::OriginUnreachable(e.to_string()))?;
        if resp.status != 200 {
            return Err(BundleFailure::OriginStatus(resp.status));
        }
        let bytes = match Bundle::parse(&resp.body) {
            Ok(_) => resp.body,
            Err(be) => {
                let cf = parse_classfile(&resp.body).map_err(|_| BundleFailure::ParseFailure(be.to_string()))?;
                let mut b = Bundle::new();
                b.push(cf).map_err(|e| BundleFailure::ParseFailure(e.to_string()))?;
                b.serialize().map_err(|e| BundleFailure::ParseFailure(e.to_string()))?
            }
        };
        let (out, _) =
            rewrite_bundle(&bytes, &self.sh.cfg.name_map).map_err(|e| BundleFailure::ParseFailure(e.to_string()))?;
        let report =
            verify_rewritten(&out, &self.sh.cfg.allowlist).map_err(|e| BundleFailure::ParseFailure(e.to_string()))?;
        if !report.passed() {
            return Err(BundleFailure::VerifyFailed(report.residuals));
        }
        let name = Bundle::parse(&out)
            .ok()
            .and_then(|b| b.entries.first().map(|e| e.name.clone()))
            .ok_or_else(|| BundleFailure::ParseFailure("empty bundle".into()))?;
        Ok((name, out))
    }

    fn run_pipeline(&self, page_id: &str, records: &[TagRecord]) {
        let results: Vec<_> = thread::scope(|s| {
            let hs: Vec<_> = records
                .iter()
                .map(|r| s.spawn(move || self.handle_bundle_request(&r.bundle_url)))
                .collect();
            hs.into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(BundleFailure::ParseFailure("pipeline panicked".into())))
                })
                .collect()
        });
        let mut applets = Vec::new();
        for (r, res) in records.iter().zip(results) {
            match res {
                Ok((name, bundle)) => {
                    let mut params = vec![(CONTACT_PARAM.to_string(), r.address.clone())];
                    params.extend(r.tag.params.iter().cloned());
                    applets.push(AppletLoad {
                        name,
                        address: r.address.clone(),
                        codebase: r.codebase.clone(),
                        bundle,
                        params,
                    });
                    self.record("bundle", "proxy", ("GET", &r.bundle_url), 200, page_id, None);
                }
                Err(e) => {
                    let status = match e {
                        BundleFailure::OriginStatus(s) => s,
                        _ => 0,
                    };
                    self.record(
                        "bundle",
                        "proxy",
                        ("GET", &r.bundle_url),
                        status,
                        page_id,
                        Some(e.to_string()),
                    );
                }
            }
        }
        if applets.is_empty() {
            self.record(
                "load",
                "proxy",
                ("LOAD", page_id),
                0,
                page_id,
                Some("no applet survived".into()),
            );
            return;
        }
        let Some(pg) = self.sh.cfg.playground.clone() else {
            self.record(
                "load",
                "proxy",
                ("LOAD", page_id),
                0,
                page_id,
                Some("no playground configured".into()),
            );
            return;
        };
        let load = LoadPage {
            page_id: page_id.to_string(),
            registry: self.sh.cfg.registry.clone().unwrap_or_default(),
            applets,
        };
        match control::send_load(&pg, &load) {
            Ok(_) => self.record("load", "proxy", ("LOAD", page_id), 200, page_id, None),
            Err(e) => self.record("load", "proxy", ("LOAD", page_id), 0, page_id, Some(e.to_string())),
        }
    }
}

fn is_html(target: &str, resp: &Response) -> bool {
    if let Some(ct) = resp.header("Content-Type") {
        return ct.to_ascii_lowercase().contains("html");
    }
    let path = target.split(['?', '#']).next().unwrap_or("").to_ascii_lowercase();
    path.ends_with(".html") || path.ends_with(".htm")
}

fn resolve(base: &str, rel: &str) -> String {
    match Url::parse(base).and_then(|b| b.join(rel)) {
        Ok(u) => u.to_string(),
        Err(_) => rel.to_string(),
    }
}
