//! The playground service: hosts rewritten applets, one VM per page.
//!
//! Each page gets its own thread, VM, stub host and connections. Pages share
//! nothing but the capability policy and the audit log.

pub mod control;
pub mod policy;

use std::collections::BTreeMap;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::mcf::{parse_classfile, vm::FetchHook, vm::VmLimits, Bundle, Vm, VmError};
use crate::proxy::http;
use crate::rop::{ConnId, EndpointConfig, Event, LocalSender, RopError};
use crate::stubs::{self, AppletReport, AppletSlot, AppletStatus, Host, HostTask};

pub use control::{AppletLoad, ControlMessage, LoadPage, PageStatus};
pub use policy::{policy_check_connect, AuditLog, CapabilityPolicy, ConnectRecord, EndpointPattern, PolicyDenied};

pub const TOKEN_HEADER: &str = "X-Playground-Token";
const PAGE_STACK: usize = 64 << 20;

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub proxy: String,
    pub token: String,
}

#[derive(Debug, Clone)]
pub struct PlaygroundConfig {
    /// Registry used when a load page does not name one.
    pub registry: Option<String>,
    pub allow: Vec<EndpointPattern>,
    pub lookup_timeout: Duration,
    pub endpoint: EndpointConfig,
    pub limits: VmLimits,
    /// Fetch classes missing from a page's bundles through the proxy.
    pub fetch: Option<FetchConfig>,
}

impl Default for PlaygroundConfig {
    fn default() -> Self {
        Self {
            registry: None,
            allow: Vec::new(),
            lookup_timeout: Duration::from_secs(10),
            endpoint: EndpointConfig::default(),
            limits: VmLimits::default(),
            fetch: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlaygroundError {
    #[error("page {0} is already loaded")]
    DuplicatePage(String),
    #[error("load page {0} lists no applets")]
    EmptyPage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What a page looks like from outside its thread.
#[derive(Debug, Clone, Default)]
pub struct PageSnapshot {
    pub page_id: String,
    pub vm_id: u32,
    pub applets: Vec<AppletReport>,
    /// Loaded class names with the address of their in-VM record.
    pub classes: Vec<(String, usize)>,
    /// Local socket address of every connection the page opened.
    pub channels: Vec<String>,
    /// `endpoint#id` of every object the page has exported.
    pub exported: Vec<String>,
    pub heap_len: usize,
    pub fetched: Vec<String>,
    pub incidents: Vec<String>,
    /// Startup (lookups, init, start) has finished.
    pub settled: bool,
    /// The page thread has exited.
    pub finished: bool,
}

impl PageSnapshot {
    pub fn status(&self) -> PageStatus {
        PageStatus {
            page_id: self.page_id.clone(),
            vm_id: self.vm_id,
            applets: self.applets.clone(),
        }
    }
}

struct PageHandle {
    tx: LocalSender<HostTask>,
    snapshot: Arc<Mutex<PageSnapshot>>,
    thread: Option<JoinHandle<()>>,
}

struct Inner {
    cfg: PlaygroundConfig,
    policy: CapabilityPolicy,
    audit: AuditLog,
    pages: Mutex<BTreeMap<String, PageHandle>>,
    endpoint: Mutex<Option<String>>,
}

/// Handle to the service. Cheap to clone.
#[derive(Clone)]
pub struct Playground {
    inner: Arc<Inner>,
}

impl Playground {
    pub fn new(cfg: PlaygroundConfig) -> Self {
        let mut policy = CapabilityPolicy::new(cfg.allow.clone());
        if let Some(r) = &cfg.registry {
            if let Err(e) = policy.permit(r) {
                log::warn!("registry endpoint not added to policy: {e}");
            }
        }
        if let Some(f) = &cfg.fetch {
            policy.network_fetch = true;
            if let Err(e) = policy.permit(&f.proxy) {
                log::warn!("proxy endpoint not added to policy: {e}");
            }
        }
        Self {
            inner: Arc::new(Inner {
                cfg,
                policy,
                audit: AuditLog::default(),
                pages: Mutex::new(BTreeMap::new()),
                endpoint: Mutex::new(None),
            }),
        }
    }

    pub fn config(&self) -> &PlaygroundConfig {
        &self.inner.cfg
    }

    pub fn policy(&self) -> &CapabilityPolicy {
        &self.inner.policy
    }

    pub fn audit(&self) -> &AuditLog {
        &self.inner.audit
    }

    pub fn endpoint(&self) -> Option<String> {
        self.inner.endpoint.lock().unwrap().clone()
    }

    /// Start a page. Returns once its thread is running; startup continues
    /// in the background.
    pub fn load_page(&self, load: LoadPage) -> Result<(), PlaygroundError> {
        if load.applets.is_empty() {
            return Err(PlaygroundError::EmptyPage(load.page_id));
        }
        let mut pages = self.inner.pages.lock().unwrap();
        if pages.contains_key(&load.page_id) {
            return Err(PlaygroundError::DuplicatePage(load.page_id));
        }
        let label = format!("playground/{}", load.page_id);
        let host = Host::new(label, self.inner.cfg.endpoint);
        let tx = host.ep.local_sender();
        let snapshot = Arc::new(Mutex::new(PageSnapshot {
            page_id: load.page_id.clone(),
            applets: load
                .applets
                .iter()
                .map(|a| AppletReport {
                    name: a.name.clone(),
                    address: a.address.clone(),
                    status: AppletStatus::Loading,
                    detail: String::new(),
                })
                .collect(),
            ..PageSnapshot::default()
        }));
        let page_id = load.page_id.clone();
        let ctx = PageContext {
            cfg: self.inner.cfg.clone(),
            policy: self.inner.policy.clone(),
            audit: self.inner.audit.clone(),
            snapshot: snapshot.clone(),
        };
        let thread = thread::Builder::new()
            .name(format!("page-{page_id}"))
            .stack_size(PAGE_STACK)
            .spawn(move || run_page(load, host, ctx))?;
        pages.insert(
            page_id,
            PageHandle {
                tx,
                snapshot,
                thread: Some(thread),
            },
        );
        Ok(())
    }

    pub fn page_ids(&self) -> Vec<String> {
        self.inner.pages.lock().unwrap().keys().cloned().collect()
    }

    pub fn snapshot(&self, page_id: &str) -> Option<PageSnapshot> {
        let pages = self.inner.pages.lock().unwrap();
        pages.get(page_id).map(|p| p.snapshot.lock().unwrap().clone())
    }

    /// Status of one page, or all pages when `page_id` is empty.
    pub fn status(&self, page_id: &str) -> Vec<PageStatus> {
        let pages = self.inner.pages.lock().unwrap();
        pages
            .iter()
            .filter(|(id, _)| page_id.is_empty() || id.as_str() == page_id)
            .map(|(_, p)| p.snapshot.lock().unwrap().status())
            .collect()
    }

    /// Page hosting the applet bound to `address`.
    pub fn find_page(&self, address: &str) -> Option<String> {
        let pages = self.inner.pages.lock().unwrap();
        pages
            .iter()
            .find(|(_, p)| p.snapshot.lock().unwrap().applets.iter().any(|a| a.address == address))
            .map(|(id, _)| id.clone())
    }

    /// Wait for a page serving `address` to finish startup.
    pub fn wait_for_address(&self, address: &str, timeout: Duration) -> Option<PageSnapshot> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(id) = self.find_page(address) {
                return self.wait_settled(&id, deadline.saturating_duration_since(Instant::now()));
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn wait_settled(&self, page_id: &str, timeout: Duration) -> Option<PageSnapshot> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.snapshot(page_id)?;
            if s.settled || Instant::now() >= deadline {
                return Some(s);
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stop a page's applets and wait for its thread.
    pub fn stop_page(&self, page_id: &str) -> Option<PageSnapshot> {
        let (thread, snapshot) = {
            let mut pages = self.inner.pages.lock().unwrap();
            let p = pages.get_mut(page_id)?;
            p.tx.send(HostTask::Stop);
            (p.thread.take(), p.snapshot.clone())
        };
        if let Some(t) = thread {
            let _ = t.join();
        }
        let s = snapshot.lock().unwrap().clone();
        Some(s)
    }

    pub fn shutdown(&self) {
        for id in self.page_ids() {
            self.stop_page(&id);
        }
    }

    /// Serve the control protocol on `addr`.
    pub fn listen(&self, addr: &str) -> io::Result<SocketAddr> {
        self.listen_on(TcpListener::bind(addr)?)
    }

    pub fn listen_on(&self, l: TcpListener) -> io::Result<SocketAddr> {
        let local = l.local_addr()?;
        *self.inner.endpoint.lock().unwrap() = Some(local.to_string());
        let pg = self.clone();
        thread::Builder::new()
            .name("playground-control".into())
            .spawn(move || {
                for s in l.incoming() {
                    let Ok(s) = s else { continue };
                    let pg = pg.clone();
                    let _ = thread::Builder::new()
                        .name("playground-client".into())
                        .spawn(move || pg.serve_control(s));
                }
            })?;
        Ok(local)
    }

    fn serve_control(&self, stream: TcpStream) {
        let Ok(mut w) = stream.try_clone() else { return };
        let mut r = BufReader::new(stream);
        loop {
            let reply = match control::read_message(&mut r) {
                Ok(None) => return,
                Ok(Some(ControlMessage::LoadPage(p))) => {
                    let page_id = p.page_id.clone();
                    let n = p.applets.len();
                    match self.load_page(p) {
                        Ok(()) => ControlMessage::LoadAck {
                            page_id,
                            ok: true,
                            detail: format!("{n} applet(s) loading"),
                        },
                        Err(e) => ControlMessage::LoadAck {
                            page_id,
                            ok: false,
                            detail: e.to_string(),
                        },
                    }
                }
                Ok(Some(ControlMessage::StatusQuery { page_id })) => ControlMessage::Status(self.status(&page_id)),
                Ok(Some(other)) => ControlMessage::Error(format!("unexpected message {other:?}")),
                Err(e) => {
                    let _ = control::write_message(&mut w, &ControlMessage::Error(e.to_string()));
                    return;
                }
            };
            if control::write_message(&mut w, &reply).is_err() {
                return;
            }
        }
    }
}

struct PageContext {
    cfg: PlaygroundConfig,
    policy: CapabilityPolicy,
    audit: AuditLog,
    snapshot: Arc<Mutex<PageSnapshot>>,
}

impl PageContext {
    fn publish(&self, vm: &Vm<Host>, host: &Host, settled: bool, finished: bool) {
        let mut classes: Vec<(String, usize)> = vm
            .loaded_classes()
            .map(|c| (c.name.clone(), std::rc::Rc::as_ptr(c) as usize))
            .collect();
        classes.sort();
        let channels = host
            .ep
            .open_connections()
            .into_iter()
            .filter_map(|c| host.ep.local(c).map(str::to_string))
            .collect();
        let label = host.ep.label().to_string();
        let mut s = self.snapshot.lock().unwrap();
        s.vm_id = vm.id();
        s.applets = host.reports();
        s.classes = classes;
        s.channels = channels;
        s.exported = host.exported_ids().iter().map(|id| format!("{label}#{id}")).collect();
        s.heap_len = vm.heap_len();
        s.fetched = vm.fetch_log().to_vec();
        s.incidents = host.incidents.clone();
        s.settled |= settled;
        s.finished |= finished;
    }
}

fn fetch_hook(fc: FetchConfig, codebase: String, policy: CapabilityPolicy, audit: AuditLog, page: String) -> FetchHook {
    Box::new(move |name: &str| {
        if policy_check_connect(&policy, &audit, &page, &fc.proxy, "class-fetch").is_err() {
            return Err(VmError::PolicyDenied(name.to_string()));
        }
        let origin = url::Url::parse(&codebase)
            .and_then(|b| b.join(&format!("{name}.mcfc")))
            .map_err(|_| VmError::ClassNotFound(name.to_string()))?;
        let mut target = url::Url::parse(&format!("http://{}/bundle", fc.proxy))
            .map_err(|_| VmError::ClassNotFound(name.to_string()))?;
        target.query_pairs_mut().append_pair("url", origin.as_str());
        let resp = match http::get(target.as_str(), None, &[(TOKEN_HEADER, &fc.token)]) {
            Ok(r) => r,
            Err(e) => {
                log::info!("class fetch for {name} failed: {e}");
                return Ok(None);
            }
        };
        if resp.status != 200 {
            return Ok(None);
        }
        if let Ok(b) = Bundle::parse(&resp.body) {
            return Ok(b.get(name).cloned());
        }
        Ok(parse_classfile(&resp.body).ok())
    })
}

fn fault_all(host: &mut Host, detail: &str) {
    for i in 0..host.applets.len() {
        if host.applets[i].status == AppletStatus::Loading {
            host.set_status(i, AppletStatus::Faulted, detail);
        }
    }
}

fn connect_checked(
    host: &mut Host,
    ctx: &PageContext,
    page: &str,
    endpoint: &str,
    purpose: &str,
) -> Result<ConnId, String> {
    policy_check_connect(&ctx.policy, &ctx.audit, page, endpoint, purpose).map_err(|e| format!("PolicyDenied: {e}"))?;
    host.ep.connect(endpoint).map_err(|e| e.to_string())
}

fn run_page(load: LoadPage, mut host: Host, ctx: PageContext) {
    let page = load.page_id.clone();
    let mut vm: Vm<Host> = Vm::new();
    vm.set_limits(ctx.cfg.limits);
    stubs::install(&mut vm);
    vm.add_local_bundle(&stubs::pgawt_bundle());
    if let (Some(fc), true) = (ctx.cfg.fetch.clone(), ctx.policy.network_fetch) {
        let codebase = load.applets.first().map(|a| a.codebase.clone()).unwrap_or_default();
        vm.set_fetch_hook(fetch_hook(
            fc,
            codebase,
            ctx.policy.clone(),
            ctx.audit.clone(),
            page.clone(),
        ));
    }

    for a in &load.applets {
        let mut slot = AppletSlot::new(&a.name, &a.address, &a.codebase, a.params.clone());
        let parsed = Bundle::parse(&a.bundle);
        if let Ok(b) = &parsed {
            if slot.name.is_empty() {
                slot.name = b.entries.first().map(|e| e.name.clone()).unwrap_or_default();
            }
            vm.add_page_bundle(b);
        }
        host.applets.push(slot);
        if let Err(e) = parsed {
            let i = host.applets.len() - 1;
            host.set_status(i, AppletStatus::Faulted, format!("VerifyStateInvalid: {e}"));
        }
    }
    ctx.publish(&vm, &host, false, false);

    let registry = if load.registry.is_empty() {
        ctx.cfg.registry.clone().unwrap_or_default()
    } else {
        load.registry.clone()
    };
    let reg = match connect_checked(&mut host, &ctx, &page, &registry, "registry") {
        Ok(c) => Some(c),
        Err(e) => {
            fault_all(&mut host, &format!("LookupFailed: registry {registry}: {e}"));
            None
        }
    };

    if let Some(reg) = reg {
        for i in 0..host.applets.len() {
            if host.applets[i].status != AppletStatus::Loading {
                continue;
            }
            let address = host.applets[i].address.clone();
            let r = match host.ep.lookup(reg, &address, ctx.cfg.lookup_timeout) {
                Ok(r) => r,
                Err(e) => {
                    let why = match e {
                        RopError::NotFound(_) => "not bound".to_string(),
                        e => e.to_string(),
                    };
                    host.set_status(i, AppletStatus::Faulted, format!("LookupFailed({address}): {why}"));
                    continue;
                }
            };
            let conn = match connect_checked(&mut host, &ctx, &page, &r.endpoint, "graphics-server") {
                Ok(c) => c,
                Err(e) => {
                    host.set_status(i, AppletStatus::Faulted, e);
                    continue;
                }
            };
            // scopes the new channel to this applet's session
            if let Err(e) = host.ep.lookup_once(conn, &address) {
                host.set_status(i, AppletStatus::Faulted, format!("LookupFailed({address}): {e}"));
                continue;
            }
            host.applets[i].conn = Some(conn);
            host.applets[i].server = Some(r);
            let _ = stubs::launch(&mut vm, &mut host, i);
            ctx.publish(&vm, &host, false, false);
        }
        host.ep.close(reg);
    }
    ctx.publish(&vm, &host, true, false);

    let running = |h: &Host| h.applets.iter().any(|a| a.status == AppletStatus::Running);
    while running(&host) {
        let Some(ev) = host.ep.next_event(None) else { break };
        match ev {
            Event::Invoke(call) => {
                let r = stubs::dispatch_incoming(&mut vm, &mut host, &call);
                let _ = host.ep.reply(&call, r);
            }
            Event::Local(HostTask::Stop) => {
                for i in 0..host.applets.len() {
                    stubs::shutdown(&mut vm, &mut host, i);
                }
                break;
            }
            Event::Closed { conn, .. } => {
                for i in 0..host.applets.len() {
                    if host.applets[i].conn == Some(conn) && host.applets[i].status == AppletStatus::Running {
                        host.set_status(i, AppletStatus::Stopped, "graphics server disconnected");
                    }
                }
            }
            Event::Request { .. } => {}
        }
        ctx.publish(&vm, &host, true, false);
    }
    ctx.publish(&vm, &host, true, true);
}
