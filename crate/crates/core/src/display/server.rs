//! The graphics server: per-address sessions, exported servants, input
//! injection and the bridge port.
//!
//! Every connection gets its own thread and endpoint. A connection is
//! scoped to one ContactAddress by its first `Lookup` of a local session;
//! afterwards it can reach only objects created in that session.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use super::image::Image;
use super::model::{DrawCommand, DrawEntry, EventKind, InputEvent, Widget, WidgetKind, WidgetTree, WindowBudget};
use crate::proxy::http;
use crate::rop::ws;
use crate::rop::{
    ConnId, Endpoint, Event, ExportTable, FaultCode, IncomingCall, LocalSender, Message, RegistryClient, RemoteFault,
    RemoteRef, RopError, WireValue,
};

pub type ImageSource = Arc<dyn Fn(&str) -> Result<Vec<u8>, String> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct DisplayConfig {
    pub max_windows: usize,
    /// Window creations per second, sustained.
    pub max_window_rate: f64,
    /// Pending injected events per session before the oldest is dropped.
    pub queue_limit: usize,
    /// Filter colormapped images pixel by pixel too.
    pub per_pixel_filter: bool,
    /// Send event coordinates along with the event ref.
    pub eager_event_copy: bool,
    pub delivery_timeout: Duration,
    /// HTTP proxy for image fetches.
    pub proxy: Option<String>,
    /// Also bind sessions in this registry.
    pub external_registry: Option<String>,
}

impl Default for DisplayConfig {
    fn default() -> Self {
        Self {
            max_windows: 32,
            max_window_rate: 4.0,
            queue_limit: 1024,
            per_pixel_filter: false,
            eager_event_copy: false,
            delivery_timeout: Duration::from_secs(30),
            proxy: None,
            external_registry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DisplayError {
    #[error("display is not listening yet")]
    NotListening,
    #[error("session {0} already open")]
    DuplicateSession(String),
    #[error("unknown surface {0}")]
    UnknownSurface(String),
    #[error("registry: {0}")]
    Registry(RopError),
}

/// Outcome of one injected event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Delivered { listeners: usize },
    NoListener,
    Dropped,
    Failed(String),
}

impl Delivery {
    pub fn to_text(&self) -> String {
        match self {
            Delivery::Delivered { listeners } => format!("delivered {listeners}"),
            Delivery::NoListener => "no-listener".into(),
            Delivery::Dropped => "dropped".into(),
            Delivery::Failed(why) => format!("failed {why}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub injected: u64,
    pub delivered: u64,
    pub no_listener: u64,
    pub dropped: u64,
    pub listener_faults: u64,
    pub filter_callbacks: u64,
}

impl SessionStats {
    pub fn to_text(&self) -> String {
        format!(
            "injected={} delivered={} no_listener={} dropped={} listener_faults={} filter_callbacks={}",
            self.injected, self.delivered, self.no_listener, self.dropped, self.listener_faults, self.filter_callbacks
        )
    }
}

#[derive(Clone)]
struct DObj {
    session: String,
    kind: DKind,
}

#[derive(Clone)]
enum DKind {
    Server,
    Graphics(u64),
    Event(InputEvent),
    Widget(u64),
    Terminal,
}

#[derive(Clone)]
enum ListenerKind {
    Mouse,
    Action(u64),
}

#[derive(Clone)]
struct Listener {
    kind: ListenerKind,
    conn: u64,
    tx: LocalSender<ConnTask>,
    target: u64,
}

impl Listener {
    fn wants(&self, ev: &InputEvent) -> bool {
        match self.kind {
            ListenerKind::Mouse => ev.kind.is_mouse(),
            ListenerKind::Action(w) => ev.kind == EventKind::Action && ev.target == w,
        }
    }
}

struct Pending {
    event: InputEvent,
    done: mpsc::Sender<Delivery>,
}

struct Session {
    address: String,
    surface: u64,
    tree: WidgetTree,
    log: super::model::DrawLog,
    images: Vec<Arc<Image>>,
    listeners: Vec<Listener>,
    queue: VecDeque<Pending>,
    stats: SessionStats,
    graphics: Option<RemoteRef>,
    terminal: Option<RemoteRef>,
}

enum ConnTask {
    Drain(String),
}

struct Shared {
    cfg: DisplayConfig,
    endpoint: Mutex<Option<String>>,
    bridge: Mutex<Option<String>>,
    registry: crate::rop::Registry,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    objects: ExportTable<DObj>,
    budget: Mutex<WindowBudget>,
    images: Mutex<ImageSource>,
    next_widget: AtomicU64,
    next_conn: AtomicU64,
}

impl Shared {
    fn session(&self, address: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap().get(address).cloned()
    }
}

fn lock(s: &Arc<Mutex<Session>>) -> MutexGuard<'_, Session> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

/// Handle to a running display. Cheap to clone.
#[derive(Clone)]
pub struct Display {
    shared: Arc<Shared>,
}

fn default_source(proxy: Option<String>) -> ImageSource {
    Arc::new(move |url: &str| {
        let r = http::get(url, proxy.as_deref(), &[]).map_err(|e| e.to_string())?;
        if r.status != 200 {
            return Err(format!("status {}", r.status));
        }
        Ok(r.body)
    })
}

fn fault(code: FaultCode, detail: impl Into<String>) -> RemoteFault {
    RemoteFault::new(code, detail)
}

fn no_such_object(id: u64) -> RemoteFault {
    fault(FaultCode::NoSuchObject, format!("object {id}"))
}

impl Display {
    pub fn new(cfg: DisplayConfig) -> Self {
        let budget = WindowBudget::new(cfg.max_windows, cfg.max_window_rate);
        let source = default_source(cfg.proxy.clone());
        Self {
            shared: Arc::new(Shared {
                cfg,
                endpoint: Mutex::new(None),
                bridge: Mutex::new(None),
                registry: crate::rop::Registry::new(),
                sessions: Mutex::new(HashMap::new()),
                objects: ExportTable::new(),
                budget: Mutex::new(budget),
                images: Mutex::new(source),
                next_widget: AtomicU64::new(1),
                next_conn: AtomicU64::new(1),
            }),
        }
    }

    pub fn config(&self) -> &DisplayConfig {
        &self.shared.cfg
    }

    /// The co-hosted registry.
    pub fn registry(&self) -> &crate::rop::Registry {
        &self.shared.registry
    }

    pub fn set_image_source(&self, src: ImageSource) {
        *self.shared.images.lock().unwrap() = src;
    }

    pub fn endpoint(&self) -> Option<String> {
        self.shared.endpoint.lock().unwrap().clone()
    }

    pub fn bridge_endpoint(&self) -> Option<String> {
        self.shared.bridge.lock().unwrap().clone()
    }

    /// Accept rop channels (and registry traffic) on `addr`.
    pub fn listen(&self, addr: &str) -> io::Result<SocketAddr> {
        let l = TcpListener::bind(addr)?;
        let local = l.local_addr()?;
        *self.shared.endpoint.lock().unwrap() = Some(local.to_string());
        self.spawn_acceptor(l, false);
        Ok(local)
    }

    /// Accept terminal clients: raw rop frames or WebSocket.
    pub fn listen_bridge(&self, addr: &str) -> io::Result<SocketAddr> {
        let l = TcpListener::bind(addr)?;
        let local = l.local_addr()?;
        *self.shared.bridge.lock().unwrap() = Some(local.to_string());
        self.spawn_acceptor(l, true);
        Ok(local)
    }

    fn spawn_acceptor(&self, l: TcpListener, bridge: bool) {
        let shared = self.shared.clone();
        let name = if bridge { "display-bridge" } else { "display-accept" };
        thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                for s in l.incoming() {
                    let Ok(s) = s else { continue };
                    let shared = shared.clone();
                    thread::Builder::new()
                        .name("display-conn".into())
                        .stack_size(8 << 20)
                        .spawn(move || run_conn(shared, s, bridge))
                        .expect("spawn display connection");
                }
            })
            .expect("spawn acceptor");
    }

    /// Start the graphics-server instance for one applet tag.
    pub fn open_session(&self, address: &str, width: u32, height: u32) -> Result<RemoteRef, DisplayError> {
        let sh = &self.shared;
        let endpoint = self.endpoint().ok_or(DisplayError::NotListening)?;
        let mut sessions = sh.sessions.lock().unwrap();
        if sessions.contains_key(address) {
            return Err(DisplayError::DuplicateSession(address.into()));
        }
        let surface = sh.next_widget.fetch_add(1, Ordering::Relaxed);
        let mut tree = WidgetTree::default();
        tree.insert(Widget {
            id: surface,
            kind: WidgetKind::Surface,
            parent: None,
            text: String::new(),
            width,
            height,
            visible: true,
            disposed: false,
        });
        let server_ref = sh.objects.export_ref(
            DObj {
                session: address.into(),
                kind: DKind::Server,
            },
            &endpoint,
            "BrowserServer",
        );
        sessions.insert(
            address.into(),
            Arc::new(Mutex::new(Session {
                address: address.into(),
                surface,
                tree,
                log: Default::default(),
                images: Vec::new(),
                listeners: Vec::new(),
                queue: VecDeque::new(),
                stats: SessionStats::default(),
                graphics: None,
                terminal: None,
            })),
        );
        drop(sessions);
        sh.registry.bind(address, server_ref.clone());
        if let Some(ext) = &sh.cfg.external_registry {
            RegistryClient::connect(ext)
                .and_then(|mut c| c.bind(address, server_ref.clone()))
                .map_err(DisplayError::Registry)?;
        }
        log::info!("session {address} open, surface {surface} {width}x{height}");
        Ok(server_ref)
    }

    pub fn sessions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.shared.sessions.lock().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    fn with_session<T>(&self, address: &str, f: impl FnOnce(&Session) -> T) -> Result<T, DisplayError> {
        let s = self
            .shared
            .session(address)
            .ok_or_else(|| DisplayError::UnknownSurface(address.into()))?;
        let g = lock(&s);
        Ok(f(&g))
    }

    pub fn draw_log(&self, address: &str) -> Result<Vec<DrawEntry>, DisplayError> {
        self.with_session(address, |s| s.log.entries().to_vec())
    }

    /// One command per line: `#seq ctx=N Command args...`.
    pub fn dump(&self, address: &str) -> Result<String, DisplayError> {
        self.with_session(address, |s| s.log.to_text())
    }

    pub fn widgets(&self, address: &str) -> Result<WidgetTree, DisplayError> {
        self.with_session(address, |s| s.tree.clone())
    }

    pub fn surface_id(&self, address: &str) -> Result<u64, DisplayError> {
        self.with_session(address, |s| s.surface)
    }

    pub fn stats(&self, address: &str) -> Result<SessionStats, DisplayError> {
        self.with_session(address, |s| s.stats.clone())
    }

    pub fn image(&self, address: &str, index: usize) -> Result<Option<Image>, DisplayError> {
        self.with_session(address, |s| s.images.get(index).map(|i| (**i).clone()))
    }

    pub fn image_count(&self, address: &str) -> Result<usize, DisplayError> {
        self.with_session(address, |s| s.images.len())
    }

    /// Store an image directly, as if fetched.
    pub fn put_image(&self, address: &str, img: Image) -> Result<usize, DisplayError> {
        let s = self
            .shared
            .session(address)
            .ok_or_else(|| DisplayError::UnknownSurface(address.into()))?;
        let mut g = lock(&s);
        g.images.push(Arc::new(img));
        Ok(g.images.len() - 1)
    }

    pub fn budget(&self) -> WindowBudget {
        self.shared.budget.lock().unwrap().clone()
    }

    pub fn exported_objects(&self) -> usize {
        self.shared.objects.len()
    }

    pub fn listener_count(&self, address: &str) -> Result<usize, DisplayError> {
        self.with_session(address, |s| s.listeners.len())
    }

    /// Queue an input event and wait until it has been dispatched.
    pub fn inject(&self, address: &str, ev: InputEvent) -> Result<Delivery, RemoteFault> {
        inject(&self.shared, address, ev)
    }
}

fn inject(sh: &Arc<Shared>, address: &str, mut ev: InputEvent) -> Result<Delivery, RemoteFault> {
    let session = sh
        .session(address)
        .ok_or_else(|| fault(FaultCode::UnknownSurface, address))?;
    let (tx, rx) = mpsc::channel();
    {
        let mut s = lock(&session);
        s.stats.injected += 1;
        if ev.kind == EventKind::Action {
            if s.tree.get(ev.target).is_none() {
                return Err(fault(FaultCode::UnknownSurface, format!("widget {}", ev.target)));
            }
        } else if ev.target == 0 {
            ev.target = s.surface;
        } else if ev.target != s.surface {
            return Err(fault(FaultCode::UnknownSurface, format!("surface {}", ev.target)));
        }
        let Some(conn_tx) = s.listeners.iter().find(|l| l.wants(&ev)).map(|l| l.tx.clone()) else {
            s.stats.no_listener += 1;
            return Ok(Delivery::NoListener);
        };
        while s.queue.len() >= sh.cfg.queue_limit.max(1) {
            let old = s.queue.pop_front().unwrap();
            s.stats.dropped += 1;
            let _ = old.done.send(Delivery::Dropped);
        }
        s.queue.push_back(Pending { event: ev, done: tx });
        if !conn_tx.send(ConnTask::Drain(address.to_string())) {
            s.queue.pop_back();
            s.stats.no_listener += 1;
            return Ok(Delivery::NoListener);
        }
    }
    match rx.recv_timeout(sh.cfg.delivery_timeout) {
        Ok(d) => Ok(d),
        Err(mpsc::RecvTimeoutError::Timeout) => Err(fault(FaultCode::Internal, "delivery timed out")),
        Err(mpsc::RecvTimeoutError::Disconnected) => Ok(Delivery::Dropped),
    }
}

struct ConnState {
    sh: Arc<Shared>,
    conn: ConnId,
    serial: u64,
    scope: Option<String>,
    bridge: bool,
    tx: LocalSender<ConnTask>,
}

fn run_conn(sh: Arc<Shared>, stream: TcpStream, bridge: bool) {
    let label = if bridge {
        sh.bridge.lock().unwrap().clone()
    } else {
        sh.endpoint.lock().unwrap().clone()
    }
    .unwrap_or_default();
    let mut ep: Endpoint<ConnTask> = Endpoint::new(label);
    let attached = if bridge && ws::is_websocket_upgrade(&stream).unwrap_or(false) {
        ws::accept_websocket(&mut ep, stream)
    } else {
        ep.attach_tcp(stream)
    };
    let conn = match attached {
        Ok(c) => c,
        Err(e) => {
            log::warn!("display connection setup failed: {e}");
            return;
        }
    };
    let serial = sh.next_conn.fetch_add(1, Ordering::Relaxed);
    let mut st = ConnState {
        tx: ep.local_sender(),
        sh,
        conn,
        serial,
        scope: None,
        bridge,
    };
    while let Some(ev) = ep.next_event(None) {
        match ev {
            Event::Invoke(call) => {
                let r = handle(&mut st, &mut ep, &call);
                let _ = ep.reply(&call, r);
            }
            Event::Request { conn, msg } => request(&mut st, &mut ep, conn, msg),
            Event::Local(ConnTask::Drain(address)) => drain(&mut st, &mut ep, &address),
            Event::Closed { .. } => break,
        }
    }
    let sessions: Vec<_> = st.sh.sessions.lock().unwrap().values().cloned().collect();
    for s in sessions {
        let mut g = lock(&s);
        g.listeners.retain(|l| l.conn != serial);
        let orphaned: Vec<Pending> = g.queue.drain(..).collect();
        let remaining = g.listeners.clone();
        for p in orphaned {
            if remaining.iter().any(|l| l.wants(&p.event)) {
                g.queue.push_back(p);
            } else {
                g.stats.no_listener += 1;
                let _ = p.done.send(Delivery::NoListener);
            }
        }
    }
}

fn request(st: &mut ConnState, ep: &mut Endpoint<ConnTask>, conn: ConnId, msg: Message) {
    let answer = match msg {
        Message::Bind { address, target } => {
            st.sh.registry.bind(&address, target);
            Message::BindAck
        }
        Message::Lookup { address } => {
            let local = st.sh.session(&address);
            if st.bridge {
                match local {
                    Some(s) => {
                        st.scope = Some(address.clone());
                        let mut g = lock(&s);
                        let label = ep.label().to_string();
                        let r = g
                            .terminal
                            .get_or_insert_with(|| {
                                st.sh.objects.export_ref(
                                    DObj {
                                        session: address.clone(),
                                        kind: DKind::Terminal,
                                    },
                                    &label,
                                    "Terminal",
                                )
                            })
                            .clone();
                        Message::LookupResult(Some(r))
                    }
                    None => Message::LookupResult(None),
                }
            } else {
                if local.is_some() && st.scope.is_none() {
                    st.scope = Some(address.clone());
                }
                Message::LookupResult(st.sh.registry.get(&address))
            }
        }
        other => {
            log::warn!("unexpected request {other:?}");
            return;
        }
    };
    let _ = ep.send(conn, &answer);
}

fn handle(st: &mut ConnState, ep: &mut Endpoint<ConnTask>, call: &IncomingCall) -> Result<WireValue, RemoteFault> {
    let obj = st
        .sh
        .objects
        .get(call.target)
        .ok_or_else(|| no_such_object(call.target))?;
    if st.scope.as_deref() != Some(obj.session.as_str()) {
        return Err(no_such_object(call.target));
    }
    let session = st.sh.session(&obj.session).ok_or_else(|| no_such_object(call.target))?;
    let m = call.method.as_str();
    let a = &call.args[..];
    match obj.kind {
        DKind::Server => server_call(st, ep, &session, m, a),
        DKind::Graphics(ctx) => graphics_call(&session, ctx, m, a),
        DKind::Event(ev) => event_call(&ev, m, a),
        DKind::Widget(id) => widget_call(st, &session, id, m, a),
        DKind::Terminal if st.bridge => terminal_call(st, &obj.session, m, a),
        DKind::Terminal => Err(no_such_object(call.target)),
    }
}

fn arity(m: &str, a: &[WireValue], n: usize) -> Result<(), RemoteFault> {
    if a.len() != n {
        return Err(fault(
            FaultCode::BadArguments,
            format!("{m} takes {n} arguments, got {}", a.len()),
        ));
    }
    Ok(())
}

fn int(m: &str, a: &[WireValue], i: usize) -> Result<i32, RemoteFault> {
    a[i].as_i32()
        .ok_or_else(|| fault(FaultCode::BadArguments, format!("{m}: argument {i} must be I32")))
}

fn string<'a>(m: &str, a: &'a [WireValue], i: usize) -> Result<&'a str, RemoteFault> {
    a[i].as_str()
        .ok_or_else(|| fault(FaultCode::BadArguments, format!("{m}: argument {i} must be Str")))
}

fn remote<'a>(m: &str, a: &'a [WireValue], i: usize) -> Result<&'a RemoteRef, RemoteFault> {
    a[i].as_remote()
        .ok_or_else(|| fault(FaultCode::BadArguments, format!("{m}: argument {i} must be Remote")))
}

/// Widget id behind a ref from this session.
fn widget_of(st: &ConnState, session: &str, r: &RemoteRef) -> Result<u64, RemoteFault> {
    match st.sh.objects.get(r.object_id) {
        Some(DObj {
            session: s,
            kind: DKind::Widget(id),
        }) if s == session => Ok(id),
        _ => Err(no_such_object(r.object_id)),
    }
}

fn server_call(
    st: &mut ConnState,
    ep: &mut Endpoint<ConnTask>,
    session: &Arc<Mutex<Session>>,
    m: &str,
    a: &[WireValue],
) -> Result<WireValue, RemoteFault> {
    match m {
        "addPGMouseListener" => {
            arity(m, a, 1)?;
            let target = remote(m, a, 0)?.object_id;
            lock(session).listeners.push(Listener {
                kind: ListenerKind::Mouse,
                conn: st.serial,
                tx: st.tx.clone(),
                target,
            });
            Ok(WireValue::Null)
        }
        "getBrowserGraphics" => {
            arity(m, a, 0)?;
            let mut g = lock(session);
            let (addr, surface) = (g.address.clone(), g.surface);
            let label = ep.label().to_string();
            let r = g
                .graphics
                .get_or_insert_with(|| {
                    st.sh.objects.export_ref(
                        DObj {
                            session: addr,
                            kind: DKind::Graphics(surface),
                        },
                        &label,
                        "BrowserGraphics",
                    )
                })
                .clone();
            Ok(WireValue::Remote(r))
        }
        "constructFrame" | "constructButton" | "constructLabel" | "constructTextField" => {
            arity(m, a, 1)?;
            let kind: WidgetKind = m["construct".len()..].parse().unwrap();
            construct(st, ep, session, kind, string(m, a, 0)?)
        }
        "construct" => {
            arity(m, a, 2)?;
            let kind: WidgetKind = string(m, a, 0)?
                .parse()
                .map_err(|e: String| fault(FaultCode::UnknownKind, e))?;
            construct(st, ep, session, kind, string(m, a, 1)?)
        }
        "add" => {
            arity(m, a, 1)?;
            let mut g = lock(session);
            let child = widget_of(st, &g.address, remote(m, a, 0)?)?;
            let surface = g.surface;
            g.tree
                .reparent(child, surface)
                .map_err(|e| fault(FaultCode::BadArguments, e))?;
            Ok(WireValue::Null)
        }
        "getImage" => {
            arity(m, a, 2)?;
            let url = join_url(string(m, a, 0)?, string(m, a, 1)?);
            let source = st.sh.images.lock().unwrap().clone();
            let bytes = source(&url).map_err(|e| fault(FaultCode::FetchFailed, format!("{url}: {e}")))?;
            let img = Image::decode(&bytes).map_err(|e| fault(FaultCode::UnsupportedImageFormat, e.to_string()))?;
            let mut g = lock(session);
            g.images.push(Arc::new(img));
            Ok(WireValue::I32((g.images.len() - 1) as i32))
        }
        "filterImage" => {
            arity(m, a, 2)?;
            let index = int(m, a, 0)?;
            let filter = remote(m, a, 1)?.object_id;
            filter_image(st, ep, session, index, filter)
        }
        _ => Err(fault(FaultCode::NoSuchMethod, m)),
    }
}

fn join_url(base: &str, name: &str) -> String {
    match url::Url::parse(base).and_then(|b| b.join(name)) {
        Ok(u) => u.to_string(),
        Err(_) => format!("{base}{name}"),
    }
}

fn construct(
    st: &mut ConnState,
    ep: &Endpoint<ConnTask>,
    session: &Arc<Mutex<Session>>,
    kind: WidgetKind,
    text: &str,
) -> Result<WireValue, RemoteFault> {
    if kind == WidgetKind::Surface {
        return Err(fault(FaultCode::UnknownKind, "surfaces come from the page"));
    }
    if kind.is_window() {
        let r = st.sh.budget.lock().unwrap().try_create();
        if let Err(why) = r {
            log::warn!("window refused: {why}");
            return Err(fault(FaultCode::BudgetExceeded, why));
        }
    }
    let id = st.sh.next_widget.fetch_add(1, Ordering::Relaxed);
    let mut g = lock(session);
    g.tree.insert(Widget {
        id,
        kind,
        parent: None,
        text: text.to_string(),
        width: 0,
        height: 0,
        visible: false,
        disposed: false,
    });
    let r = st.sh.objects.export_ref(
        DObj {
            session: g.address.clone(),
            kind: DKind::Widget(id),
        },
        ep.label(),
        kind.interface(),
    );
    Ok(WireValue::Remote(r))
}

fn filter_image(
    st: &mut ConnState,
    ep: &mut Endpoint<ConnTask>,
    session: &Arc<Mutex<Session>>,
    index: i32,
    filter: u64,
) -> Result<WireValue, RemoteFault> {
    let img = {
        let g = lock(session);
        usize::try_from(index)
            .ok()
            .and_then(|i| g.images.get(i).cloned())
            .ok_or_else(|| fault(FaultCode::NoSuchObjectIndex, format!("image {index}")))?
    };
    let conn = st.conn;
    let mut calls = 0u64;
    let mut callback = |st: &mut ConnState, ep: &mut Endpoint<ConnTask>, x: i32, y: i32, rgb: u32| {
        calls += 1;
        let args = vec![WireValue::I32(x), WireValue::I32(y), WireValue::I32(rgb as i32)];
        let r = ep.invoke_with(conn, filter, "filterRGB", args, &mut |ep, c| handle(st, ep, c));
        match r {
            Ok(WireValue::I32(v)) => Ok(v as u32 & 0xFF_FFFF),
            Ok(other) => Err(fault(FaultCode::BadArguments, format!("filterRGB returned {other:?}"))),
            Err(RopError::Fault(f)) => Err(f),
            Err(e) => Err(fault(FaultCode::Internal, e.to_string())),
        }
    };
    let result = (|| {
        Ok(match (&img.colormap, st.sh.cfg.per_pixel_filter) {
            (Some(cmap), false) => {
                let mut out = Vec::with_capacity(cmap.len());
                for &c in cmap {
                    out.push(callback(st, ep, -1, -1, c)?);
                }
                Image {
                    colormap: Some(out),
                    ..(*img).clone()
                }
            }
            _ => {
                let mut px = Vec::with_capacity(img.pixels.len());
                for y in 0..img.height {
                    for x in 0..img.width {
                        px.push(callback(st, ep, x as i32, y as i32, img.rgb_at(x, y))?);
                    }
                }
                Image::direct(img.width, img.height, px)
            }
        })
    })();
    let mut g = lock(session);
    g.stats.filter_callbacks += calls;
    let out = result?;
    g.images.push(Arc::new(out));
    Ok(WireValue::I32((g.images.len() - 1) as i32))
}

fn graphics_call(session: &Arc<Mutex<Session>>, ctx: u64, m: &str, a: &[WireValue]) -> Result<WireValue, RemoteFault> {
    let cmd = match m {
        "drawString" => {
            arity(m, a, 3)?;
            DrawCommand::DrawString {
                text: string(m, a, 0)?.to_string(),
                x: int(m, a, 1)?,
                y: int(m, a, 2)?,
            }
        }
        "drawLine" => {
            arity(m, a, 4)?;
            DrawCommand::DrawLine {
                x1: int(m, a, 0)?,
                y1: int(m, a, 1)?,
                x2: int(m, a, 2)?,
                y2: int(m, a, 3)?,
            }
        }
        "drawRect" => {
            arity(m, a, 4)?;
            DrawCommand::DrawRect {
                x: int(m, a, 0)?,
                y: int(m, a, 1)?,
                w: int(m, a, 2)?,
                h: int(m, a, 3)?,
            }
        }
        "drawImage" => {
            arity(m, a, 3)?;
            DrawCommand::DrawImage {
                index: int(m, a, 0)? as u32,
                x: int(m, a, 1)?,
                y: int(m, a, 2)?,
            }
        }
        _ => return Err(fault(FaultCode::NoSuchMethod, m)),
    };
    let mut g = lock(session);
    if let DrawCommand::DrawImage { index, .. } = cmd {
        if index as usize >= g.images.len() {
            return Err(fault(FaultCode::NoSuchObjectIndex, format!("image {index}")));
        }
    }
    g.log.append(ctx, cmd);
    Ok(WireValue::Null)
}

fn event_call(ev: &InputEvent, m: &str, a: &[WireValue]) -> Result<WireValue, RemoteFault> {
    arity(m, a, 0)?;
    match m {
        "getX" => Ok(WireValue::I32(ev.x)),
        "getY" => Ok(WireValue::I32(ev.y)),
        "getKind" => Ok(WireValue::Str(ev.kind.name().into())),
        _ => Err(fault(FaultCode::NoSuchMethod, m)),
    }
}

fn widget_call(
    st: &mut ConnState,
    session: &Arc<Mutex<Session>>,
    id: u64,
    m: &str,
    a: &[WireValue],
) -> Result<WireValue, RemoteFault> {
    let mut g = lock(session);
    let addr = g.address.clone();
    match m {
        "setText" => {
            arity(m, a, 1)?;
            g.tree.get_mut(id).unwrap().text = string(m, a, 0)?.to_string();
            Ok(WireValue::Null)
        }
        "getText" => {
            arity(m, a, 0)?;
            Ok(WireValue::Str(g.tree.get(id).unwrap().text.clone()))
        }
        "add" => {
            arity(m, a, 1)?;
            let child = widget_of(st, &addr, remote(m, a, 0)?)?;
            g.tree
                .reparent(child, id)
                .map_err(|e| fault(FaultCode::BadArguments, e))?;
            Ok(WireValue::Null)
        }
        "show" => {
            arity(m, a, 0)?;
            g.tree.get_mut(id).unwrap().visible = true;
            Ok(WireValue::Null)
        }
        "dispose" => {
            arity(m, a, 0)?;
            let w = g.tree.get_mut(id).unwrap();
            if !w.disposed {
                w.disposed = true;
                w.visible = false;
                if w.kind.is_window() {
                    st.sh.budget.lock().unwrap().release();
                }
            }
            Ok(WireValue::Null)
        }
        "addPGActionListener" => {
            arity(m, a, 1)?;
            let target = remote(m, a, 0)?.object_id;
            g.listeners.push(Listener {
                kind: ListenerKind::Action(id),
                conn: st.serial,
                tx: st.tx.clone(),
                target,
            });
            Ok(WireValue::Null)
        }
        _ => Err(fault(FaultCode::NoSuchMethod, m)),
    }
}

fn terminal_call(st: &mut ConnState, address: &str, m: &str, a: &[WireValue]) -> Result<WireValue, RemoteFault> {
    let session = st
        .sh
        .session(address)
        .ok_or_else(|| fault(FaultCode::UnknownSurface, address))?;
    match m {
        "injectEvent" => {
            arity(m, a, 4)?;
            let kind: EventKind = string(m, a, 0)?
                .parse()
                .map_err(|e: String| fault(FaultCode::UnknownKind, e))?;
            let ev = InputEvent {
                kind,
                x: int(m, a, 1)?,
                y: int(m, a, 2)?,
                target: int(m, a, 3)? as u32 as u64,
            };
            let d = inject(&st.sh, address, ev)?;
            Ok(WireValue::Str(d.to_text()))
        }
        "drawLog" => {
            arity(m, a, 1)?;
            let since = int(m, a, 0)?.max(0) as usize;
            let g = lock(&session);
            let text: String = g.log.entries().iter().skip(since).map(|e| format!("{e}\n")).collect();
            Ok(WireValue::Str(text))
        }
        "widgets" => {
            arity(m, a, 0)?;
            Ok(WireValue::Str(lock(&session).tree.to_text()))
        }
        "stats" => {
            arity(m, a, 0)?;
            Ok(WireValue::Str(lock(&session).stats.to_text()))
        }
        "surface" => {
            arity(m, a, 0)?;
            let g = lock(&session);
            let w = g.tree.get(g.surface).unwrap();
            Ok(WireValue::Str(format!("{} {}x{}", w.id, w.width, w.height)))
        }
        "imagePixels" => {
            arity(m, a, 1)?;
            let i = int(m, a, 0)?;
            let g = lock(&session);
            let img = usize::try_from(i)
                .ok()
                .and_then(|i| g.images.get(i))
                .ok_or_else(|| fault(FaultCode::NoSuchObjectIndex, format!("image {i}")))?;
            Ok(WireValue::Bytes(img.encode()))
        }
        _ => Err(fault(FaultCode::NoSuchMethod, m)),
    }
}

fn drain(st: &mut ConnState, ep: &mut Endpoint<ConnTask>, address: &str) {
    let Some(session) = st.sh.session(address) else { return };
    loop {
        let (pending, listeners) = {
            let mut g = lock(&session);
            let Some(p) = g.queue.pop_front() else { return };
            let ls: Vec<Listener> = g
                .listeners
                .iter()
                .filter(|l| l.conn == st.serial && l.wants(&p.event))
                .cloned()
                .collect();
            (p, ls)
        };
        if listeners.is_empty() {
            lock(&session).stats.no_listener += 1;
            let _ = pending.done.send(Delivery::NoListener);
            continue;
        }
        let ev = pending.event.clone();
        let Some(method) = ev.kind.callback() else {
            lock(&session).stats.no_listener += 1;
            let _ = pending.done.send(Delivery::NoListener);
            continue;
        };
        let mut failure = None;
        for l in &listeners {
            let ev_ref = st.sh.objects.export_ref(
                DObj {
                    session: address.to_string(),
                    kind: DKind::Event(ev.clone()),
                },
                ep.label(),
                "BrowserEvent",
            );
            let id = ev_ref.object_id;
            let mut args = vec![WireValue::Remote(ev_ref)];
            if st.sh.cfg.eager_event_copy {
                args.push(WireValue::I32(ev.x));
                args.push(WireValue::I32(ev.y));
            }
            let conn = st.conn;
            let r = ep.invoke_with(conn, l.target, method, args, &mut |ep, c| handle(st, ep, c));
            st.sh.objects.unexport(id);
            if let Err(e) = r {
                log::info!("listener on {address} faulted: {e}");
                lock(&session).stats.listener_faults += 1;
                failure = Some(e.to_string());
            }
        }
        let mut g = lock(&session);
        g.stats.delivered += 1;
        drop(g);
        let _ = pending.done.send(match failure {
            Some(f) => Delivery::Failed(f),
            None => Delivery::Delivered {
                listeners: listeners.len(),
            },
        });
    }
}
