//! The `pgawt` stub library and its native bindings.
//!
//! Each stub object on the playground holds a remote reference to the
//! matching servant on the display. Native methods marshal their arguments
//! into wire values and invoke the servant; while a call is outstanding the
//! display may call back (events, image filters), and those callbacks run
//! re-entrantly on the same VM.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::mcf::{assemble_bundle, Bundle, NativeCall, NativeFault, NativeKey, ObjRef, Vm, VmError, VmValue};
use crate::rop::{
    ConnId, Endpoint, EndpointConfig, FaultCode, IncomingCall, RemoteFault, RemoteRef, RopError, Wait, WireValue,
};

pub const PGAWT_SOURCE: &str = include_str!("pgawt.mcfa");

pub const APPLET_CLASS: &str = "pgawt/PGApplet";
pub const MOUSE_EVENT_CLASS: &str = "pgawt/PGMouseEvent";
const LISTENER_DESC: &str = "(Lpgawt/PGMouseEvent;)V";
const ACTION_DESC: &str = "(Llang/Object;)V";

/// The stub library as a bundle, ready for a VM's local path.
pub fn pgawt_bundle() -> Bundle {
    assemble_bundle(PGAWT_SOURCE).expect("pgawt assembles")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppletStatus {
    Loading,
    Running,
    Faulted,
    Stopped,
}

impl AppletStatus {
    pub fn name(self) -> &'static str {
        match self {
            AppletStatus::Loading => "loading",
            AppletStatus::Running => "running",
            AppletStatus::Faulted => "faulted",
            AppletStatus::Stopped => "stopped",
        }
    }
}

impl fmt::Display for AppletStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AppletStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "loading" => AppletStatus::Loading,
            "running" => AppletStatus::Running,
            "faulted" => AppletStatus::Faulted,
            "stopped" => AppletStatus::Stopped,
            _ => return Err(format!("unknown status {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppletReport {
    pub name: String,
    pub address: String,
    pub status: AppletStatus,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct AppletSlot {
    pub name: String,
    pub address: String,
    pub codebase: String,
    pub params: Vec<(String, String)>,
    pub object: Option<ObjRef>,
    pub conn: Option<ConnId>,
    pub server: Option<RemoteRef>,
    pub status: AppletStatus,
    pub detail: String,
    mouse: Vec<ObjRef>,
    mouse_host: Option<u64>,
}

impl AppletSlot {
    pub fn new(name: &str, address: &str, codebase: &str, params: Vec<(String, String)>) -> Self {
        Self {
            name: name.into(),
            address: address.into(),
            codebase: codebase.into(),
            params,
            object: None,
            conn: None,
            server: None,
            status: AppletStatus::Loading,
            detail: String::new(),
            mouse: Vec::new(),
            mouse_host: None,
        }
    }

    pub fn mouse_listeners(&self) -> &[ObjRef] {
        &self.mouse
    }
}

#[derive(Debug, Clone)]
enum Exported {
    Mouse(usize),
    Action { applet: usize, widget: ObjRef },
    Filter { applet: usize, filter: ObjRef },
}

#[derive(Debug, Clone)]
struct RemoteStub {
    conn: ConnId,
    target: RemoteRef,
    coords: Option<(i32, i32)>,
}

/// Local work posted to a page thread.
#[derive(Debug)]
pub enum HostTask {
    Stop,
}

/// Per-page state the natives operate on.
pub struct Host {
    pub ep: Endpoint<HostTask>,
    pub applets: Vec<AppletSlot>,
    active: Vec<usize>,
    stubs: HashMap<ObjRef, RemoteStub>,
    actions: HashMap<ObjRef, (Vec<ObjRef>, u64)>,
    exports: HashMap<u64, Exported>,
    next_export: u64,
    /// Faults and anomalies, oldest first.
    pub incidents: Vec<String>,
}

fn nf(kind: &str, detail: impl Into<String>) -> VmError {
    VmError::Native(NativeFault {
        kind: kind.into(),
        detail: detail.into(),
    })
}

fn from_rop(e: RopError) -> VmError {
    match e {
        RopError::Fault(f) => nf(&f.code.name(), f.detail),
        RopError::ChannelClosed => nf("CHANNEL_CLOSED", "graphics server went away"),
        RopError::Timeout => nf("TIMEOUT", "no reply from graphics server"),
        other => nf("INTERNAL", other.to_string()),
    }
}

/// Fault code a VM error should travel as.
pub fn fault_of(e: &VmError) -> RemoteFault {
    match e {
        VmError::Native(n) => match FaultCode::from_name(&n.kind) {
            Some(c) => RemoteFault::new(c, n.detail.clone()),
            None => RemoteFault::new(FaultCode::AppletFault, e.to_string()),
        },
        _ => RemoteFault::new(FaultCode::AppletFault, e.to_string()),
    }
}

impl Host {
    pub fn new(label: impl Into<String>, cfg: EndpointConfig) -> Self {
        Self {
            ep: Endpoint::with_config(label, cfg),
            applets: Vec::new(),
            active: Vec::new(),
            stubs: HashMap::new(),
            actions: HashMap::new(),
            exports: HashMap::new(),
            next_export: 1,
            incidents: Vec::new(),
        }
    }

    pub fn reports(&self) -> Vec<AppletReport> {
        self.applets
            .iter()
            .map(|a| AppletReport {
                name: a.name.clone(),
                address: a.address.clone(),
                status: a.status,
                detail: a.detail.clone(),
            })
            .collect()
    }

    /// Object ids this page has exported to displays.
    pub fn exported_ids(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.exports.keys().copied().collect();
        v.sort();
        v
    }

    /// Number of live stub objects bound to remote servants.
    pub fn stub_count(&self) -> usize {
        self.stubs.len()
    }

    pub fn set_status(&mut self, applet: usize, status: AppletStatus, detail: impl Into<String>) {
        let a = &mut self.applets[applet];
        a.status = status;
        a.detail = detail.into();
        if status == AppletStatus::Faulted {
            let line = format!("applet {} ({}) faulted: {}", a.name, a.address, a.detail);
            log::warn!("{line}");
            self.incidents.push(line);
        }
    }

    fn export(&mut self, what: Exported) -> u64 {
        let id = self.next_export;
        self.next_export += 1;
        self.exports.insert(id, what);
        id
    }

    fn local_ref(&self, id: u64, iface: &str) -> RemoteRef {
        RemoteRef {
            endpoint: self.ep.label().to_string(),
            object_id: id,
            interface: iface.into(),
        }
    }

    fn current(&self) -> Result<usize, VmError> {
        self.active
            .last()
            .copied()
            .ok_or_else(|| nf("INTERNAL", "stub called outside an applet activation"))
    }

    fn applet_of(&self, obj: ObjRef) -> Result<usize, VmError> {
        self.applets
            .iter()
            .position(|a| a.object == Some(obj))
            .ok_or_else(|| nf("NO_SUCH_OBJECT", "not a running applet"))
    }

    fn server(&self, applet: usize) -> Result<(ConnId, u64), VmError> {
        let a = &self.applets[applet];
        match (a.conn, &a.server) {
            (Some(c), Some(r)) => Ok((c, r.object_id)),
            _ => Err(nf(
                "NO_SUCH_OBJECT",
                format!("applet {} has no graphics server", a.name),
            )),
        }
    }

    fn stub(&self, obj: ObjRef) -> Result<(ConnId, u64), VmError> {
        self.stubs
            .get(&obj)
            .map(|s| (s.conn, s.target.object_id))
            .ok_or_else(|| nf("NO_SUCH_OBJECT", "stub is not bound to a remote object"))
    }

    fn bind_stub(&mut self, obj: ObjRef, conn: ConnId, v: WireValue) -> Result<(), VmError> {
        match v {
            WireValue::Remote(target) => {
                self.stubs.insert(
                    obj,
                    RemoteStub {
                        conn,
                        target,
                        coords: None,
                    },
                );
                Ok(())
            }
            other => Err(nf(
                "BAD_ARGUMENTS",
                format!("expected a remote reference, got {other:?}"),
            )),
        }
    }
}

/// Invoke on the display and service nested callbacks until the reply.
pub fn remote_call(
    vm: &mut Vm<Host>,
    host: &mut Host,
    conn: ConnId,
    target: u64,
    method: &str,
    args: Vec<WireValue>,
) -> Result<WireValue, VmError> {
    let id = host.ep.send_invoke(conn, target, method, args).map_err(from_rop)?;
    loop {
        match host.ep.wait_reply(conn, id).map_err(from_rop)? {
            Wait::Done(Ok(v)) => return Ok(v),
            Wait::Done(Err(f)) => return Err(from_rop(RopError::Fault(f))),
            Wait::Incoming(call) => {
                let r = dispatch_incoming(vm, host, &call);
                let _ = host.ep.reply(&call, r);
            }
        }
    }
}

fn string_arg(vm: &Vm<Host>, v: &VmValue) -> Result<WireValue, VmError> {
    match v {
        VmValue::Null => Ok(WireValue::Null),
        VmValue::Ref(r) => vm
            .string_value(*r)
            .map(|s| WireValue::Str(s.to_string()))
            .ok_or_else(|| nf("UNSERIALIZABLE_VALUE", "expected a string")),
        _ => Err(nf("BAD_ARGUMENTS", "expected a string")),
    }
}

fn int_arg(v: &VmValue) -> Result<WireValue, VmError> {
    v.as_i32()
        .map(WireValue::I32)
        .ok_or_else(|| nf("BAD_ARGUMENTS", "expected an int"))
}

/// Marshal an arbitrary VM value. Only primitives, strings, stubs and
/// image handles have a wire form; anything else is refused here, before
/// a frame is built.
pub fn marshal(vm: &Vm<Host>, host: &Host, v: &VmValue) -> Result<WireValue, VmError> {
    match v {
        VmValue::Null => Ok(WireValue::Null),
        VmValue::I32(i) => Ok(WireValue::I32(*i)),
        VmValue::F64(d) => Ok(WireValue::F64(*d)),
        VmValue::Bool(b) => Ok(WireValue::Bool(*b)),
        VmValue::Ref(r) => {
            if let Some(s) = vm.string_value(*r) {
                return Ok(WireValue::Str(s.to_string()));
            }
            if let Some(s) = host.stubs.get(r) {
                return Ok(WireValue::Remote(s.target.clone()));
            }
            if vm.is_instance(*r, "pgawt/PGImage") {
                return image_index(vm, *r).map(WireValue::I32);
            }
            let class = vm.class_of(*r).map(|c| c.name.clone()).unwrap_or_default();
            Err(nf("UNSERIALIZABLE_VALUE", format!("{class} cannot be passed by value")))
        }
    }
}

fn image_index(vm: &Vm<Host>, img: ObjRef) -> Result<i32, VmError> {
    match vm.get_field(img, "index")? {
        Some(VmValue::I32(i)) => Ok(i),
        _ => Err(nf(
            "NO_SUCH_OBJECT_INDEX",
            "image was not created by the graphics server",
        )),
    }
}

fn new_image(vm: &mut Vm<Host>, v: WireValue) -> Result<VmValue, VmError> {
    let idx = v
        .as_i32()
        .ok_or_else(|| nf("BAD_ARGUMENTS", "graphics server returned a non-index image"))?;
    let img = vm.instantiate("pgawt/PGImage")?;
    vm.set_field(img, "index", VmValue::I32(idx))?;
    Ok(VmValue::Ref(img))
}

fn new_str(vm: &mut Vm<Host>, v: WireValue) -> Result<VmValue, VmError> {
    match v {
        WireValue::Str(s) => Ok(VmValue::Ref(vm.new_string(&s)?)),
        WireValue::Null => Ok(VmValue::Null),
        other => Err(nf("BAD_ARGUMENTS", format!("expected a string, got {other:?}"))),
    }
}

fn listener_arg(call: &NativeCall) -> Result<ObjRef, VmError> {
    call.args[0]
        .as_ref()
        .ok_or_else(|| nf("BAD_ARGUMENTS", "listener must not be null"))
}

type Native = fn(&mut Vm<Host>, &mut Host, NativeCall) -> Result<VmValue, VmError>;

fn bind(vm: &mut Vm<Host>, class: &str, name: &str, desc: &str, f: Native) {
    vm.bind_native(NativeKey::new(class, name, desc), Rc::new(f));
}

/// Bind every native in the stub library.
pub fn install(vm: &mut Vm<Host>) {
    let a = APPLET_CLASS;
    bind(vm, a, "addMouseListener", "(Llang/Object;)V", applet_add_mouse_listener);
    bind(vm, a, "getGraphics", "()Lpgawt/PGGraphics;", applet_get_graphics);
    bind(
        vm,
        a,
        "getImage",
        "(Llang/String;Llang/String;)Lpgawt/PGImage;",
        applet_get_image,
    );
    bind(
        vm,
        a,
        "createFilteredImage",
        "(Lpgawt/PGImage;Lpgawt/PGRGBImageFilter;)Lpgawt/PGImage;",
        applet_filter_image,
    );
    bind(vm, a, "add", "(Llang/Object;)V", applet_add);
    bind(vm, a, "getCodeBase", "()Llang/String;", applet_code_base);
    bind(vm, a, "getParameter", "(Llang/String;)Llang/String;", applet_parameter);

    let g = "pgawt/PGGraphics";
    bind(vm, g, "drawString", "(Llang/String;II)V", graphics_draw_string);
    bind(vm, g, "drawLine", "(IIII)V", graphics_draw_ints);
    bind(vm, g, "drawRect", "(IIII)V", graphics_draw_ints);
    bind(vm, g, "drawImage", "(Lpgawt/PGImage;II)V", graphics_draw_image);

    bind(vm, MOUSE_EVENT_CLASS, "getX", "()I", event_coord);
    bind(vm, MOUSE_EVENT_CLASS, "getY", "()I", event_coord);

    for (class, ctor) in [
        ("pgawt/PGFrame", widget_new as Native),
        ("pgawt/PGButton", widget_new),
        ("pgawt/PGLabel", widget_new),
        ("pgawt/PGTextField", widget_new),
    ] {
        bind(vm, class, "<init>", "(Llang/String;)V", ctor);
        bind(vm, class, "setText", "(Llang/String;)V", widget_set_text);
        bind(vm, class, "getText", "()Llang/String;", widget_get_text);
    }
    bind(vm, "pgawt/PGFrame", "add", "(Llang/Object;)V", widget_add);
    bind(vm, "pgawt/PGFrame", "show", "()V", widget_plain);
    bind(vm, "pgawt/PGFrame", "dispose", "()V", widget_plain);
    bind(
        vm,
        "pgawt/PGButton",
        "addActionListener",
        "(Llang/Object;)V",
        widget_add_action,
    );
    bind(
        vm,
        "pgawt/PGTextField",
        "addActionListener",
        "(Llang/Object;)V",
        widget_add_action,
    );
}

fn applet_add_mouse_listener(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let listener = listener_arg(&call)?;
    host.applets[applet].mouse.push(listener);
    if host.applets[applet].mouse_host.is_none() {
        let id = host.export(Exported::Mouse(applet));
        host.applets[applet].mouse_host = Some(id);
        let (conn, server) = host.server(applet)?;
        let r = host.local_ref(id, "PGMouseListener");
        remote_call(vm, host, conn, server, "addPGMouseListener", vec![WireValue::Remote(r)])?;
    }
    Ok(VmValue::Null)
}

fn applet_get_graphics(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let (conn, server) = host.server(applet)?;
    let r = remote_call(vm, host, conn, server, "getBrowserGraphics", vec![])?;
    let g = vm.instantiate("pgawt/PGGraphics")?;
    host.bind_stub(g, conn, r)?;
    Ok(VmValue::Ref(g))
}

fn applet_get_image(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let (conn, server) = host.server(applet)?;
    let args = vec![string_arg(vm, &call.args[0])?, string_arg(vm, &call.args[1])?];
    let v = remote_call(vm, host, conn, server, "getImage", args)?;
    new_image(vm, v)
}

fn applet_filter_image(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let (conn, server) = host.server(applet)?;
    let img = call.args[0]
        .as_ref()
        .ok_or_else(|| nf("BAD_ARGUMENTS", "image must not be null"))?;
    let index = image_index(vm, img)?;
    let filter = call.args[1]
        .as_ref()
        .ok_or_else(|| nf("BAD_ARGUMENTS", "filter must not be null"))?;
    let id = host.export(Exported::Filter { applet, filter });
    let r = host.local_ref(id, "PGRGBImageFilter");
    let out = remote_call(
        vm,
        host,
        conn,
        server,
        "filterImage",
        vec![WireValue::I32(index), WireValue::Remote(r)],
    );
    host.exports.remove(&id);
    new_image(vm, out?)
}

fn applet_add(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let (conn, server) = host.server(applet)?;
    let arg = marshal(vm, host, &call.args[0])?;
    remote_call(vm, host, conn, server, "add", vec![arg])?;
    Ok(VmValue::Null)
}

fn applet_code_base(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let base = host.applets[applet].codebase.clone();
    Ok(VmValue::Ref(vm.new_string(&base)?))
}

fn applet_parameter(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.applet_of(call.receiver)?;
    let WireValue::Str(name) = string_arg(vm, &call.args[0])? else {
        return Ok(VmValue::Null);
    };
    let found = host.applets[applet]
        .params
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(&name))
        .map(|(_, v)| v.clone());
    match found {
        Some(v) => Ok(VmValue::Ref(vm.new_string(&v)?)),
        None => Ok(VmValue::Null),
    }
}

fn graphics_draw_string(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let args = vec![
        string_arg(vm, &call.args[0])?,
        int_arg(&call.args[1])?,
        int_arg(&call.args[2])?,
    ];
    remote_call(vm, host, conn, target, "drawString", args)?;
    Ok(VmValue::Null)
}

fn graphics_draw_ints(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let args = call.args.iter().map(int_arg).collect::<Result<Vec<_>, _>>()?;
    remote_call(vm, host, conn, target, &call.key.name, args)?;
    Ok(VmValue::Null)
}

fn graphics_draw_image(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let img = call.args[0]
        .as_ref()
        .ok_or_else(|| nf("BAD_ARGUMENTS", "image must not be null"))?;
    let args = vec![
        WireValue::I32(image_index(vm, img)?),
        int_arg(&call.args[1])?,
        int_arg(&call.args[2])?,
    ];
    remote_call(vm, host, conn, target, "drawImage", args)?;
    Ok(VmValue::Null)
}

fn event_coord(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let stub = host
        .stubs
        .get(&call.receiver)
        .cloned()
        .ok_or_else(|| nf("NO_SUCH_OBJECT", "event is no longer live"))?;
    if let Some((x, y)) = stub.coords {
        return Ok(VmValue::I32(if call.key.name == "getX" { x } else { y }));
    }
    let v = remote_call(vm, host, stub.conn, stub.target.object_id, &call.key.name, vec![])?;
    v.as_i32()
        .map(VmValue::I32)
        .ok_or_else(|| nf("BAD_ARGUMENTS", "coordinate is not an int"))
}

fn widget_new(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let applet = host.current()?;
    let (conn, server) = host.server(applet)?;
    let kind = call.key.class.trim_start_matches("pgawt/PG");
    let text = string_arg(vm, &call.args[0])?;
    let text = match text {
        WireValue::Null => WireValue::Str(String::new()),
        t => t,
    };
    let r = remote_call(vm, host, conn, server, &format!("construct{kind}"), vec![text])?;
    host.bind_stub(call.receiver, conn, r)?;
    Ok(VmValue::Null)
}

fn widget_set_text(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let text = string_arg(vm, &call.args[0])?;
    remote_call(vm, host, conn, target, "setText", vec![text])?;
    Ok(VmValue::Null)
}

fn widget_get_text(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let v = remote_call(vm, host, conn, target, "getText", vec![])?;
    new_str(vm, v)
}

fn widget_add(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let arg = marshal(vm, host, &call.args[0])?;
    remote_call(vm, host, conn, target, "add", vec![arg])?;
    Ok(VmValue::Null)
}

fn widget_plain(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    remote_call(vm, host, conn, target, &call.key.name, vec![])?;
    Ok(VmValue::Null)
}

fn widget_add_action(vm: &mut Vm<Host>, host: &mut Host, call: NativeCall) -> Result<VmValue, VmError> {
    let (conn, target) = host.stub(call.receiver)?;
    let listener = listener_arg(&call)?;
    let widget = call.receiver;
    if let Some((ls, _)) = host.actions.get_mut(&widget) {
        ls.push(listener);
        return Ok(VmValue::Null);
    }
    let applet = host.current()?;
    let id = host.export(Exported::Action { applet, widget });
    host.actions.insert(widget, (vec![listener], id));
    let r = host.local_ref(id, "PGActionListener");
    remote_call(
        vm,
        host,
        conn,
        target,
        "addPGActionListener",
        vec![WireValue::Remote(r)],
    )?;
    Ok(VmValue::Null)
}

fn applet_fault(detail: impl Into<String>) -> RemoteFault {
    RemoteFault::new(FaultCode::AppletFault, detail)
}

/// Service an invoke from a display: listener callbacks and filters.
pub fn dispatch_incoming(vm: &mut Vm<Host>, host: &mut Host, call: &IncomingCall) -> Result<WireValue, RemoteFault> {
    let Some(what) = host.exports.get(&call.target).cloned() else {
        return Err(RemoteFault::new(
            FaultCode::NoSuchObject,
            format!("object {}", call.target),
        ));
    };
    match what {
        Exported::Mouse(applet) => {
            let handler = match call.method.as_str() {
                "PGMouseClicked" => "mouseClicked",
                "PGMousePressed" => "mousePressed",
                "PGMouseReleased" => "mouseReleased",
                m => return Err(RemoteFault::new(FaultCode::NoSuchMethod, m)),
            };
            let listeners = host.applets[applet].mouse.clone();
            deliver_event(vm, host, call, applet, &listeners, handler, LISTENER_DESC)
        }
        Exported::Action { applet, widget } => {
            if call.method != "PGActionPerformed" {
                return Err(RemoteFault::new(FaultCode::NoSuchMethod, call.method.clone()));
            }
            let listeners = host.actions.get(&widget).map(|(l, _)| l.clone()).unwrap_or_default();
            deliver_event(vm, host, call, applet, &listeners, "actionPerformed", ACTION_DESC)
        }
        Exported::Filter { applet, filter } => {
            if call.method != "filterRGB" {
                return Err(RemoteFault::new(FaultCode::NoSuchMethod, call.method.clone()));
            }
            let args = match call.args.as_slice() {
                [WireValue::I32(x), WireValue::I32(y), WireValue::I32(rgb)] => {
                    vec![VmValue::I32(*x), VmValue::I32(*y), VmValue::I32(*rgb)]
                }
                _ => {
                    return Err(RemoteFault::new(
                        FaultCode::BadArguments,
                        "filterRGB takes (I32, I32, I32)",
                    ))
                }
            };
            host.active.push(applet);
            let r = vm.run_method(host, filter, "filterRGB", "(III)I", args);
            host.active.pop();
            match r {
                Ok(VmValue::I32(v)) => Ok(WireValue::I32(v)),
                Ok(other) => Err(applet_fault(format!("filterRGB returned {other:?}"))),
                Err(e) => Err(fault_of(&e)),
            }
        }
    }
}

fn deliver_event(
    vm: &mut Vm<Host>,
    host: &mut Host,
    call: &IncomingCall,
    applet: usize,
    listeners: &[ObjRef],
    handler: &str,
    desc: &str,
) -> Result<WireValue, RemoteFault> {
    if host.applets[applet].status != AppletStatus::Running {
        return Err(applet_fault(format!(
            "applet {} is {}",
            host.applets[applet].name, host.applets[applet].status
        )));
    }
    let Some(WireValue::Remote(ev_ref)) = call.args.first().cloned() else {
        return Err(RemoteFault::new(FaultCode::BadArguments, "event reference expected"));
    };
    let coords = match call.args.get(1..3) {
        Some([WireValue::I32(x), WireValue::I32(y)]) => Some((*x, *y)),
        _ => None,
    };
    let ev = vm
        .instantiate(MOUSE_EVENT_CLASS)
        .map_err(|e| RemoteFault::new(FaultCode::Internal, e.to_string()))?;
    host.stubs.insert(
        ev,
        RemoteStub {
            conn: call.conn,
            target: ev_ref,
            coords,
        },
    );
    host.active.push(applet);
    let mut first_fault = None;
    for &l in listeners {
        let Ok(class) = vm.class_of(l) else { continue };
        if vm.resolve_virtual(&class, handler, desc).is_none() {
            continue;
        }
        if let Err(e) = vm.run_method(host, l, handler, desc, vec![VmValue::Ref(ev)]) {
            let line = format!("listener {}.{handler} faulted: {e}", class.name);
            log::warn!("{line}");
            host.incidents.push(line);
            first_fault.get_or_insert(e);
        }
    }
    host.active.pop();
    host.stubs.remove(&ev);
    match first_fault {
        None => Ok(WireValue::Null),
        Some(e) => {
            host.set_status(applet, AppletStatus::Faulted, e.to_string());
            Err(applet_fault(e.to_string()))
        }
    }
}

/// Instantiate the applet in `slot` and run init() then start().
/// Any fault marks the applet faulted.
pub fn launch(vm: &mut Vm<Host>, host: &mut Host, slot: usize) -> Result<(), VmError> {
    let name = host.applets[slot].name.clone();
    let result = (|| {
        let obj = vm.instantiate(&name)?;
        if !vm.is_instance(obj, APPLET_CLASS) {
            return Err(VmError::TypeMismatch(format!("{name} does not extend {APPLET_CLASS}")));
        }
        host.applets[slot].object = Some(obj);
        host.applets[slot].status = AppletStatus::Running;
        host.active.push(slot);
        let r = vm
            .run_method(host, obj, "init", "()V", vec![])
            .and_then(|_| vm.run_method(host, obj, "start", "()V", vec![]));
        host.active.pop();
        r.map(|_| ())
    })();
    if let Err(e) = &result {
        host.set_status(slot, AppletStatus::Faulted, e.to_string());
    }
    result
}

/// Run stop() then destroy() on a running applet.
pub fn shutdown(vm: &mut Vm<Host>, host: &mut Host, slot: usize) {
    let Some(obj) = host.applets[slot].object else { return };
    if host.applets[slot].status != AppletStatus::Running {
        return;
    }
    host.active.push(slot);
    let r = vm
        .run_method(host, obj, "stop", "()V", vec![])
        .and_then(|_| vm.run_method(host, obj, "destroy", "()V", vec![]));
    host.active.pop();
    match r {
        Ok(_) => host.set_status(slot, AppletStatus::Stopped, ""),
        Err(e) => host.set_status(slot, AppletStatus::Faulted, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_native_is_bound() {
        let mut vm: Vm<Host> = Vm::new();
        install(&mut vm);
        let b = pgawt_bundle();
        for e in &b.entries {
            for m in e.class.methods.iter().filter(|m| m.is_native()) {
                let key = NativeKey::new(
                    &e.name,
                    e.class.method_name(m).unwrap(),
                    e.class.method_descriptor(m).unwrap(),
                );
                assert!(vm.is_bound(&key), "{key} unbound");
            }
        }
    }

    #[test]
    fn non_stub_objects_do_not_marshal() {
        let mut vm: Vm<Host> = Vm::new();
        vm.add_local_bundle(&pgawt_bundle());
        let host = Host::new("t", EndpointConfig::default());
        let o = vm.instantiate("pgawt/PGRGBImageFilter").unwrap();
        let e = marshal(&vm, &host, &VmValue::Ref(o)).unwrap_err();
        assert_eq!(fault_of(&e).code, FaultCode::UnserializableValue);
        let s = vm.new_string("x").unwrap();
        assert_eq!(
            marshal(&vm, &host, &VmValue::Ref(s)).unwrap(),
            WireValue::Str("x".into())
        );
    }

    #[test]
    fn status_names_round_trip() {
        for s in [
            AppletStatus::Loading,
            AppletStatus::Running,
            AppletStatus::Faulted,
            AppletStatus::Stopped,
        ] {
            assert_eq!(s.name().parse::<AppletStatus>().unwrap(), s);
        }
    }
}
