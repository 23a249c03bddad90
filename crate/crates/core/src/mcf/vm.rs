//! A small stack machine for mobile-code bundles.
//!
//! The VM is generic over a host type `H` that native bindings receive
//! mutably; this is how the stub library reaches the network without the
//! VM knowing anything about it. A VM is single-threaded. Natives may call
//! back into [`Vm::run_method`], which is how nested remote callbacks run.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::bundle::Bundle;
use super::classfile::{ClassFile, MethodDef};
use super::code::Instr;
use super::descriptor::{parse_field_descriptor, parse_method_descriptor, TypeDesc};

pub const OBJECT_CLASS: &str = "lang/Object";
pub const STRING_CLASS: &str = "lang/String";

const BUILTIN_SOURCE: &str = r#"
.class lang/Object
.class lang/String extends lang/Object
.class lang/Class extends lang/Object
.method native forName (Llang/String;)Llang/Class;
.class lang/reflect/Method extends lang/Object
.method native invoke (Llang/Object;)Llang/Object;
"#;

static NEXT_VM_ID: AtomicU32 = AtomicU32::new(1);

/// VMs constructed so far in this process.
pub fn vms_created() -> u32 {
    NEXT_VM_ID.load(Ordering::Relaxed) - 1
}

pub type VmId = u32;

/// Heap handle, tagged with the VM that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjRef {
    pub vm: VmId,
    pub index: u32,
}

#[derive(Debug, Clone, Copy)]
pub enum VmValue {
    I32(i32),
    F64(f64),
    Bool(bool),
    Null,
    Ref(ObjRef),
}

impl PartialEq for VmValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (VmValue::I32(a), VmValue::I32(b)) => a == b,
            (VmValue::F64(a), VmValue::F64(b)) => a.to_bits() == b.to_bits(),
            (VmValue::Bool(a), VmValue::Bool(b)) => a == b,
            (VmValue::Null, VmValue::Null) => true,
            (VmValue::Ref(a), VmValue::Ref(b)) => a == b,
            _ => false,
        }
    }
}

impl VmValue {
    pub fn as_i32(&self) -> Option<i32> {
        match self {
            VmValue::I32(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_ref(&self) -> Option<ObjRef> {
        match self {
            VmValue::Ref(r) => Some(*r),
            _ => None,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            VmValue::I32(_) => "I",
            VmValue::F64(_) => "D",
            VmValue::Bool(_) => "Z",
            VmValue::Null => "null",
            VmValue::Ref(_) => "ref",
        }
    }

    fn default_for(t: &TypeDesc) -> VmValue {
        match t {
            TypeDesc::Int => VmValue::I32(0),
            TypeDesc::Double => VmValue::F64(0.0),
            TypeDesc::Bool => VmValue::Bool(false),
            TypeDesc::Object(_) => VmValue::Null,
        }
    }

    fn fits(&self, t: &TypeDesc) -> bool {
        matches!(
            (self, t),
            (VmValue::I32(_), TypeDesc::Int)
                | (VmValue::F64(_), TypeDesc::Double)
                | (VmValue::Bool(_), TypeDesc::Bool)
                | (VmValue::Null, TypeDesc::Object(_))
                | (VmValue::Ref(_), TypeDesc::Object(_))
        )
    }
}

/// A fault raised by a native binding, carried through the interpreter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativeFault {
    pub kind: String,
    pub detail: String,
}

impl fmt::Display for NativeFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VmError {
    #[error("class not found: {0}")]
    ClassNotFound(String),
    #[error("policy denied loading {0}")]
    PolicyDenied(String),
    #[error("invalid class {0}")]
    InvalidClass(String),
    #[error("operand stack overflow in {0}")]
    StackOverflow(String),
    #[error("operand stack underflow in {0}")]
    StackUnderflow(String),
    #[error("call depth exceeded")]
    CallDepthExceeded,
    #[error("instruction budget exhausted")]
    OutOfFuel,
    #[error("divide by zero")]
    DivideByZero,
    #[error("no such method {class}.{name}{descriptor}")]
    NoSuchMethod {
        class: String,
        name: String,
        descriptor: String,
    },
    #[error("native {class}.{name} is unbound")]
    NativeUnbound { class: String, name: String },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("null receiver")]
    NullReceiver,
    #[error("execution ran off the end of {0}")]
    CodeOverrun(String),
    #[error("stale or foreign object handle")]
    BadHandle,
    #[error("reflection is not supported: {0}")]
    ReflectionUnsupported(String),
    #[error("native fault {0}")]
    Native(NativeFault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassOrigin {
    Builtin,
    Local,
    Bundle,
    Network,
}

#[derive(Debug)]
pub struct LoadedClass {
    pub name: String,
    pub super_class: Option<Rc<LoadedClass>>,
    pub file: ClassFile,
    pub origin: ClassOrigin,
    methods: HashMap<(String, String), usize>,
}

impl LoadedClass {
    fn find_method(&self, name: &str, desc: &str) -> Option<&MethodDef> {
        self.methods
            .get(&(name.to_string(), desc.to_string()))
            .map(|i| &self.file.methods[*i])
    }

    /// True if this class is `name` or inherits from it.
    pub fn is_a(&self, name: &str) -> bool {
        let mut cur = Some(self);
        while let Some(c) = cur {
            if c.name == name {
                return true;
            }
            cur = c.super_class.as_deref();
        }
        false
    }
}

#[derive(Debug)]
enum Body {
    Fields(HashMap<String, VmValue>),
    Str(Rc<str>),
}

#[derive(Debug)]
struct Object {
    class: Rc<LoadedClass>,
    body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NativeKey {
    pub class: String,
    pub name: String,
    pub descriptor: String,
}

impl NativeKey {
    pub fn new(class: &str, name: &str, descriptor: &str) -> Self {
        Self {
            class: class.into(),
            name: name.into(),
            descriptor: descriptor.into(),
        }
    }
}

impl fmt::Display for NativeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}{}", self.class, self.name, self.descriptor)
    }
}

/// Arguments handed to a native binding.
#[derive(Debug, Clone)]
pub struct NativeCall {
    pub key: NativeKey,
    pub receiver: ObjRef,
    pub args: Vec<VmValue>,
}

pub type NativeFn<H> = Rc<dyn Fn(&mut Vm<H>, &mut H, NativeCall) -> Result<VmValue, VmError>>;

/// Last link of the resolver chain. `Ok(None)` means not found.
pub type FetchHook = Box<dyn FnMut(&str) -> Result<Option<ClassFile>, VmError>>;

#[derive(Debug, Clone, Copy)]
pub struct VmLimits {
    pub max_call_depth: usize,
    /// Instructions per top-level activation.
    pub fuel: u64,
}

impl Default for VmLimits {
    fn default() -> Self {
        Self {
            max_call_depth: 64,
            fuel: 50_000_000,
        }
    }
}

pub struct Vm<H> {
    id: VmId,
    classes: HashMap<String, Rc<LoadedClass>>,
    builtin: HashMap<String, ClassFile>,
    local: HashMap<String, ClassFile>,
    page: HashMap<String, ClassFile>,
    fetch_hook: Option<FetchHook>,
    fetch_log: Vec<String>,
    heap: Vec<Object>,
    interned: HashMap<String, ObjRef>,
    natives: HashMap<NativeKey, NativeFn<H>>,
    trace: Option<Vec<NativeKey>>,
    limits: VmLimits,
    depth: usize,
    fuel: u64,
}

impl<H> fmt::Debug for Vm<H> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vm")
            .field("id", &self.id)
            .field("classes", &self.classes.keys().collect::<Vec<_>>())
            .field("heap", &self.heap.len())
            .finish()
    }
}

impl<H: 'static> Default for Vm<H> {
    fn default() -> Self {
        Self::new()
    }
}

impl<H: 'static> Vm<H> {
    pub fn new() -> Self {
        let builtin_bundle = super::asm::assemble_bundle(BUILTIN_SOURCE).expect("builtin classes assemble");
        let builtin = builtin_bundle.entries.into_iter().map(|e| (e.name, e.class)).collect();
        let mut vm = Vm {
            id: NEXT_VM_ID.fetch_add(1, Ordering::Relaxed),
            classes: HashMap::new(),
            builtin,
            local: HashMap::new(),
            page: HashMap::new(),
            fetch_hook: None,
            fetch_log: Vec::new(),
            heap: Vec::new(),
            interned: HashMap::new(),
            natives: HashMap::new(),
            trace: None,
            limits: VmLimits::default(),
            depth: 0,
            fuel: 0,
        };
        let reflective = |what: &'static str| -> NativeFn<H> {
            Rc::new(move |_, _, _| Err(VmError::ReflectionUnsupported(what.into())))
        };
        vm.bind_native(
            NativeKey::new("lang/Class", "forName", "(Llang/String;)Llang/Class;"),
            reflective("Class.forName"),
        );
        vm.bind_native(
            NativeKey::new("lang/reflect/Method", "invoke", "(Llang/Object;)Llang/Object;"),
            reflective("Method.invoke"),
        );
        vm
    }
}

impl<H> Vm<H> {
    pub fn id(&self) -> VmId {
        self.id
    }

    pub fn set_limits(&mut self, limits: VmLimits) {
        self.limits = limits;
    }

    /// Classes on the local path (the stub library). Searched first.
    pub fn add_local_bundle(&mut self, bundle: &Bundle) {
        for e in &bundle.entries {
            self.local.entry(e.name.clone()).or_insert_with(|| e.class.clone());
        }
    }

    /// Classes delivered with the page. Searched after the local path.
    pub fn add_page_bundle(&mut self, bundle: &Bundle) {
        for e in &bundle.entries {
            self.page.entry(e.name.clone()).or_insert_with(|| e.class.clone());
        }
    }

    pub fn set_fetch_hook(&mut self, hook: FetchHook) {
        self.fetch_hook = Some(hook);
    }

    /// Names the fetch hook was consulted for, in order.
    pub fn fetch_log(&self) -> &[String] {
        &self.fetch_log
    }

    pub fn bind_native(&mut self, key: NativeKey, f: NativeFn<H>) {
        self.natives.insert(key, f);
    }

    pub fn is_bound(&self, key: &NativeKey) -> bool {
        self.natives.contains_key(key)
    }

    /// Start recording every native invocation.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[NativeKey] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn loaded_classes(&self) -> impl Iterator<Item = &Rc<LoadedClass>> {
        self.classes.values()
    }

    pub fn heap_len(&self) -> usize {
        self.heap.len()
    }

    /// Resolve a class through builtin → local → page bundle → fetch hook.
    pub fn load_class(&mut self, name: &str) -> Result<Rc<LoadedClass>, VmError> {
        self.load_class_inner(name, 0)
    }

    fn load_class_inner(&mut self, name: &str, chain: usize) -> Result<Rc<LoadedClass>, VmError> {
        if let Some(c) = self.classes.get(name) {
            return Ok(c.clone());
        }
        if chain > 64 {
            return Err(VmError::InvalidClass(format!(
                "{name}: superclass chain too deep or cyclic"
            )));
        }
        let (file, origin) = if let Some(f) = self.builtin.get(name) {
            (f.clone(), ClassOrigin::Builtin)
        } else if let Some(f) = self.local.get(name) {
            (f.clone(), ClassOrigin::Local)
        } else if let Some(f) = self.page.get(name) {
            (f.clone(), ClassOrigin::Bundle)
        } else {
            match self.fetch_hook.as_mut() {
                None => return Err(VmError::ClassNotFound(name.into())),
                Some(hook) => {
                    self.fetch_log.push(name.to_string());
                    match hook(name)? {
                        Some(f) => (f, ClassOrigin::Network),
                        None => return Err(VmError::ClassNotFound(name.into())),
                    }
                }
            }
        };
        let declared = file.name().map_err(|e| VmError::InvalidClass(e.to_string()))?;
        if declared != name {
            return Err(VmError::InvalidClass(format!(
                "{name} resolved to a class named {declared}"
            )));
        }
        let super_class = match file.super_name().map_err(|e| VmError::InvalidClass(e.to_string()))? {
            Some(s) => Some(self.load_class_inner(s, chain + 1)?),
            None => None,
        };
        let mut methods = HashMap::new();
        for (i, m) in file.methods.iter().enumerate() {
            let n = file.method_name(m).map_err(|e| VmError::InvalidClass(e.to_string()))?;
            let d = file
                .method_descriptor(m)
                .map_err(|e| VmError::InvalidClass(e.to_string()))?;
            methods.insert((n.to_string(), d.to_string()), i);
        }
        let class = Rc::new(LoadedClass {
            name: name.to_string(),
            super_class,
            file,
            origin,
            methods,
        });
        // a superclass load may have raced us to the same name via a cycle
        let class = self.classes.entry(name.to_string()).or_insert(class).clone();
        Ok(class)
    }

    fn object(&self, r: ObjRef) -> Result<&Object, VmError> {
        if r.vm != self.id {
            return Err(VmError::BadHandle);
        }
        self.heap.get(r.index as usize).ok_or(VmError::BadHandle)
    }

    fn alloc(&mut self, class: Rc<LoadedClass>, body: Body) -> ObjRef {
        self.heap.push(Object { class, body });
        ObjRef {
            vm: self.id,
            index: (self.heap.len() - 1) as u32,
        }
    }

    /// Load `class` and allocate a fresh instance.
    pub fn instantiate(&mut self, class: &str) -> Result<ObjRef, VmError> {
        let c = self.load_class(class)?;
        Ok(self.alloc(c, Body::Fields(HashMap::new())))
    }

    pub fn new_string(&mut self, s: &str) -> Result<ObjRef, VmError> {
        let c = self.load_class(STRING_CLASS)?;
        Ok(self.alloc(c, Body::Str(Rc::from(s))))
    }

    fn intern(&mut self, s: &str) -> Result<ObjRef, VmError> {
        if let Some(r) = self.interned.get(s) {
            return Ok(*r);
        }
        let r = self.new_string(s)?;
        self.interned.insert(s.to_string(), r);
        Ok(r)
    }

    pub fn string_value(&self, r: ObjRef) -> Option<Rc<str>> {
        match &self.object(r).ok()?.body {
            Body::Str(s) => Some(s.clone()),
            Body::Fields(_) => None,
        }
    }

    pub fn class_of(&self, r: ObjRef) -> Result<Rc<LoadedClass>, VmError> {
        Ok(self.object(r)?.class.clone())
    }

    pub fn is_instance(&self, r: ObjRef, class: &str) -> bool {
        self.object(r).map(|o| o.class.is_a(class)).unwrap_or(false)
    }

    pub fn get_field(&self, r: ObjRef, name: &str) -> Result<Option<VmValue>, VmError> {
        match &self.object(r)?.body {
            Body::Fields(f) => Ok(f.get(name).copied()),
            Body::Str(_) => Ok(None),
        }
    }

    pub fn set_field(&mut self, r: ObjRef, name: &str, v: VmValue) -> Result<(), VmError> {
        if r.vm != self.id {
            return Err(VmError::BadHandle);
        }
        let obj = self.heap.get_mut(r.index as usize).ok_or(VmError::BadHandle)?;
        match &mut obj.body {
            Body::Fields(f) => {
                f.insert(name.to_string(), v);
                Ok(())
            }
            Body::Str(_) => Err(VmError::TypeMismatch("strings are immutable".into())),
        }
    }

    /// Find the class declaring `(name, desc)` starting at `class`.
    pub fn resolve_virtual(&self, class: &Rc<LoadedClass>, name: &str, desc: &str) -> Option<Rc<LoadedClass>> {
        let mut cur = Some(class.clone());
        while let Some(c) = cur {
            if c.find_method(name, desc).is_some() {
                return Some(c);
            }
            cur = c.super_class.clone();
        }
        None
    }

    /// Invoke `name desc` on `receiver` with virtual dispatch from the
    /// receiver's runtime class.
    pub fn run_method(
        &mut self,
        host: &mut H,
        receiver: ObjRef,
        name: &str,
        desc: &str,
        args: Vec<VmValue>,
    ) -> Result<VmValue, VmError> {
        let parsed = parse_method_descriptor(desc)
            .ok_or_else(|| VmError::TypeMismatch(format!("malformed descriptor {desc}")))?;
        if parsed.params.len() != args.len() {
            return Err(VmError::TypeMismatch(format!(
                "{name}{desc} takes {} args, got {}",
                parsed.params.len(),
                args.len()
            )));
        }
        for (a, t) in args.iter().zip(&parsed.params) {
            if !a.fits(t) {
                return Err(VmError::TypeMismatch(format!(
                    "{name}{desc}: {} does not fit {t}",
                    a.kind_name()
                )));
            }
        }
        let top = self.depth == 0;
        if top {
            self.fuel = self.limits.fuel;
        }
        let class = self.class_of(receiver)?;
        self.call(host, &class, receiver, name, desc, args)
    }

    fn call(
        &mut self,
        host: &mut H,
        static_class: &Rc<LoadedClass>,
        receiver: ObjRef,
        name: &str,
        desc: &str,
        args: Vec<VmValue>,
    ) -> Result<VmValue, VmError> {
        let runtime = self.class_of(receiver)?;
        let owner = self
            .resolve_virtual(&runtime, name, desc)
            .ok_or_else(|| VmError::NoSuchMethod {
                class: static_class.name.clone(),
                name: name.into(),
                descriptor: desc.into(),
            })?;
        if self.depth >= self.limits.max_call_depth {
            return Err(VmError::CallDepthExceeded);
        }
        self.depth += 1;
        let result = self.call_resolved(host, &owner, receiver, name, desc, args);
        self.depth -= 1;
        result
    }

    fn call_resolved(
        &mut self,
        host: &mut H,
        owner: &Rc<LoadedClass>,
        receiver: ObjRef,
        name: &str,
        desc: &str,
        args: Vec<VmValue>,
    ) -> Result<VmValue, VmError> {
        let method = owner.find_method(name, desc).expect("resolved");
        if method.is_native() {
            let key = NativeKey::new(&owner.name, name, desc);
            let f = self.natives.get(&key).cloned().ok_or_else(|| VmError::NativeUnbound {
                class: owner.name.clone(),
                name: name.into(),
            })?;
            if let Some(t) = self.trace.as_mut() {
                t.push(key.clone());
            }
            return f(self, host, NativeCall { key, receiver, args });
        }
        self.interpret(host, owner, method, receiver, args)
    }

    fn interpret(
        &mut self,
        host: &mut H,
        owner: &Rc<LoadedClass>,
        method: &MethodDef,
        receiver: ObjRef,
        args: Vec<VmValue>,
    ) -> Result<VmValue, VmError> {
        let cf = &owner.file;
        let where_ = || format!("{}.{}", owner.name, cf.method_name(method).unwrap_or("?"));
        let max_stack = method.max_stack as usize;
        let mut locals = vec![VmValue::Null; method.max_locals as usize];
        locals[0] = VmValue::Ref(receiver);
        for (slot, a) in locals[1..].iter_mut().zip(args) {
            *slot = a;
        }
        let mut stack: Vec<VmValue> = Vec::with_capacity(max_stack);
        let code = &method.code;
        let mut pc = 0usize;

        macro_rules! push {
            ($v:expr) => {{
                if stack.len() >= max_stack {
                    return Err(VmError::StackOverflow(where_()));
                }
                stack.push($v);
            }};
        }
        macro_rules! pop {
            () => {
                stack.pop().ok_or_else(|| VmError::StackUnderflow(where_()))?
            };
        }
        macro_rules! pop_int {
            () => {
                match pop!() {
                    VmValue::I32(v) => v,
                    other => {
                        return Err(VmError::TypeMismatch(format!(
                            "{}: expected I, found {}",
                            where_(),
                            other.kind_name()
                        )))
                    }
                }
            };
        }

        loop {
            if pc >= code.len() {
                return Err(VmError::CodeOverrun(where_()));
            }
            if self.fuel == 0 {
                return Err(VmError::OutOfFuel);
            }
            self.fuel -= 1;
            let ins = Instr::decode(code, pc).map_err(|e| VmError::InvalidClass(e.to_string()))?;
            let mut next = pc + ins.encoded_len();
            match ins {
                Instr::Nop => {}
                Instr::Iconst(v) => push!(VmValue::I32(v)),
                Instr::Sconst(i) => {
                    let s = cf.utf8(i).map_err(|e| VmError::InvalidClass(e.to_string()))?;
                    let r = self.intern(s)?;
                    push!(VmValue::Ref(r));
                }
                Instr::Nullconst => push!(VmValue::Null),
                Instr::Load(l) => push!(locals[l as usize]),
                Instr::Store(l) => locals[l as usize] = pop!(),
                Instr::Iadd | Instr::Isub | Instr::Imul | Instr::Idiv => {
                    let b = pop_int!();
                    let a = pop_int!();
                    let v = match ins {
                        Instr::Iadd => a.wrapping_add(b),
                        Instr::Isub => a.wrapping_sub(b),
                        Instr::Imul => a.wrapping_mul(b),
                        _ => {
                            if b == 0 {
                                return Err(VmError::DivideByZero);
                            }
                            a.wrapping_div(b)
                        }
                    };
                    push!(VmValue::I32(v));
                }
                Instr::Ifeq(off) => {
                    let taken = match pop!() {
                        VmValue::I32(v) => v == 0,
                        VmValue::Bool(b) => !b,
                        VmValue::Null => true,
                        VmValue::F64(f) => f == 0.0,
                        VmValue::Ref(_) => false,
                    };
                    if taken {
                        next = (pc as i64 + off as i64) as usize;
                    }
                }
                Instr::Iflt(off) => {
                    if pop_int!() < 0 {
                        next = (pc as i64 + off as i64) as usize;
                    }
                }
                Instr::Goto(off) => next = (pc as i64 + off as i64) as usize,
                Instr::New(i) => {
                    let name = cf.class_name(i).map_err(|e| VmError::InvalidClass(e.to_string()))?;
                    let r = self.instantiate(name)?;
                    push!(VmValue::Ref(r));
                }
                Instr::Invoke(i) => {
                    let (cls, name, desc) = cf.member_ref(i).map_err(|e| VmError::InvalidClass(e.to_string()))?;
                    let parsed = parse_method_descriptor(desc)
                        .ok_or_else(|| VmError::InvalidClass(format!("descriptor {desc}")))?;
                    let static_class = self.load_class(cls)?;
                    let n = parsed.params.len();
                    if stack.len() < n + 1 {
                        return Err(VmError::StackUnderflow(where_()));
                    }
                    let call_args = stack.split_off(stack.len() - n);
                    for (a, t) in call_args.iter().zip(&parsed.params) {
                        if !a.fits(t) {
                            return Err(VmError::TypeMismatch(format!(
                                "{cls}.{name}{desc}: {} does not fit {t}",
                                a.kind_name()
                            )));
                        }
                    }
                    let recv = match pop!() {
                        VmValue::Ref(r) => r,
                        VmValue::Null => return Err(VmError::NullReceiver),
                        other => {
                            return Err(VmError::TypeMismatch(format!(
                                "receiver of {cls}.{name} is {}",
                                other.kind_name()
                            )))
                        }
                    };
                    let (name, desc) = (name.to_string(), desc.to_string());
                    let ret = self.call(host, &static_class, recv, &name, &desc, call_args)?;
                    if parsed.ret.is_some() {
                        push!(ret);
                    }
                }
                Instr::Getf(i) | Instr::Putf(i) => {
                    let (_, name, desc) = cf.member_ref(i).map_err(|e| VmError::InvalidClass(e.to_string()))?;
                    let t = parse_field_descriptor(desc)
                        .ok_or_else(|| VmError::InvalidClass(format!("descriptor {desc}")))?;
                    let name = name.to_string();
                    if let Instr::Putf(_) = ins {
                        let v = pop!();
                        if !v.fits(&t) {
                            return Err(VmError::TypeMismatch(format!(
                                "field {name}: {} into {t}",
                                v.kind_name()
                            )));
                        }
                        let obj = pop!().as_ref().ok_or(VmError::NullReceiver)?;
                        self.set_field(obj, &name, v)?;
                    } else {
                        let obj = pop!().as_ref().ok_or(VmError::NullReceiver)?;
                        let v = self.get_field(obj, &name)?.unwrap_or_else(|| VmValue::default_for(&t));
                        push!(v);
                    }
                }
                Instr::Ret => return Ok(VmValue::Null),
                Instr::Retv => return Ok(pop!()),
                Instr::Dup => {
                    let v = *stack.last().ok_or_else(|| VmError::StackUnderflow(where_()))?;
                    push!(v);
                }
                Instr::Pop => {
                    pop!();
                }
            }
            pc = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcf::asm::assemble_bundle;
    use std::cell::RefCell;

    fn vm_with(src: &str) -> Vm<()> {
        let mut vm = Vm::new();
        vm.add_page_bundle(&assemble_bundle(src).unwrap());
        vm
    }

    fn run(vm: &mut Vm<()>, class: &str, name: &str, desc: &str) -> Result<VmValue, VmError> {
        let obj = vm.instantiate(class)?;
        vm.run_method(&mut (), obj, name, desc, vec![])
    }

    #[test]
    fn adds_two_and_three() {
        let mut vm = vm_with(".class A\n.method run ()I 2 1\n ICONST 2\n ICONST 3\n IADD\n RETV\n");
        assert_eq!(run(&mut vm, "A", "run", "()I").unwrap(), VmValue::I32(5));
    }

    #[test]
    fn divide_by_zero_faults() {
        let mut vm = vm_with(".class A\n.method run ()I 2 1\n ICONST 1\n ICONST 0\n IDIV\n RETV\n");
        assert_eq!(run(&mut vm, "A", "run", "()I").unwrap_err(), VmError::DivideByZero);
    }

    #[test]
    fn stack_overflow_beyond_max_stack() {
        let mut vm = vm_with(".class A\n.method run ()I 1 1\n ICONST 1\n ICONST 2\n IADD\n RETV\n");
        assert!(matches!(
            run(&mut vm, "A", "run", "()I").unwrap_err(),
            VmError::StackOverflow(_)
        ));
    }

    #[test]
    fn loop_counts_down() {
        let src = r#"
.class A
.method run (I)I 2 3
    ICONST 0
    STORE 2
L0:
    LOAD 1
    IFEQ L1
    LOAD 2
    ICONST 10
    IADD
    STORE 2
    LOAD 1
    ICONST 1
    ISUB
    STORE 1
    GOTO L0
L1:
    LOAD 2
    RETV
"#;
        let mut vm = vm_with(src);
        let obj = vm.instantiate("A").unwrap();
        let v = vm
            .run_method(&mut (), obj, "run", "(I)I", vec![VmValue::I32(4)])
            .unwrap();
        assert_eq!(v, VmValue::I32(40));
    }

    #[test]
    fn virtual_dispatch_walks_superclasses() {
        let src = r#"
.class Base
.method hello ()I 1 1
    ICONST 1
    RETV
.method call ()I 1 1
    LOAD 0
    INVOKE Base.hello ()I
    RETV
.class Derived extends Base
.method hello ()I 1 1
    ICONST 2
    RETV
"#;
        let mut vm = vm_with(src);
        assert_eq!(run(&mut vm, "Base", "call", "()I").unwrap(), VmValue::I32(1));
        assert_eq!(run(&mut vm, "Derived", "call", "()I").unwrap(), VmValue::I32(2));
    }

    #[test]
    fn fields_default_and_store() {
        let src = r#"
.class C
.field n I
.method bump ()I 3 1
    LOAD 0
    LOAD 0
    GETF C.n I
    ICONST 7
    IADD
    PUTF C.n I
    LOAD 0
    GETF C.n I
    RETV
"#;
        let mut vm = vm_with(src);
        let obj = vm.instantiate("C").unwrap();
        assert_eq!(
            vm.run_method(&mut (), obj, "bump", "()I", vec![]).unwrap(),
            VmValue::I32(7)
        );
        assert_eq!(
            vm.run_method(&mut (), obj, "bump", "()I", vec![]).unwrap(),
            VmValue::I32(14)
        );
    }

    #[test]
    fn natives_receive_host_and_args() {
        let src = r#"
.class N
.method native hook (Llang/String;I)V
.method run ()V 3 1
    LOAD 0
    SCONST "hi"
    ICONST 9
    INVOKE N.hook (Llang/String;I)V
    RET
"#;
        let mut vm: Vm<Vec<String>> = Vm::new();
        vm.add_page_bundle(&assemble_bundle(src).unwrap());
        vm.bind_native(
            NativeKey::new("N", "hook", "(Llang/String;I)V"),
            Rc::new(|vm, log: &mut Vec<String>, call| {
                let s = vm.string_value(call.args[0].as_ref().unwrap()).unwrap();
                log.push(format!("{s}:{}", call.args[1].as_i32().unwrap()));
                Ok(VmValue::Null)
            }),
        );
        let obj = vm.instantiate("N").unwrap();
        let mut log = Vec::new();
        vm.run_method(&mut log, obj, "run", "()V", vec![]).unwrap();
        assert_eq!(log, vec!["hi:9".to_string()]);
    }

    #[test]
    fn unbound_native_faults_at_call_time() {
        let mut vm = vm_with(".class N\n.method native poke ()V\n");
        let obj = vm.instantiate("N").unwrap();
        assert_eq!(
            vm.run_method(&mut (), obj, "poke", "()V", vec![]).unwrap_err(),
            VmError::NativeUnbound {
                class: "N".into(),
                name: "poke".into()
            }
        );
    }

    #[test]
    fn missing_class_without_hook_is_immediate() {
        let mut vm: Vm<()> = Vm::new();
        assert_eq!(
            vm.load_class("evil/Unknown").unwrap_err(),
            VmError::ClassNotFound("evil/Unknown".into())
        );
        assert!(vm.fetch_log().is_empty());
    }

    #[test]
    fn local_path_shadows_network() {
        let calls = Rc::new(RefCell::new(0));
        let mut vm: Vm<()> = Vm::new();
        vm.add_local_bundle(&assemble_bundle(".class pgawt/PGApplet").unwrap());
        let c = calls.clone();
        vm.set_fetch_hook(Box::new(move |_| {
            *c.borrow_mut() += 1;
            Ok(None)
        }));
        let a = vm.load_class("pgawt/PGApplet").unwrap();
        let b = vm.load_class("pgawt/PGApplet").unwrap();
        assert!(Rc::ptr_eq(&a, &b));
        assert_eq!(a.origin, ClassOrigin::Local);
        assert_eq!(*calls.borrow(), 0);
        assert!(vm.load_class("far/Away").is_err());
        assert_eq!(vm.fetch_log(), ["far/Away".to_string()]);
    }

    #[test]
    fn hook_policy_denial_surfaces() {
        let mut vm: Vm<()> = Vm::new();
        vm.set_fetch_hook(Box::new(|n| Err(VmError::PolicyDenied(n.into()))));
        assert_eq!(vm.load_class("x/Y").unwrap_err(), VmError::PolicyDenied("x/Y".into()));
    }

    #[test]
    fn reflection_is_unsupported() {
        let src = r#"
.class R
.method run ()V 2 1
    NEW lang/reflect/Method
    NULLCONST
    INVOKE lang/reflect/Method.invoke (Llang/Object;)Llang/Object;
    POP
    RET
"#;
        let mut vm = vm_with(src);
        assert!(matches!(
            run(&mut vm, "R", "run", "()V").unwrap_err(),
            VmError::ReflectionUnsupported(_)
        ));
    }

    #[test]
    fn runaway_loop_runs_out_of_fuel() {
        let mut vm = vm_with(".class A\n.method spin ()V 1 1\nL0:\n GOTO L0\n");
        vm.set_limits(VmLimits {
            fuel: 1000,
            ..VmLimits::default()
        });
        assert_eq!(run(&mut vm, "A", "spin", "()V").unwrap_err(), VmError::OutOfFuel);
    }

    #[test]
    fn unbounded_recursion_is_bounded() {
        let mut vm = vm_with(".class A\n.method r ()V 1 1\n LOAD 0\n INVOKE A.r ()V\n RET\n");
        assert_eq!(run(&mut vm, "A", "r", "()V").unwrap_err(), VmError::CallDepthExceeded);
    }

    #[test]
    fn arg_kinds_are_checked() {
        let mut vm = vm_with(".class A\n.method f (I)V 1 2\n RET\n");
        let obj = vm.instantiate("A").unwrap();
        assert!(matches!(
            vm.run_method(&mut (), obj, "f", "(I)V", vec![VmValue::Bool(true)]),
            Err(VmError::TypeMismatch(_))
        ));
    }
}
