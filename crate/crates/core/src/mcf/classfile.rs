//! Binary classfile layout.
//!
//! ```text
//! magic "MCF!" | u16 version | u16 cp_count | entries...
//! u16 this_class | u16 super_class
//! u16 field_count  | (u16 name, u16 descriptor)*
//! u16 method_count | (u16 flags, u16 name, u16 descriptor,
//!                     u16 max_stack, u16 max_locals, u32 code_len, code)*
//! ```
//!
//! All integers are big-endian. Constant-pool indices are 1-based.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::codec::{ByteReader, ByteWriter, Truncated};

use super::code::{disassemble, Instr};
use super::descriptor::{parse_field_descriptor, parse_method_descriptor, MethodDescriptor};

pub const MAGIC: [u8; 4] = *b"MCF!";
pub const VERSION: u16 = 1;
pub const ACC_NATIVE: u16 = 0x0001;

pub const TAG_UTF8: u8 = 1;
pub const TAG_CLASS: u8 = 7;
pub const TAG_FIELD: u8 = 9;
pub const TAG_METHOD: u8 = 10;

pub type CpIndex = u16;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConstantPoolEntry {
    Utf8(String),
    ClassRef {
        name_index: CpIndex,
    },
    MethodRef {
        class_index: CpIndex,
        name_index: CpIndex,
        descriptor_index: CpIndex,
    },
    FieldRef {
        class_index: CpIndex,
        name_index: CpIndex,
        descriptor_index: CpIndex,
    },
}

impl ConstantPoolEntry {
    pub fn tag(&self) -> u8 {
        match self {
            ConstantPoolEntry::Utf8(_) => TAG_UTF8,
            ConstantPoolEntry::ClassRef { .. } => TAG_CLASS,
            ConstantPoolEntry::MethodRef { .. } => TAG_METHOD,
            ConstantPoolEntry::FieldRef { .. } => TAG_FIELD,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ConstantPoolEntry::Utf8(_) => "Utf8",
            ConstantPoolEntry::ClassRef { .. } => "ClassRef",
            ConstantPoolEntry::MethodRef { .. } => "MethodRef",
            ConstantPoolEntry::FieldRef { .. } => "FieldRef",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub name_index: CpIndex,
    pub descriptor_index: CpIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodDef {
    pub flags: u16,
    pub name_index: CpIndex,
    pub descriptor_index: CpIndex,
    pub max_stack: u16,
    pub max_locals: u16,
    pub code: Vec<u8>,
}

impl MethodDef {
    pub fn is_native(&self) -> bool {
        self.flags & ACC_NATIVE != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFile {
    pub version: u16,
    pub constant_pool: Vec<ConstantPoolEntry>,
    pub this_class: CpIndex,
    /// 0 for a root class.
    pub super_class: CpIndex,
    pub fields: Vec<FieldDef>,
    pub methods: Vec<MethodDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassFileError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated input at byte offset {offset}")]
    TruncatedInput { offset: usize },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown constant-pool tag {tag} at byte offset {offset}")]
    BadConstantTag { tag: u8, offset: usize },
    #[error("invalid UTF-8 in constant pool at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("dangling constant-pool index {0}")]
    DanglingCpIndex(CpIndex),
    #[error("malformed descriptor {0:?}")]
    MalformedDescriptor(String),
    #[error("bad code in method {method}: {detail}")]
    BadCode { method: String, detail: String },
    #[error("{0} trailing bytes after classfile")]
    TrailingBytes(usize),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl From<Truncated> for ClassFileError {
    fn from(t: Truncated) -> Self {
        ClassFileError::TruncatedInput { offset: t.offset }
    }
}

impl ClassFile {
    /// Smallest well-formed class: a root class with no members.
    pub fn empty(name: &str) -> ClassFile {
        ClassFile {
            version: VERSION,
            constant_pool: vec![
                ConstantPoolEntry::Utf8(name.to_string()),
                ConstantPoolEntry::ClassRef { name_index: 1 },
            ],
            this_class: 2,
            super_class: 0,
            fields: Vec::new(),
            methods: Vec::new(),
        }
    }

    pub fn entry(&self, index: CpIndex) -> Option<&ConstantPoolEntry> {
        if index == 0 {
            return None;
        }
        self.constant_pool.get(index as usize - 1)
    }

    pub fn utf8(&self, index: CpIndex) -> Result<&str, ClassFileError> {
        match self.entry(index) {
            Some(ConstantPoolEntry::Utf8(s)) => Ok(s),
            _ => Err(ClassFileError::DanglingCpIndex(index)),
        }
    }

    pub fn class_name(&self, index: CpIndex) -> Result<&str, ClassFileError> {
        match self.entry(index) {
            Some(ConstantPoolEntry::ClassRef { name_index }) => self.utf8(*name_index),
            _ => Err(ClassFileError::DanglingCpIndex(index)),
        }
    }

    pub fn name(&self) -> Result<&str, ClassFileError> {
        self.class_name(self.this_class)
    }

    pub fn super_name(&self) -> Result<Option<&str>, ClassFileError> {
        if self.super_class == 0 {
            Ok(None)
        } else {
            self.class_name(self.super_class).map(Some)
        }
    }

    /// `(class, name, descriptor)` of a MethodRef or FieldRef.
    pub fn member_ref(&self, index: CpIndex) -> Result<(&str, &str, &str), ClassFileError> {
        match self.entry(index) {
            Some(ConstantPoolEntry::MethodRef {
                class_index,
                name_index,
                descriptor_index,
            })
            | Some(ConstantPoolEntry::FieldRef {
                class_index,
                name_index,
                descriptor_index,
            }) => Ok((
                self.class_name(*class_index)?,
                self.utf8(*name_index)?,
                self.utf8(*descriptor_index)?,
            )),
            _ => Err(ClassFileError::DanglingCpIndex(index)),
        }
    }

    pub fn method_name(&self, m: &MethodDef) -> Result<&str, ClassFileError> {
        self.utf8(m.name_index)
    }

    pub fn method_descriptor(&self, m: &MethodDef) -> Result<&str, ClassFileError> {
        self.utf8(m.descriptor_index)
    }

    /// Every class name referenced through a ClassRef entry, in pool order.
    pub fn class_refs(&self) -> Vec<&str> {
        self.constant_pool
            .iter()
            .filter_map(|e| match e {
                ConstantPoolEntry::ClassRef { name_index } => self.utf8(*name_index).ok(),
                _ => None,
            })
            .collect()
    }

    fn expect_kind(&self, index: CpIndex, tag: u8) -> Result<&ConstantPoolEntry, ClassFileError> {
        match self.entry(index) {
            Some(e) if e.tag() == tag => Ok(e),
            _ => Err(ClassFileError::DanglingCpIndex(index)),
        }
    }

    /// Check every structural invariant of the format.
    pub fn validate(&self) -> Result<(), ClassFileError> {
        if self.version != VERSION {
            return Err(ClassFileError::UnsupportedVersion(self.version));
        }
        if self.constant_pool.len() > u16::MAX as usize {
            return Err(ClassFileError::InvariantViolation("constant pool too large".into()));
        }
        for entry in &self.constant_pool {
            match entry {
                ConstantPoolEntry::Utf8(s) => {
                    if s.len() > u16::MAX as usize {
                        return Err(ClassFileError::InvariantViolation(format!(
                            "Utf8 entry of {} bytes exceeds u16 length",
                            s.len()
                        )));
                    }
                }
                ConstantPoolEntry::ClassRef { name_index } => {
                    self.expect_kind(*name_index, TAG_UTF8)?;
                }
                ConstantPoolEntry::MethodRef {
                    class_index,
                    name_index,
                    descriptor_index,
                } => {
                    self.expect_kind(*class_index, TAG_CLASS)?;
                    self.expect_kind(*name_index, TAG_UTF8)?;
                    let d = self.utf8(*descriptor_index)?;
                    parse_method_descriptor(d).ok_or_else(|| ClassFileError::MalformedDescriptor(d.into()))?;
                }
                ConstantPoolEntry::FieldRef {
                    class_index,
                    name_index,
                    descriptor_index,
                } => {
                    self.expect_kind(*class_index, TAG_CLASS)?;
                    self.expect_kind(*name_index, TAG_UTF8)?;
                    let d = self.utf8(*descriptor_index)?;
                    parse_field_descriptor(d).ok_or_else(|| ClassFileError::MalformedDescriptor(d.into()))?;
                }
            }
        }
        self.expect_kind(self.this_class, TAG_CLASS)?;
        if self.super_class != 0 {
            self.expect_kind(self.super_class, TAG_CLASS)?;
        }
        for f in &self.fields {
            self.utf8(f.name_index)?;
            let d = self.utf8(f.descriptor_index)?;
            parse_field_descriptor(d).ok_or_else(|| ClassFileError::MalformedDescriptor(d.into()))?;
        }
        for m in &self.methods {
            self.validate_method(m)?;
        }
        Ok(())
    }

    fn validate_method(&self, m: &MethodDef) -> Result<(), ClassFileError> {
        let name = self.utf8(m.name_index)?;
        let d = self.utf8(m.descriptor_index)?;
        let desc: MethodDescriptor =
            parse_method_descriptor(d).ok_or_else(|| ClassFileError::MalformedDescriptor(d.into()))?;
        let bad = |detail: String| ClassFileError::BadCode {
            method: name.to_string(),
            detail,
        };
        if m.is_native() != m.code.is_empty() {
            return Err(bad("code must be empty iff the method is native".into()));
        }
        if m.is_native() {
            return Ok(());
        }
        if (m.max_locals as usize) < desc.params.len() + 1 {
            return Err(bad(format!(
                "max_locals {} cannot hold receiver and {} params",
                m.max_locals,
                desc.params.len()
            )));
        }
        let instrs = disassemble(&m.code).map_err(|e| bad(e.to_string()))?;
        let boundaries: std::collections::HashSet<usize> = instrs.iter().map(|(pc, _)| *pc).collect();
        for (pc, ins) in &instrs {
            match *ins {
                Instr::Sconst(i) => {
                    self.expect_kind(i, TAG_UTF8)?;
                }
                Instr::New(i) => {
                    self.expect_kind(i, TAG_CLASS)?;
                }
                Instr::Invoke(i) => {
                    self.expect_kind(i, TAG_METHOD)?;
                }
                Instr::Getf(i) | Instr::Putf(i) => {
                    self.expect_kind(i, TAG_FIELD)?;
                }
                Instr::Load(l) | Instr::Store(l) if l as u16 >= m.max_locals => {
                    return Err(bad(format!("local {l} at pc {pc} exceeds max_locals {}", m.max_locals)));
                }
                _ => {}
            }
            if let Some(off) = ins.branch_offset() {
                let target = *pc as i64 + off as i64;
                if target < 0 || !boundaries.contains(&(target as usize)) {
                    return Err(bad(format!(
                        "branch at pc {pc} targets {target}, not an instruction boundary"
                    )));
                }
            }
        }
        Ok(())
    }
}

static PARSE_ATTEMPTS: AtomicU64 = AtomicU64::new(0);

/// Calls to [`parse_classfile`] so far in this process.
pub fn parse_attempts() -> u64 {
    PARSE_ATTEMPTS.load(Ordering::Relaxed)
}

/// Parse and validate one classfile; the whole slice must be consumed.
pub fn parse_classfile(bytes: &[u8]) -> Result<ClassFile, ClassFileError> {
    PARSE_ATTEMPTS.fetch_add(1, Ordering::Relaxed);
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).map_err(|_| {
        if bytes.len() >= 4 {
            unreachable!()
        } else if bytes.iter().zip(MAGIC.iter()).all(|(a, b)| a == b) {
            ClassFileError::TruncatedInput { offset: bytes.len() }
        } else {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            ClassFileError::BadMagic(m)
        }
    })?;
    if magic != MAGIC {
        return Err(ClassFileError::BadMagic(magic.try_into().unwrap()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ClassFileError::UnsupportedVersion(version));
    }
    let cp_count = r.u16()?;
    let mut constant_pool = Vec::with_capacity(cp_count.min(1024) as usize);
    for _ in 0..cp_count {
        let offset = r.offset();
        let tag = r.u8()?;
        let entry = match tag {
            TAG_UTF8 => {
                let len = r.u16()? as usize;
                let start = r.offset();
                let raw = r.take(len)?;
                let s = std::str::from_utf8(raw).map_err(|_| ClassFileError::InvalidUtf8 { offset: start })?;
                ConstantPoolEntry::Utf8(s.to_string())
            }
            TAG_CLASS => ConstantPoolEntry::ClassRef { name_index: r.u16()? },
            TAG_METHOD => ConstantPoolEntry::MethodRef {
                class_index: r.u16()?,
                name_index: r.u16()?,
                descriptor_index: r.u16()?,
            },
            TAG_FIELD => ConstantPoolEntry::FieldRef {
                class_index: r.u16()?,
                name_index: r.u16()?,
                descriptor_index: r.u16()?,
            },
            other => return Err(ClassFileError::BadConstantTag { tag: other, offset }),
        };
        constant_pool.push(entry);
    }
    let this_class = r.u16()?;
    let super_class = r.u16()?;
    let field_count = r.u16()?;
    let mut fields = Vec::with_capacity(field_count.min(1024) as usize);
    for _ in 0..field_count {
        fields.push(FieldDef {
            name_index: r.u16()?,
            descriptor_index: r.u16()?,
        });
    }
    let method_count = r.u16()?;
    let mut methods = Vec::with_capacity(method_count.min(1024) as usize);
    for _ in 0..method_count {
        let flags = r.u16()?;
        let name_index = r.u16()?;
        let descriptor_index = r.u16()?;
        let max_stack = r.u16()?;
        let max_locals = r.u16()?;
        let code_len = r.u32()? as usize;
        let code = r.take(code_len)?.to_vec();
        methods.push(MethodDef {
            flags,
            name_index,
            descriptor_index,
            max_stack,
            max_locals,
            code,
        });
    }
    if !r.is_empty() {
        return Err(ClassFileError::TrailingBytes(r.remaining()));
    }
    let cf = ClassFile {
        version,
        constant_pool,
        this_class,
        super_class,
        fields,
        methods,
    };
    cf.validate()?;
    Ok(cf)
}

/// Serialize a validated classfile. Output is deterministic.
pub fn serialize_classfile(cf: &ClassFile) -> Result<Vec<u8>, ClassFileError> {
    cf.validate().map_err(|e| match e {
        ClassFileError::InvariantViolation(_) => e,
        other => ClassFileError::InvariantViolation(other.to_string()),
    })?;
    let too_many = |what: &str| ClassFileError::InvariantViolation(format!("too many {what}"));
    let mut w = ByteWriter::new();
    w.bytes(&MAGIC).u16(cf.version);
    w.u16(u16::try_from(cf.constant_pool.len()).map_err(|_| too_many("constants"))?);
    for e in &cf.constant_pool {
        w.u8(e.tag());
        match e {
            ConstantPoolEntry::Utf8(s) => {
                w.u16(s.len() as u16).bytes(s.as_bytes());
            }
            ConstantPoolEntry::ClassRef { name_index } => {
                w.u16(*name_index);
            }
            ConstantPoolEntry::MethodRef {
                class_index,
                name_index,
                descriptor_index,
            }
            | ConstantPoolEntry::FieldRef {
                class_index,
                name_index,
                descriptor_index,
            } => {
                w.u16(*class_index).u16(*name_index).u16(*descriptor_index);
            }
        }
    }
    w.u16(cf.this_class).u16(cf.super_class);
    w.u16(u16::try_from(cf.fields.len()).map_err(|_| too_many("fields"))?);
    for f in &cf.fields {
        w.u16(f.name_index).u16(f.descriptor_index);
    }
    w.u16(u16::try_from(cf.methods.len()).map_err(|_| too_many("methods"))?);
    for m in &cf.methods {
        w.u16(m.flags)
            .u16(m.name_index)
            .u16(m.descriptor_index)
            .u16(m.max_stack)
            .u16(m.max_locals)
            .u32(u32::try_from(m.code.len()).map_err(|_| too_many("code bytes"))?)
            .bytes(&m.code);
    }
    Ok(w.into_inner())
}

impl ConstantPoolEntry {
    /// Human-readable rendering used by `inspect`.
    pub fn describe(&self, cf: &ClassFile) -> String {
        match self {
            ConstantPoolEntry::Utf8(s) => format!("Utf8 {s:?}"),
            ConstantPoolEntry::ClassRef { name_index } => {
                format!("ClassRef #{name_index} {:?}", cf.utf8(*name_index).unwrap_or("?"))
            }
            ConstantPoolEntry::MethodRef { .. } | ConstantPoolEntry::FieldRef { .. } => {
                let kind = self.kind();
                match self {
                    ConstantPoolEntry::MethodRef {
                        class_index,
                        name_index,
                        descriptor_index,
                    }
                    | ConstantPoolEntry::FieldRef {
                        class_index,
                        name_index,
                        descriptor_index,
                    } => format!(
                        "{kind} {}.{}:{}",
                        cf.class_name(*class_index).unwrap_or("?"),
                        cf.utf8(*name_index).unwrap_or("?"),
                        cf.utf8(*descriptor_index).unwrap_or("?")
                    ),
                    _ => unreachable!(),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_bytes() -> Vec<u8> {
        let mut b = b"MCF!".to_vec();
        b.extend_from_slice(&[0, 1]); // version
        b.extend_from_slice(&[0, 2]); // cp_count
        b.extend_from_slice(&[1, 0, 5]);
        b.extend_from_slice(b"Empty");
        b.extend_from_slice(&[7, 0, 1]);
        b.extend_from_slice(&[0, 2, 0, 0]); // this, super
        b.extend_from_slice(&[0, 0, 0, 0]); // fields, methods
        b
    }

    #[test]
    fn minimal_classfile_parses() {
        let cf = parse_classfile(&minimal_bytes()).unwrap();
        assert_eq!(cf.name().unwrap(), "Empty");
        assert_eq!(cf.super_name().unwrap(), None);
        assert_eq!(cf, ClassFile::empty("Empty"));
    }

    #[test]
    fn minimal_round_trips_byte_exact() {
        let bytes = minimal_bytes();
        assert_eq!(serialize_classfile(&parse_classfile(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn cafebabe_is_bad_magic() {
        let mut b = minimal_bytes();
        b[..4].copy_from_slice(&[0xCA, 0xFE, 0xBA, 0xBE]);
        assert_eq!(
            parse_classfile(&b).unwrap_err(),
            ClassFileError::BadMagic([0xCA, 0xFE, 0xBA, 0xBE])
        );
    }

    #[test]
    fn every_prefix_is_truncated_or_bad() {
        let bytes = minimal_bytes();
        for n in 0..bytes.len() {
            let err = parse_classfile(&bytes[..n]).unwrap_err();
            assert!(
                matches!(err, ClassFileError::TruncatedInput { .. }),
                "prefix {n}: {err:?}"
            );
        }
    }

    #[test]
    fn dangling_this_class_is_invariant_violation() {
        let mut cf = ClassFile::empty("X");
        cf.this_class = 9;
        assert!(matches!(
            serialize_classfile(&cf),
            Err(ClassFileError::InvariantViolation(_))
        ));
    }

    #[test]
    fn this_class_pointing_at_utf8_is_dangling() {
        let mut b = minimal_bytes();
        let n = b.len();
        b[n - 7] = 1; // this_class -> Utf8 entry
        assert_eq!(parse_classfile(&b).unwrap_err(), ClassFileError::DanglingCpIndex(1));
    }

    #[test]
    fn index_zero_is_never_valid() {
        let cf = ClassFile::empty("X");
        assert!(cf.entry(0).is_none());
        assert!(cf.utf8(0).is_err());
    }

    #[test]
    fn serialization_is_deterministic() {
        let cf = ClassFile::empty("Twice");
        assert_eq!(serialize_classfile(&cf).unwrap(), serialize_classfile(&cf).unwrap());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = minimal_bytes();
        b.push(0);
        assert_eq!(parse_classfile(&b).unwrap_err(), ClassFileError::TrailingBytes(1));
    }

    #[test]
    fn branch_into_operand_rejected() {
        let mut cf = ClassFile::empty("B");
        cf.constant_pool.push(ConstantPoolEntry::Utf8("run".into()));
        cf.constant_pool.push(ConstantPoolEntry::Utf8("()V".into()));
        // ICONST 0 ; GOTO -4 (lands inside the ICONST operand)
        let mut code = Vec::new();
        Instr::Iconst(0).encode_into(&mut code);
        Instr::Goto(-4).encode_into(&mut code);
        cf.methods.push(MethodDef {
            flags: 0,
            name_index: 3,
            descriptor_index: 4,
            max_stack: 1,
            max_locals: 1,
            code,
        });
        assert!(matches!(cf.validate(), Err(ClassFileError::BadCode { .. })));
    }

    #[test]
    fn malformed_method_descriptor() {
        let mut cf = ClassFile::empty("B");
        cf.constant_pool.push(ConstantPoolEntry::Utf8("run".into()));
        cf.constant_pool.push(ConstantPoolEntry::Utf8("(Q)V".into()));
        cf.methods.push(MethodDef {
            flags: ACC_NATIVE,
            name_index: 3,
            descriptor_index: 4,
            max_stack: 0,
            max_locals: 0,
            code: vec![],
        });
        assert_eq!(
            cf.validate().unwrap_err(),
            ClassFileError::MalformedDescriptor("(Q)V".into())
        );
    }
}
