//! Text assembler for `.mcfa` sources.
//!
//! ```text
//! .class Click extends applet/Applet
//! .field count I
//! .method init ()V 2 1
//!     LOAD 0
//!     LOAD 0
//!     INVOKE Click.addMouseListener (Llang/Object;)V
//!     RET
//! ```
//!
//! Labels are written `L<id>:` on their own line and referenced by branch
//! instructions. `#` starts a comment outside string literals.

use std::collections::HashMap;

use super::bundle::Bundle;
use super::classfile::{ClassFile, ConstantPoolEntry, CpIndex, FieldDef, MethodDef, ACC_NATIVE, VERSION};
use super::code::{Instr, Opcode};
use super::descriptor::{parse_field_descriptor, parse_method_descriptor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("line {line}: unknown opcode {name}")]
    UnknownOpcode { line: usize, name: String },
    #[error("line {line}: unresolved symbol {name}")]
    UnresolvedSymbol { line: usize, name: String },
    #[error("class {class}: {msg}")]
    Invalid { class: String, msg: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::SyntaxError { line, msg: msg.into() }
}

#[derive(Default)]
struct PoolBuilder {
    entries: Vec<ConstantPoolEntry>,
    index: HashMap<ConstantPoolEntry, CpIndex>,
}

impl PoolBuilder {
    fn intern(&mut self, e: ConstantPoolEntry) -> CpIndex {
        if let Some(i) = self.index.get(&e) {
            return *i;
        }
        self.entries.push(e.clone());
        let i = self.entries.len() as CpIndex;
        self.index.insert(e, i);
        i
    }

    fn utf8(&mut self, s: &str) -> CpIndex {
        self.intern(ConstantPoolEntry::Utf8(s.to_string()))
    }

    fn class(&mut self, name: &str) -> CpIndex {
        let name_index = self.utf8(name);
        self.intern(ConstantPoolEntry::ClassRef { name_index })
    }

    fn member(&mut self, method: bool, class: &str, name: &str, desc: &str) -> CpIndex {
        let class_index = self.class(class);
        let name_index = self.utf8(name);
        let descriptor_index = self.utf8(desc);
        self.intern(if method {
            ConstantPoolEntry::MethodRef {
                class_index,
                name_index,
                descriptor_index,
            }
        } else {
            ConstantPoolEntry::FieldRef {
                class_index,
                name_index,
                descriptor_index,
            }
        })
    }
}

enum Pending {
    Done(Instr),
    Branch { op: Opcode, label: String, line: usize },
}

struct MethodBuilder {
    def: MethodDef,
    code: Vec<(usize, Pending)>,
    len: usize,
    labels: HashMap<String, usize>,
}

impl MethodBuilder {
    fn finish(mut self) -> Result<MethodDef, AsmError> {
        let mut code = Vec::with_capacity(self.len);
        for (pc, p) in self.code {
            let ins = match p {
                Pending::Done(i) => i,
                Pending::Branch { op, label, line } => {
                    let target = *self.labels.get(&label).ok_or(AsmError::UnresolvedSymbol {
                        line,
                        name: label.clone(),
                    })?;
                    let off = target as i64 - pc as i64;
                    let off =
                        i16::try_from(off).map_err(|_| syntax(line, format!("branch to {label} out of range")))?;
                    match op {
                        Opcode::Ifeq => Instr::Ifeq(off),
                        Opcode::Iflt => Instr::Iflt(off),
                        _ => Instr::Goto(off),
                    }
                }
            };
            ins.encode_into(&mut code);
        }
        self.def.code = code;
        Ok(self.def)
    }
}

struct ClassBuilder {
    pool: PoolBuilder,
    this_class: CpIndex,
    super_class: CpIndex,
    fields: Vec<FieldDef>,
    methods: Vec<MethodDef>,
    current: Option<MethodBuilder>,
    name: String,
}

impl ClassBuilder {
    fn close_method(&mut self) -> Result<(), AsmError> {
        if let Some(m) = self.current.take() {
            self.methods.push(m.finish()?);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ClassFile, AsmError> {
        self.close_method()?;
        let cf = ClassFile {
            version: VERSION,
            constant_pool: self.pool.entries,
            this_class: self.this_class,
            super_class: self.super_class,
            fields: self.fields,
            methods: self.methods,
        };
        cf.validate().map_err(|e| AsmError::Invalid {
            class: self.name.clone(),
            msg: e.to_string(),
        })?;
        Ok(cf)
    }
}

/// Split a line into tokens, keeping double-quoted strings (with escapes)
/// as single tokens that start with `"`.
fn tokenize(line: &str, lineno: usize) -> Result<Vec<String>, AsmError> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '"' {
            chars.next();
            let mut s = String::from("\"");
            loop {
                match chars.next() {
                    None => return Err(syntax(lineno, "unterminated string literal")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        Some('\\') => s.push('\\'),
                        Some('"') => s.push('"'),
                        other => return Err(syntax(lineno, format!("bad escape {other:?}"))),
                    },
                    Some(ch) => s.push(ch),
                }
            }
            out.push(s);
        } else {
            let mut tok = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || ch == '#' {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
            out.push(tok);
        }
    }
    Ok(out)
}

fn split_member(tok: &str, line: usize) -> Result<(&str, &str), AsmError> {
    tok.rsplit_once('.')
        .filter(|(c, n)| !c.is_empty() && !n.is_empty())
        .ok_or_else(|| syntax(line, format!("expected Class.member, got {tok:?}")))
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, AsmError> {
    tok.parse().map_err(|_| syntax(line, format!("bad number {tok:?}")))
}

/// Assemble a source file into a structured bundle.
pub fn assemble_bundle(source: &str) -> Result<Bundle, AsmError> {
    let mut bundle = Bundle::new();
    let mut class: Option<ClassBuilder> = None;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let toks = tokenize(raw, line)?;
        let Some(head) = toks.first() else { continue };

        match head.as_str() {
            ".class" => {
                if let Some(c) = class.take() {
                    bundle.entries.push(super::bundle::BundleEntry {
                        name: c.name.clone(),
                        class: c.finish()?,
                    });
                }
                let (name, sup) = match toks.as_slice() {
                    [_, n] => (n.clone(), None),
                    [_, n, kw, s] if kw == "extends" => (n.clone(), Some(s.clone())),
                    _ => return Err(syntax(line, "expected `.class <name> [extends <name>]`")),
                };
                let mut pool = PoolBuilder::default();
                let this_class = pool.class(&name);
                let super_class = sup.as_deref().map(|s| pool.class(s)).unwrap_or(0);
                class = Some(ClassBuilder {
                    pool,
                    this_class,
                    super_class,
                    fields: Vec::new(),
                    methods: Vec::new(),
                    current: None,
                    name,
                });
            }
            ".field" => {
                let c = class.as_mut().ok_or_else(|| syntax(line, ".field outside .class"))?;
                let [_, name, desc] = toks.as_slice() else {
                    return Err(syntax(line, "expected `.field <name> <desc>`"));
                };
                if parse_field_descriptor(desc).is_none() {
                    return Err(syntax(line, format!("malformed field descriptor {desc:?}")));
                }
                let name_index = c.pool.utf8(name);
                let descriptor_index = c.pool.utf8(desc);
                c.fields.push(FieldDef {
                    name_index,
                    descriptor_index,
                });
            }
            ".method" => {
                let c = class.as_mut().ok_or_else(|| syntax(line, ".method outside .class"))?;
                c.close_method()?;
                let (native, rest) = match toks.get(1).map(String::as_str) {
                    Some("native") => (true, &toks[2..]),
                    _ => (false, &toks[1..]),
                };
                let (name, desc, max_stack, max_locals) = match rest {
                    [n, d, s, l] => (n, d, parse_num::<u16>(s, line)?, parse_num::<u16>(l, line)?),
                    [n, d] if native => (n, d, 0, 0),
                    _ => {
                        return Err(syntax(
                            line,
                            "expected `.method [native] <name> <desc> <max_stack> <max_locals>`",
                        ))
                    }
                };
                if parse_method_descriptor(desc).is_none() {
                    return Err(syntax(line, format!("malformed method descriptor {desc:?}")));
                }
                let name_index = c.pool.utf8(name);
                let descriptor_index = c.pool.utf8(desc);
                let def = MethodDef {
                    flags: if native { ACC_NATIVE } else { 0 },
                    name_index,
                    descriptor_index,
                    max_stack,
                    max_locals,
                    code: Vec::new(),
                };
                if native {
                    c.methods.push(def);
                } else {
                    c.current = Some(MethodBuilder {
                        def,
                        code: Vec::new(),
                        len: 0,
                        labels: HashMap::new(),
                    });
                }
            }
            d if d.starts_with('.') => return Err(syntax(line, format!("unknown directive {d}"))),
            label if label.ends_with(':') => {
                let m = class
                    .as_mut()
                    .and_then(|c| c.current.as_mut())
                    .ok_or_else(|| syntax(line, "label outside method body"))?;
                let name = label.trim_end_matches(':');
                if toks.len() != 1 || !name.starts_with('L') || name.len() < 2 {
                    return Err(syntax(line, format!("bad label {label:?}")));
                }
                if m.labels.insert(name.to_string(), m.len).is_some() {
                    return Err(syntax(line, format!("duplicate label {name}")));
                }
            }
            mnemonic => {
                let c = class
                    .as_mut()
                    .ok_or_else(|| syntax(line, "instruction outside .class"))?;
                let op = Opcode::from_mnemonic(mnemonic).ok_or_else(|| AsmError::UnknownOpcode {
                    line,
                    name: mnemonic.to_string(),
                })?;
                if c.current.is_none() {
                    return Err(syntax(line, "instruction outside method body"));
                }
                let args = &toks[1..];
                let want = match op {
                    Opcode::Invoke | Opcode::Getf | Opcode::Putf => 2,
                    _ if op.operand_len() > 0 => 1,
                    _ => 0,
                };
                if args.len() != want {
                    return Err(syntax(line, format!("{op} takes {want} operand(s)")));
                }
                let pending = match op {
                    Opcode::Iconst => Pending::Done(Instr::Iconst(parse_num(&args[0], line)?)),
                    Opcode::Sconst => {
                        let s = args[0]
                            .strip_prefix('"')
                            .ok_or_else(|| syntax(line, "SCONST expects a string literal"))?;
                        Pending::Done(Instr::Sconst(c.pool.utf8(s)))
                    }
                    Opcode::Load => Pending::Done(Instr::Load(parse_num(&args[0], line)?)),
                    Opcode::Store => Pending::Done(Instr::Store(parse_num(&args[0], line)?)),
                    Opcode::Ifeq | Opcode::Iflt | Opcode::Goto => Pending::Branch {
                        op,
                        label: args[0].clone(),
                        line,
                    },
                    Opcode::New => Pending::Done(Instr::New(c.pool.class(&args[0]))),
                    Opcode::Invoke | Opcode::Getf | Opcode::Putf => {
                        let (cls, name) = split_member(&args[0], line)?;
                        let desc = &args[1];
                        let is_method = op == Opcode::Invoke;
                        let ok = if is_method {
                            parse_method_descriptor(desc).is_some()
                        } else {
                            parse_field_descriptor(desc).is_some()
                        };
                        if !ok {
                            return Err(syntax(line, format!("malformed descriptor {desc:?}")));
                        }
                        let idx = c.pool.member(is_method, cls, name, desc);
                        Pending::Done(match op {
                            Opcode::Invoke => Instr::Invoke(idx),
                            Opcode::Getf => Instr::Getf(idx),
                            _ => Instr::Putf(idx),
                        })
                    }
                    Opcode::Nop => Pending::Done(Instr::Nop),
                    Opcode::Nullconst => Pending::Done(Instr::Nullconst),
                    Opcode::Iadd => Pending::Done(Instr::Iadd),
                    Opcode::Isub => Pending::Done(Instr::Isub),
                    Opcode::Imul => Pending::Done(Instr::Imul),
                    Opcode::Idiv => Pending::Done(Instr::Idiv),
                    Opcode::Ret => Pending::Done(Instr::Ret),
                    Opcode::Retv => Pending::Done(Instr::Retv),
                    Opcode::Dup => Pending::Done(Instr::Dup),
                    Opcode::Pop => Pending::Done(Instr::Pop),
                };
                let m = c.current.as_mut().expect("checked above");
                let pc = m.len;
                m.len += 1 + op.operand_len();
                m.code.push((pc, pending));
            }
        }
    }
    if let Some(c) = class.take() {
        bundle.entries.push(super::bundle::BundleEntry {
            name: c.name.clone(),
            class: c.finish()?,
        });
    }
    Ok(bundle)
}

/// Assemble straight to bundle bytes.
pub fn assemble(source: &str) -> Result<Vec<u8>, AsmError> {
    assemble_bundle(source)?.serialize().map_err(|e| AsmError::Invalid {
        class: "<bundle>".into(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcf::code::disassemble;

    #[test]
    fn empty_class() {
        let b = assemble_bundle(".class Empty\n").unwrap();
        assert_eq!(b.len(), 1);
        let bytes = assemble(".class Empty").unwrap();
        let back = Bundle::parse(&bytes).unwrap();
        assert_eq!(back.entries[0].class.name().unwrap(), "Empty");
    }

    #[test]
    fn unknown_opcode() {
        let err = assemble(".class A\n.method run ()V 1 1\n  FLY\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnknownOpcode {
                line: 3,
                name: "FLY".into()
            }
        );
    }

    #[test]
    fn unresolved_label() {
        let err = assemble(".class A\n.method run ()V 1 1\n  GOTO L9\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnresolvedSymbol {
                line: 3,
                name: "L9".into()
            }
        );
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = assemble(".class A\n.field x\n").unwrap_err();
        assert!(matches!(err, AsmError::SyntaxError { line: 2, .. }));
    }

    #[test]
    fn branches_resolve_backwards_and_forwards() {
        let src = r#"
.class Loop
.method run ()I 2 2
    ICONST 3
    STORE 1
L0:
    LOAD 1
    IFEQ L1
    LOAD 1
    ICONST 1
    ISUB
    STORE 1
    GOTO L0
L1:
    LOAD 1
    RETV
"#;
        let b = assemble_bundle(src).unwrap();
        let code = &b.entries[0].class.methods[0].code;
        let ins = disassemble(code).unwrap();
        // IFEQ at pc 7 jumps forward to L1, GOTO jumps back to pc 5
        assert!(ins.iter().any(|(_, i)| matches!(i, Instr::Goto(o) if *o < 0)));
        assert!(ins.iter().any(|(_, i)| matches!(i, Instr::Ifeq(o) if *o > 0)));
    }

    #[test]
    fn strings_and_escapes() {
        let src = ".class S\n.method run ()Llang/String; 1 1\n SCONST \"a \\\"q\\\" # not comment\"\n RETV\n";
        let b = assemble_bundle(src).unwrap();
        let cf = &b.entries[0].class;
        assert!(cf
            .constant_pool
            .contains(&ConstantPoolEntry::Utf8("a \"q\" # not comment".into())));
    }

    #[test]
    fn constant_pool_is_interned() {
        let src = ".class A\n.method run ()V 2 1\n SCONST \"x\"\n SCONST \"x\"\n POP\n POP\n RET\n";
        let b = assemble_bundle(src).unwrap();
        let n = b.entries[0]
            .class
            .constant_pool
            .iter()
            .filter(|e| **e == ConstantPoolEntry::Utf8("x".into()))
            .count();
        assert_eq!(n, 1);
    }
}
