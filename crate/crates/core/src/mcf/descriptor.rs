//! Field and method descriptors: `( Type* ) RetType` with
//! `Type ∈ {I, D, Z, L<name>;}` and `RetType ∈ Type ∪ {V}`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TypeDesc {
    Int,
    Double,
    Bool,
    Object(String),
}

impl fmt::Display for TypeDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeDesc::Int => f.write_str("I"),
            TypeDesc::Double => f.write_str("D"),
            TypeDesc::Bool => f.write_str("Z"),
            TypeDesc::Object(n) => write!(f, "L{n};"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MethodDescriptor {
    pub params: Vec<TypeDesc>,
    /// `None` is `V`.
    pub ret: Option<TypeDesc>,
}

impl fmt::Display for MethodDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for p in &self.params {
            write!(f, "{p}")?;
        }
        f.write_str(")")?;
        match &self.ret {
            Some(t) => write!(f, "{t}"),
            None => f.write_str("V"),
        }
    }
}

fn parse_type(s: &str) -> Option<(TypeDesc, &str)> {
    let mut chars = s.chars();
    match chars.next()? {
        'I' => Some((TypeDesc::Int, &s[1..])),
        'D' => Some((TypeDesc::Double, &s[1..])),
        'Z' => Some((TypeDesc::Bool, &s[1..])),
        'L' => {
            let end = s.find(';')?;
            let name = &s[1..end];
            if name.is_empty() || name.contains(['(', ')']) {
                return None;
            }
            Some((TypeDesc::Object(name.to_string()), &s[end + 1..]))
        }
        _ => None,
    }
}

/// Parse a field descriptor (exactly one `Type`).
pub fn parse_field_descriptor(s: &str) -> Option<TypeDesc> {
    match parse_type(s)? {
        (t, "") => Some(t),
        _ => None,
    }
}

pub fn parse_method_descriptor(s: &str) -> Option<MethodDescriptor> {
    let mut rest = s.strip_prefix('(')?;
    let mut params = Vec::new();
    while !rest.starts_with(')') {
        let (t, r) = parse_type(rest)?;
        params.push(t);
        rest = r;
    }
    rest = &rest[1..];
    let ret = if rest == "V" {
        None
    } else {
        Some(parse_field_descriptor(rest)?)
    };
    Some(MethodDescriptor { params, ret })
}
