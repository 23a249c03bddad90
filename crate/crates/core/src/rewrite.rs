//! Constant-pool rewriting: retarget UI class names at the playground stub
//! library and check that nothing unmapped survives.
//!
//! Only Utf8 entries change. Constant-pool indices, code and flags are
//! never touched, and Utf8 entries are length-prefixed, so a name growing
//! or shrinking needs no index fix-ups.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::mcf::classfile::ConstantPoolEntry;
use crate::mcf::descriptor::{parse_field_descriptor, parse_method_descriptor, MethodDescriptor, TypeDesc};
use crate::mcf::{Bundle, BundleError};

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("parse failure: {0}")]
    ParseFailure(#[from] BundleError),
    #[error("ambiguous name map: {0}")]
    AmbiguousMap(String),
}

/// Ordered prefix substitution table over `/`-separated class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameMap {
    rules: Vec<(String, String)>,
}

/// `name` is `prefix` or lies beneath it at a segment boundary.
fn segment_prefix(prefix: &str, name: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'/'))
}

impl Default for NameMap {
    fn default() -> Self {
        NameMap::new([
            ("applet/Applet", "pgawt/PGApplet"),
            ("awt/Button", "pgawt/PGButton"),
            ("awt/Frame", "pgawt/PGFrame"),
            ("awt/Label", "pgawt/PGLabel"),
            ("awt/TextField", "pgawt/PGTextField"),
            ("awt/Graphics", "pgawt/PGGraphics"),
            ("awt/Image", "pgawt/PGImage"),
            ("awt/event/MouseEvent", "pgawt/PGMouseEvent"),
            ("awt/image/RGBImageFilter", "pgawt/PGRGBImageFilter"),
        ])
        .expect("default map is unambiguous")
    }
}

impl NameMap {
    pub fn new<I, A, B>(rules: I) -> Result<NameMap, RewriteError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let map = NameMap {
            rules: rules.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        };
        map.check()?;
        Ok(map)
    }

    fn check(&self) -> Result<(), RewriteError> {
        for (i, (a, _)) in self.rules.iter().enumerate() {
            if a.is_empty() {
                return Err(RewriteError::AmbiguousMap("empty source prefix".into()));
            }
            for (j, (b, _)) in self.rules.iter().enumerate() {
                if i != j && segment_prefix(a, b) {
                    return Err(RewriteError::AmbiguousMap(format!("{a} overlaps {b}")));
                }
            }
            for (_, target) in &self.rules {
                if segment_prefix(a, target) {
                    return Err(RewriteError::AmbiguousMap(format!(
                        "target {target} is itself rewritten by {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    /// Map one class name, if any rule applies.
    pub fn map_name(&self, name: &str) -> Option<String> {
        self.rules
            .iter()
            .find(|(from, _)| segment_prefix(from, name))
            .map(|(from, to)| format!("{to}{}", &name[from.len()..]))
    }

    fn map_type(&self, t: &TypeDesc) -> (TypeDesc, bool) {
        match t {
            TypeDesc::Object(n) => match self.map_name(n) {
                Some(m) => (TypeDesc::Object(m), true),
                None => (t.clone(), false),
            },
            _ => (t.clone(), false),
        }
    }

    /// Rewrite a Utf8 entry wherever a class name can occur in it: as a
    /// bare name or inside a field or method descriptor.
    pub fn map_utf8(&self, s: &str) -> Option<String> {
        if let Some(d) = parse_method_descriptor(s) {
            let mut changed = false;
            let params = d
                .params
                .iter()
                .map(|p| {
                    let (t, c) = self.map_type(p);
                    changed |= c;
                    t
                })
                .collect();
            let ret = d.ret.as_ref().map(|r| {
                let (t, c) = self.map_type(r);
                changed |= c;
                t
            });
            return changed.then(|| MethodDescriptor { params, ret }.to_string());
        }
        if let Some(t @ TypeDesc::Object(_)) = parse_field_descriptor(s) {
            let (m, changed) = self.map_type(&t);
            return changed.then(|| m.to_string());
        }
        self.map_name(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Substitution {
    pub cp_index: u16,
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub substitutions: Vec<Substitution>,
    pub untouched: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RewriteReport {
    pub classes: Vec<ClassReport>,
    /// Referenced class names that are neither bundle-internal nor
    /// allowlisted, sorted.
    pub residuals: Vec<String>,
}

impl RewriteReport {
    pub fn passed(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn substitution_count(&self) -> usize {
        self.classes.iter().map(|c| c.substitutions.len()).sum()
    }

    /// Line-oriented rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            let _ = writeln!(out, "class {}", c.class);
            for s in &c.substitutions {
                let _ = writeln!(out, "  #{} {:?} -> {:?}", s.cp_index, s.old, s.new);
            }
            let _ = writeln!(out, "  untouched {}", c.untouched);
        }
        for r in &self.residuals {
            let _ = writeln!(out, "residual {r}");
        }
        let _ = writeln!(out, "verify {}", if self.passed() { "pass" } else { "fail" });
        out
    }

    /// Machine-readable rendering with keys `classes[{class, substitutions[{cp_index, old, new}], untouched}]`,
    /// `residuals`, `passed`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            classes: &'a [ClassReport],
            residuals: &'a [String],
            passed: bool,
        }
        serde_json::to_string_pretty(&Doc {
            classes: &self.classes,
            residuals: &self.residuals,
            passed: self.passed(),
        })
        .expect("report serializes")
    }
}

/// Class-name allowlist; entries ending in `/*` match a whole package.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allowlist {
    patterns: Vec<String>,
}

impl Default for Allowlist {
    fn default() -> Self {
        Allowlist::new(["pgawt/*", "lang/*"])
    }
}

impl Allowlist {
    pub fn new<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Allowlist {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn allows(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| match p.strip_suffix("/*") {
            Some(pkg) => name.len() > pkg.len() + 1 && name.starts_with(pkg) && name.as_bytes()[pkg.len()] == b'/',
            None => p == name,
        })
    }
}

/// Apply the map to a parsed bundle in place.
pub fn rewrite_parsed(bundle: &mut Bundle, map: &NameMap) -> Result<RewriteReport, RewriteError> {
    map.check()?;
    let mut report = RewriteReport::default();
    for entry in &mut bundle.entries {
        let mut subs = Vec::new();
        let mut untouched = 0;
        for (i, e) in entry.class.constant_pool.iter_mut().enumerate() {
            let ConstantPoolEntry::Utf8(s) = e else {
                untouched += 1;
                continue;
            };
            match map.map_utf8(s) {
                Some(new) => {
                    subs.push(Substitution {
                        cp_index: (i + 1) as u16,
                        old: std::mem::replace(s, new.clone()),
                        new,
                    });
                }
                None => untouched += 1,
            }
        }
        if let Some(new_name) = map.map_name(&entry.name) {
            entry.name = new_name;
        }
        report.classes.push(ClassReport {
            class: entry.name.clone(),
            substitutions: subs,
            untouched,
        });
    }
    Ok(report)
}

/// Rewrite bundle bytes, returning the new bytes and what changed.
pub fn rewrite_bundle(bytes: &[u8], map: &NameMap) -> Result<(Vec<u8>, RewriteReport), RewriteError> {
    let mut bundle = Bundle::parse(bytes)?;
    let report = rewrite_parsed(&mut bundle, map)?;
    Ok((bundle.serialize()?, report))
}

/// Residual class references of a parsed bundle.
pub fn residuals(bundle: &Bundle, allowlist: &Allowlist) -> Vec<String> {
    let internal: BTreeSet<&str> = bundle.entries.iter().filter_map(|e| e.class.name().ok()).collect();
    let mut out = BTreeSet::new();
    for e in &bundle.entries {
        for name in e.class.class_refs() {
            if !internal.contains(name) && !allowlist.allows(name) {
                out.insert(name.to_string());
            }
        }
    }
    out.into_iter().collect()
}

/// Check that a (rewritten) bundle references nothing outside itself and
/// the allowlist.
pub fn verify_rewritten(bytes: &[u8], allowlist: &Allowlist) -> Result<RewriteReport, RewriteError> {
    let bundle = Bundle::parse(bytes)?;
    Ok(RewriteReport {
        classes: bundle
            .entries
            .iter()
            .map(|e| ClassReport {
                class: e.name.clone(),
                substitutions: Vec::new(),
                untouched: e.class.constant_pool.len(),
            })
            .collect(),
        residuals: residuals(&bundle, allowlist),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcf::assemble;

    #[test]
    fn segment_matching_ignores_lookalikes() {
        let m = NameMap::default();
        assert_eq!(m.map_name("awt/Graphics").as_deref(), Some("pgawt/PGGraphics"));
        assert_eq!(m.map_name("awtx/Foo"), None);
        assert_eq!(m.map_name("awt/GraphicsX"), None);
        assert_eq!(m.map_name("awt/Button/Inner").as_deref(), Some("pgawt/PGButton/Inner"));
    }

    #[test]
    fn descriptors_are_rewritten() {
        let m = NameMap::default();
        assert_eq!(
            m.map_utf8("(Lawt/event/MouseEvent;)V").as_deref(),
            Some("(Lpgawt/PGMouseEvent;)V")
        );
        assert_eq!(m.map_utf8("Lawt/Image;").as_deref(), Some("Lpgawt/PGImage;"));
        assert_eq!(m.map_utf8("(II)V"), None);
        assert_eq!(m.map_utf8("Click!"), None);
    }

    #[test]
    fn overlapping_sources_are_ambiguous() {
        assert!(matches!(
            NameMap::new([("awt", "x/A"), ("awt/Button", "x/B")]),
            Err(RewriteError::AmbiguousMap(_))
        ));
        assert!(matches!(
            NameMap::new([("a/B", "a/B/C")]),
            Err(RewriteError::AmbiguousMap(_))
        ));
    }

    #[test]
    fn identity_when_nothing_maps() {
        let bytes = assemble(".class Plain\n.method run ()V 1 1\n RET\n").unwrap();
        let (out, report) = rewrite_bundle(&bytes, &NameMap::default()).unwrap();
        assert_eq!(out, bytes);
        assert_eq!(report.substitution_count(), 0);
    }

    #[test]
    fn allowlist_globs() {
        let a = Allowlist::default();
        assert!(a.allows("pgawt/PGApplet"));
        assert!(a.allows("lang/reflect/Method"));
        assert!(!a.allows("pgawt"));
        assert!(!a.allows("pgawtx/A"));
        assert!(!a.allows("net/Socket"));
    }

    #[test]
    fn empty_bundle_verifies() {
        let r = verify_rewritten(&[0, 0], &Allowlist::default()).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn report_renders() {
        let bytes = assemble(".class C extends applet/Applet\n").unwrap();
        let (_, report) = rewrite_bundle(&bytes, &NameMap::default()).unwrap();
        let text = report.to_text();
        assert!(text.contains("\"applet/Applet\" -> \"pgawt/PGApplet\""), "{text}");
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["classes"][0]["substitutions"][0]["new"], "pgawt/PGApplet");
        assert_eq!(json["passed"], true);
    }
}
