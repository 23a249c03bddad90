//! Tolerant applet-tag scanner and rewriter. Works on raw bytes; anything
//! it does not recognize passes through untouched.

use std::ops::Range;

pub const DEFAULT_SERVER_NAME: &str = "BrowserServer";
pub const CONTACT_PARAM: &str = "ContactAddress";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attr {
    pub name: String,
    pub value: Option<String>,
    /// Bytes of the value, quotes excluded.
    pub value_span: Option<Range<usize>>,
}

/// One `<name ...>` start tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tag {
    pub name: String,
    pub span: Range<usize>,
    pub attrs: Vec<Attr>,
}

impl Tag {
    pub fn attr(&self, name: &str) -> Option<&Attr> {
        self.attrs.iter().find(|a| a.name.eq_ignore_ascii_case(name))
    }

    pub fn value(&self, name: &str) -> Option<&str> {
        self.attr(name).and_then(|a| a.value.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppletTag {
    pub code: String,
    pub codebase: Option<String>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub params: Vec<(String, String)>,
    pub span: Range<usize>,
}

impl AppletTag {
    pub fn param(&self, name: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0c')
}

fn starts_with_ci(hay: &[u8], at: usize, needle: &[u8]) -> bool {
    hay.len() >= at + needle.len() && hay[at..at + needle.len()].eq_ignore_ascii_case(needle)
}

/// Parse a start tag whose `<` sits at `start`. `None` if unterminated.
fn parse_tag(page: &[u8], start: usize, name_len: usize) -> Option<Tag> {
    let name = String::from_utf8_lossy(&page[start + 1..start + 1 + name_len]).to_ascii_lowercase();
    let mut i = start + 1 + name_len;
    let mut attrs = Vec::new();
    loop {
        while i < page.len() && (is_space(page[i]) || page[i] == b'/') {
            i += 1;
        }
        if i >= page.len() {
            return None;
        }
        if page[i] == b'>' {
            return Some(Tag {
                name,
                span: start..i + 1,
                attrs,
            });
        }
        let n0 = i;
        while i < page.len() && !is_space(page[i]) && !matches!(page[i], b'>' | b'=' | b'/') {
            i += 1;
        }
        let aname = String::from_utf8_lossy(&page[n0..i]).to_string();
        let mut j = i;
        while j < page.len() && is_space(page[j]) {
            j += 1;
        }
        if j < page.len() && page[j] == b'=' {
            j += 1;
            while j < page.len() && is_space(page[j]) {
                j += 1;
            }
            if j >= page.len() {
                return None;
            }
            let (vspan, next) = match page[j] {
                q @ (b'"' | b'\'') => {
                    let close = page[j + 1..].iter().position(|&b| b == q)? + j + 1;
                    (j + 1..close, close + 1)
                }
                _ => {
                    let mut k = j;
                    while k < page.len() && !is_space(page[k]) && page[k] != b'>' {
                        k += 1;
                    }
                    (j..k, k)
                }
            };
            attrs.push(Attr {
                name: aname,
                value: Some(String::from_utf8_lossy(&page[vspan.clone()]).to_string()),
                value_span: Some(vspan),
            });
            i = next;
        } else {
            if n0 == i {
                // stray '=' or similar
                i += 1;
                continue;
            }
            attrs.push(Attr {
                name: aname,
                value: None,
                value_span: None,
            });
        }
    }
}

/// All start tags named `name` (case-insensitive), in document order.
pub fn scan_tags(page: &[u8], name: &str) -> Vec<Tag> {
    let mut out = Vec::new();
    let needle = name.as_bytes();
    let mut i = 0;
    while i < page.len() {
        if page[i] == b'<' && starts_with_ci(page, i + 1, needle) {
            let after = i + 1 + needle.len();
            if after < page.len() && (is_space(page[after]) || page[after] == b'>' || page[after] == b'/') {
                if let Some(t) = parse_tag(page, i, needle.len()) {
                    i = t.span.end;
                    out.push(t);
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

fn find_close(page: &[u8], from: usize, name: &str) -> Option<usize> {
    let needle = format!("</{name}");
    (from..page.len()).find(|&i| starts_with_ci(page, i, needle.as_bytes()))
}

/// Recognized applet tags: those carrying a `code` attribute.
pub fn scan_applets(page: &[u8]) -> Vec<AppletTag> {
    let tags = scan_tags(page, "applet");
    let params = scan_tags(page, "param");
    let mut out = Vec::new();
    for (k, t) in tags.iter().enumerate() {
        let Some(code) = t.value("code") else { continue };
        let body_end = find_close(page, t.span.end, "applet")
            .into_iter()
            .chain(tags.get(k + 1).map(|n| n.span.start))
            .min()
            .unwrap_or(page.len());
        let ps = params
            .iter()
            .filter(|p| p.span.start >= t.span.end && p.span.end <= body_end)
            .filter_map(|p| Some((p.value("name")?.to_string(), p.value("value").unwrap_or("").to_string())))
            .collect();
        out.push(AppletTag {
            code: code.to_string(),
            codebase: t.value("codebase").map(str::to_string),
            width: t.value("width").and_then(|v| v.trim().parse().ok()),
            height: t.value("height").and_then(|v| v.trim().parse().ok()),
            params: ps,
            span: t.span.clone(),
        });
    }
    out
}

/// Rewritten page plus the tags in document order with their addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HtmlRewrite {
    pub page: Vec<u8>,
    pub tags: Vec<(AppletTag, String)>,
    /// Output byte ranges that replaced input bytes.
    pub edits: Vec<Range<usize>>,
}

/// Point every applet tag at `server_name` and give it a fresh address.
pub fn rewrite_html(page: &[u8], server_name: &str, mut next_address: impl FnMut() -> String) -> HtmlRewrite {
    let applets = scan_applets(page);
    let raw = scan_tags(page, "applet");
    let mut out = Vec::with_capacity(page.len() + 64 * applets.len());
    let mut tags = Vec::new();
    let mut edits = Vec::new();
    let mut cursor = 0;
    for t in raw {
        let Some(code) = t.attr("code").and_then(|a| a.value_span.clone()) else {
            continue;
        };
        let applet = applets
            .iter()
            .find(|a| a.span == t.span)
            .cloned()
            .expect("applet scanned twice");
        let address = next_address();
        out.extend_from_slice(&page[cursor..code.start]);
        let e0 = out.len();
        out.extend_from_slice(server_name.as_bytes());
        edits.push(e0..out.len());
        out.extend_from_slice(&page[code.end..t.span.end]);
        let p0 = out.len();
        out.extend_from_slice(format!("<param name={CONTACT_PARAM} value={address}>").as_bytes());
        edits.push(p0..out.len());
        cursor = t.span.end;
        tags.push((applet, address));
    }
    out.extend_from_slice(&page[cursor..]);
    HtmlRewrite { page: out, tags, edits }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tag() {
        let page = b"<html><applet code=hostile.mcfb width=100 height=50></applet></html>";
        let r = rewrite_html(page, DEFAULT_SERVER_NAME, || "pg-1".into());
        assert_eq!(
            String::from_utf8(r.page).unwrap(),
            "<html><applet code=BrowserServer width=100 height=50><param name=ContactAddress value=pg-1></applet></html>"
        );
        assert_eq!(r.tags[0].0.code, "hostile.mcfb");
        assert_eq!(r.tags[0].0.width, Some(100));
    }

    #[test]
    fn quoting_and_case() {
        let page = b"<APPLET WIDTH='3' Code = \"a b.mcfb\"><PARAM name=x value=\"1\"></APPLET>";
        let r = rewrite_html(page, "S", || "pg-2".into());
        assert_eq!(
            String::from_utf8(r.page).unwrap(),
            "<APPLET WIDTH='3' Code = \"S\"><param name=ContactAddress value=pg-2><PARAM name=x value=\"1\"></APPLET>"
        );
        assert_eq!(r.tags[0].0.params, vec![("x".to_string(), "1".to_string())]);
    }

    #[test]
    fn no_tags_is_identity() {
        let page = b"<p>applets? <appletx code=a> <applet";
        let r = rewrite_html(page, "S", || unreachable!());
        assert_eq!(r.page, page);
        assert!(r.tags.is_empty());
    }
}
