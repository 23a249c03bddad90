//! Widget tree, draw log, input events and the window budget.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WidgetKind {
    Surface,
    Frame,
    Button,
    Label,
    TextField,
}

impl WidgetKind {
    pub fn name(self) -> &'static str {
        match self {
            WidgetKind::Surface => "surface",
            WidgetKind::Frame => "frame",
            WidgetKind::Button => "button",
            WidgetKind::Label => "label",
            WidgetKind::TextField => "textfield",
        }
    }

    pub fn is_window(self) -> bool {
        self == WidgetKind::Frame
    }

    pub fn interface(self) -> &'static str {
        match self {
            WidgetKind::Surface => "BrowserSurface",
            WidgetKind::Frame => "BrowserFrame",
            WidgetKind::Button => "BrowserButton",
            WidgetKind::Label => "BrowserLabel",
            WidgetKind::TextField => "BrowserTextField",
        }
    }
}

impl FromStr for WidgetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "frame" => WidgetKind::Frame,
            "button" => WidgetKind::Button,
            "label" => WidgetKind::Label,
            "textfield" => WidgetKind::TextField,
            _ => return Err(format!("unknown widget kind {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widget {
    pub id: u64,
    pub kind: WidgetKind,
    pub parent: Option<u64>,
    pub text: String,
    pub width: u32,
    pub height: u32,
    pub visible: bool,
    pub disposed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct WidgetTree {
    nodes: BTreeMap<u64, Widget>,
}

impl WidgetTree {
    pub fn insert(&mut self, w: Widget) {
        self.nodes.insert(w.id, w);
    }

    pub fn get(&self, id: u64) -> Option<&Widget> {
        self.nodes.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Widget> {
        self.nodes.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Widget> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn is_ancestor(&self, maybe: u64, of: u64) -> bool {
        let mut cur = Some(of);
        while let Some(c) = cur {
            if c == maybe {
                return true;
            }
            cur = self.nodes.get(&c).and_then(|w| w.parent);
        }
        false
    }

    /// Move `child` under `parent`, refusing cycles.
    pub fn reparent(&mut self, child: u64, parent: u64) -> Result<(), String> {
        if !self.nodes.contains_key(&parent) || !self.nodes.contains_key(&child) {
            return Err("no such widget".into());
        }
        if self.is_ancestor(child, parent) {
            return Err(format!("adding {child} under {parent} would make a cycle"));
        }
        if self.nodes[&child].kind == WidgetKind::Frame {
            return Err("frames are top-level".into());
        }
        self.nodes.get_mut(&child).unwrap().parent = Some(parent);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in self.nodes.values() {
            s.push_str(&format!("{} {}", w.id, w.kind.name()));
            if let Some(p) = w.parent {
                s.push_str(&format!(" parent={p}"));
            }
            s.push_str(&format!(" text={}", quote(&w.text)));
            if w.kind == WidgetKind::Surface {
                s.push_str(&format!(" size={}x{}", w.width, w.height));
            }
            if w.visible {
                s.push_str(" shown");
            }
            if w.disposed {
                s.push_str(" disposed");
            }
            s.push('\n');
        }
        s
    }
}

pub fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DrawCommand {
    DrawString { text: String, x: i32, y: i32 },
    DrawLine { x1: i32, y1: i32, x2: i32, y2: i32 },
    DrawRect { x: i32, y: i32, w: i32, h: i32 },
    DrawImage { index: u32, x: i32, y: i32 },
}

impl fmt::Display for DrawCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DrawCommand::DrawString { text, x, y } => write!(f, "DrawString {} {x} {y}", quote(text)),
            DrawCommand::DrawLine { x1, y1, x2, y2 } => write!(f, "DrawLine {x1} {y1} {x2} {y2}"),
            DrawCommand::DrawRect { x, y, w, h } => write!(f, "DrawRect {x} {y} {w} {h}"),
            DrawCommand::DrawImage { index, x, y } => write!(f, "DrawImage {index} {x} {y}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawEntry {
    pub seq: u64,
    pub ctx: u64,
    pub cmd: DrawCommand,
}

impl fmt::Display for DrawEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} ctx={} {}", self.seq, self.ctx, self.cmd)
    }
}

/// Append-only; sequence numbers count up from 1 per context.
#[derive(Debug, Clone, Default)]
pub struct DrawLog {
    entries: Vec<DrawEntry>,
    next: BTreeMap<u64, u64>,
}

impl DrawLog {
    pub fn append(&mut self, ctx: u64, cmd: DrawCommand) -> u64 {
        let n = self.next.entry(ctx).or_insert(1);
        let seq = *n;
        *n += 1;
        self.entries.push(DrawEntry { seq, ctx, cmd });
        seq
    }

    pub fn entries(&self) -> &[DrawEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    MouseClicked,
    MousePressed,
    MouseReleased,
    Action,
    Key,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::MouseClicked,
        EventKind::MousePressed,
        EventKind::MouseReleased,
        EventKind::Action,
        EventKind::Key,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::MouseClicked => "mouse-clicked",
            EventKind::MousePressed => "mouse-pressed",
            EventKind::MouseReleased => "mouse-released",
            EventKind::Action => "action",
            EventKind::Key => "key",
        }
    }

    /// Remote method invoked on the playground-side listener.
    pub fn callback(self) -> Option<&'static str> {
        match self {
            EventKind::MouseClicked => Some("PGMouseClicked"),
            EventKind::MousePressed => Some("PGMousePressed"),
            EventKind::MouseReleased => Some("PGMouseReleased"),
            EventKind::Action => Some("PGActionPerformed"),
            EventKind::Key => None,
        }
    }

    pub fn is_mouse(self) -> bool {
        matches!(
            self,
            EventKind::MouseClicked | EventKind::MousePressed | EventKind::MouseReleased
        )
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputEvent {
    pub kind: EventKind,
    pub x: i32,
    pub y: i32,
    /// Widget id; 0 means the session's surface.
    pub target: u64,
}

impl InputEvent {
    pub fn click(x: i32, y: i32) -> Self {
        Self {
            kind: EventKind::MouseClicked,
            x,
            y,
            target: 0,
        }
    }

    pub fn action(widget: u64) -> Self {
        Self {
            kind: EventKind::Action,
            x: 0,
            y: 0,
            target: widget,
        }
    }
}

/// Caps live windows and creation rate. The rate is a token bucket that
/// starts full with `max_windows` tokens.
#[derive(Debug, Clone)]
pub struct WindowBudget {
    pub max_windows: usize,
    pub max_rate: f64,
    pub live: usize,
    pub created: u64,
    pub refused: u64,
    tokens: f64,
    last: Instant,
}

impl WindowBudget {
    pub fn new(max_windows: usize, max_rate: f64) -> Self {
        Self {
            max_windows,
            max_rate,
            live: 0,
            created: 0,
            refused: 0,
            tokens: max_windows as f64,
            last: Instant::now(),
        }
    }

    pub fn try_create(&mut self) -> Result<(), String> {
        let now = Instant::now();
        let cap = self.max_windows.max(1) as f64;
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.max_rate).min(cap);
        self.last = now;
        if self.live >= self.max_windows {
            self.refused += 1;
            return Err(format!("{} live windows (max {})", self.live, self.max_windows));
        }
        if self.tokens < 1.0 {
            self.refused += 1;
            return Err(format!("window creation rate above {}/s", self.max_rate));
        }
        self.tokens -= 1.0;
        self.live += 1;
        self.created += 1;
        Ok(())
    }

    pub fn release(&mut self) {
        self.live = self.live.saturating_sub(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_counts() {
        let mut b = WindowBudget::new(32, 4.0);
        for _ in 0..32 {
            b.try_create().unwrap();
        }
        assert!(b.try_create().is_err());
        assert_eq!(b.created, 32);
    }

    #[test]
    fn budget_rate_after_burst() {
        let mut b = WindowBudget::new(4, 1.0);
        for _ in 0..4 {
            b.try_create().unwrap();
            b.release();
        }
        assert!(b.try_create().unwrap_err().contains("rate"));
    }

    #[test]
    fn log_sequences_per_context() {
        let mut l = DrawLog::default();
        l.append(
            1,
            DrawCommand::DrawLine {
                x1: 0,
                y1: 0,
                x2: 1,
                y2: 1,
            },
        );
        l.append(2, DrawCommand::DrawRect { x: 0, y: 0, w: 1, h: 1 });
        let s = l.append(
            1,
            DrawCommand::DrawString {
                text: "a\"b".into(),
                x: 1,
                y: 2,
            },
        );
        assert_eq!(s, 2);
        assert_eq!(l.entries()[2].to_string(), "#2 ctx=1 DrawString \"a\\\"b\" 1 2");
    }

    #[test]
    fn tree_refuses_cycles() {
        let mut t = WidgetTree::default();
        for (id, kind) in [
            (1, WidgetKind::Surface),
            (2, WidgetKind::Label),
            (3, WidgetKind::Button),
        ] {
            t.insert(Widget {
                id,
                kind,
                parent: None,
                text: String::new(),
                width: 0,
                height: 0,
                visible: false,
                disposed: false,
            });
        }
        t.reparent(2, 1).unwrap();
        t.reparent(3, 2).unwrap();
        assert!(t.reparent(2, 3).is_err());
    }
}
