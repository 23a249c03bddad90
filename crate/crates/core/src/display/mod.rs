//! User-side graphics server. Holds no class loader: the only logic here is
//! built in, and nothing arriving over the wire is ever executed.

pub mod browser;
pub mod image;
pub mod model;
pub mod server;

pub use browser::{Browser, LoadedPage, Surface};
pub use image::{Image, ImageError};
pub use model::{DrawCommand, DrawEntry, EventKind, InputEvent, Widget, WidgetKind, WidgetTree, WindowBudget};
pub use server::{Delivery, Display, DisplayConfig, DisplayError, ImageSource, SessionStats};
