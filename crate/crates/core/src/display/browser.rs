//! A synthetic browser: fetches a page through the proxy and starts one
//! graphics-server session per rewritten applet tag. Tags naming anything
//! other than the graphics server are refused, never loaded.

use super::server::{Display, DisplayError};
use crate::proxy::html::{scan_applets, CONTACT_PARAM, DEFAULT_SERVER_NAME};
use crate::proxy::http::{self, HttpError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Surface {
    pub address: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct LoadedPage {
    pub url: String,
    pub status: u16,
    pub body: Vec<u8>,
    pub surfaces: Vec<Surface>,
    /// `code` values of applet tags that were not rewritten.
    pub refused: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum BrowserError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Display(#[from] DisplayError),
}

pub struct Browser {
    display: Display,
    proxy: Option<String>,
    server_name: String,
}

impl Browser {
    pub fn new(display: Display, proxy: Option<String>) -> Self {
        Self {
            display,
            proxy,
            server_name: DEFAULT_SERVER_NAME.into(),
        }
    }

    pub fn with_server_name(mut self, name: &str) -> Self {
        self.server_name = name.into();
        self
    }

    pub fn open(&self, url: &str) -> Result<LoadedPage, BrowserError> {
        let resp = http::get(url, self.proxy.as_deref(), &[])?;
        let mut page = LoadedPage {
            url: url.into(),
            status: resp.status,
            body: resp.body,
            surfaces: Vec::new(),
            refused: Vec::new(),
        };
        if page.status != 200 {
            return Ok(page);
        }
        for tag in scan_applets(&page.body) {
            match tag.param(CONTACT_PARAM) {
                Some(addr) if tag.code == self.server_name => {
                    let (w, h) = (tag.width.unwrap_or(200), tag.height.unwrap_or(100));
                    self.display.open_session(addr, w, h)?;
                    page.surfaces.push(Surface {
                        address: addr.to_string(),
                        width: w,
                        height: h,
                    });
                }
                _ => {
                    log::warn!("refusing applet code={}", tag.code);
                    page.refused.push(tag.code.clone());
                }
            }
        }
        Ok(page)
    }
}
