//! MCI1 images: `MCI1 | u16 w | u16 h | u8 C | C×(r,g,b) | pixels`.
//! With C > 0 each pixel is one colormap index byte; with C = 0 each
//! pixel is an r,g,b triple.

use crate::codec::{ByteReader, ByteWriter};

pub const MCI_MAGIC: &[u8; 4] = b"MCI1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u16,
    pub height: u16,
    /// 0xRRGGBB entries.
    pub colormap: Option<Vec<u32>>,
    /// Colormap indices, or 0xRRGGBB values for direct color.
    pub pixels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("not an MCI1 image")]
    BadMagic,
    #[error("truncated image")]
    Truncated,
    #[error("pixel index {0} outside colormap")]
    BadIndex(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

fn rgb(r: u8, g: u8, b: u8) -> u32 {
    (r as u32) << 16 | (g as u32) << 8 | b as u32
}

impl Image {
    pub fn direct(width: u16, height: u16, pixels: Vec<u32>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        Self {
            width,
            height,
            colormap: None,
            pixels: pixels.into_iter().map(|p| p & 0xFF_FFFF).collect(),
        }
    }

    pub fn indexed(width: u16, height: u16, colormap: Vec<u32>, indices: Vec<u8>) -> Self {
        assert!(!colormap.is_empty() && colormap.len() <= 255);
        assert_eq!(indices.len(), width as usize * height as usize);
        Self {
            width,
            height,
            colormap: Some(colormap.into_iter().map(|p| p & 0xFF_FFFF).collect()),
            pixels: indices.into_iter().map(u32::from).collect(),
        }
    }

    pub fn rgb_at(&self, x: u16, y: u16) -> u32 {
        let p = self.pixels[y as usize * self.width as usize + x as usize];
        match &self.colormap {
            Some(c) => c[p as usize],
            None => p,
        }
    }

    /// Every pixel resolved to 0xRRGGBB, row-major.
    pub fn to_rgb(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                v.push(self.rgb_at(x, y));
            }
        }
        v
    }

    pub fn decode(bytes: &[u8]) -> Result<Image, ImageError> {
        if bytes.len() < 4 || &bytes[..4] != MCI_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let mut r = ByteReader::new(&bytes[4..]);
        let t = |_| ImageError::Truncated;
        let width = r.u16().map_err(t)?;
        let height = r.u16().map_err(t)?;
        let c = r.u8().map_err(t)? as usize;
        let n = width as usize * height as usize;
        let img = if c == 0 {
            let raw = r.take(n * 3).map_err(t)?;
            let pixels = raw.chunks(3).map(|p| rgb(p[0], p[1], p[2])).collect();
            Image {
                width,
                height,
                colormap: None,
                pixels,
            }
        } else {
            let cm = r.take(c * 3).map_err(t)?;
            let colormap: Vec<u32> = cm.chunks(3).map(|p| rgb(p[0], p[1], p[2])).collect();
            let raw = r.take(n).map_err(t)?;
            if let Some(&bad) = raw.iter().find(|&&i| i as usize >= c) {
                return Err(ImageError::BadIndex(bad));
            }
            Image {
                width,
                height,
                colormap: Some(colormap),
                pixels: raw.iter().map(|&i| i as u32).collect(),
            }
        };
        if !r.is_empty() {
            return Err(ImageError::TrailingBytes(r.remaining()));
        }
        Ok(img)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MCI_MAGIC).u16(self.width).u16(self.height);
        let triple = |w: &mut ByteWriter, p: u32| {
            w.u8((p >> 16) as u8).u8((p >> 8) as u8).u8(p as u8);
        };
        match &self.colormap {
            None => {
                w.u8(0);
                for &p in &self.pixels {
                    triple(&mut w, p);
                }
            }
            Some(c) => {
                w.u8(c.len() as u8);
                for &p in c {
                    triple(&mut w, p);
                }
                for &i in &self.pixels {
                    w.u8(i as u8);
                }
            }
        }
        w.into_inner()
    }
}
