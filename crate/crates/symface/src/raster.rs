//! Minimal 8-bit raster images with PGM/PPM (binary) readers and writers.
//!
//! The corpus generator writes P5 grayscale files; the loaders also accept
//! P6 color images. Pixels are stored row-major with interleaved channels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image, grayscale (1 channel) or RGB (3 channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "pixel buffer has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("unsupported channel count {channels}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of values the image flattens to (H * W * C).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Horizontal mirror: column x maps to width-1-x.
    pub fn mirror_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    /// Copy `self` into `canvas` with its top-left corner at (x0, y0).
    pub fn blit_into(&self, canvas: &mut RasterImage, x0: usize, y0: usize) -> Result<()> {
        if canvas.channels != self.channels {
            return Err(Error::Data("channel count mismatch in blit".into()));
        }
        if x0 + self.width > canvas.width || y0 + self.height > canvas.height {
            return Err(Error::Data("blit region exceeds canvas".into()));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    canvas.set(x0 + x, y0 + y, c, self.get(x, y, c));
                }
            }
        }
        Ok(())
    }

    /// Extract the rectangle [x0, x0+w) x [y0, y0+h).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Data("crop region exceeds image".into()));
        }
        let mut out = RasterImage::zeros(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        Ok(out)
    }

    /// Serialize as binary PGM (P5) or PPM (P6) depending on channel count.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height).unwrap();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("malformed PNM: {msg}"));
        if bytes.len() < 2 {
            return Err(bad("truncated header"));
        }
        let channels = match &bytes[..2] {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(bad("expected P5 or P6 magic")),
        };
        // Header is three whitespace-separated tokens after the magic:
        // width, height, maxval. Comments (#...) run to end of line.
        let mut pos = 2;
        let mut tokens = Vec::with_capacity(3);
        while tokens.len() < 3 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            let tok = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("non-ascii header"))?
                .parse::<usize>()
                .map_err(|_| bad("non-numeric header field"))?;
            tokens.push(tok);
        }
        let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // Exactly one whitespace byte separates the header from pixel data.
        pos += 1;
        let expected = width * height * channels;
        let pixels = bytes
            .get(pos..pos + expected)
            .ok_or_else(|| bad("truncated pixel data"))?;
        Self::from_data(width, height, channels, pixels.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_pnm_bytes(&bytes)
    }
}
