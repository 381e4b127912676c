//! Grayscale frames and pixel rectangles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("PGM decode failed: {0}")]
    Pgm(String),
    #[error("rectangle {rect:?} lies outside a {width}x{height} frame")]
    OutOfBounds { rect: Rect, width: usize, height: usize },
}

/// Row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for GrayFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayFrame")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::EmptyDimensions { width, height });
        }
        let expected = width * height;
        if pixels.len() != expected {
            return Err(FrameError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, FrameError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, FrameError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    /// Converts packed RGB8 to luma with weights 0.299/0.587/0.114, rounding half up.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, FrameError> {
        let expected = width * height * 3;
        if rgb.len() != expected {
            return Err(FrameError::BufferLength {
                expected,
                actual: rgb.len(),
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|c| luma(c[0], c[1], c[2]))
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn same_dimensions(&self, other: &GrayFrame) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayFrame {
        GrayFrame {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Copies out the pixels under `rect`.
    pub fn crop(&self, rect: Rect) -> Result<GrayFrame, FrameError> {
        if rect.width == 0 || rect.height == 0 || !self.bounds().contains_rect(&rect) {
            return Err(FrameError::OutOfBounds {
                rect,
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(rect.area());
        for y in rect.y..rect.bottom() {
            pixels.extend_from_slice(&self.row(y)[rect.x..rect.right()]);
        }
        Ok(GrayFrame {
            width: rect.width,
            height: rect.height,
            pixels,
        })
    }

    /// Binary PGM (P5) encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<GrayFrame, FrameError> {
        let bad = |reason: &str| FrameError::Pgm(reason.to_string());
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
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
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        GrayFrame::new(width, height, data.to_vec())
    }

    /// Bilinear resize in 8.8 fixed point per axis.
    ///
    /// The interpolation weights of each output pixel sum to exactly 2^16, so a
    /// uniform intensity offset that does not clip passes through unchanged.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<GrayFrame, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::EmptyDimensions { width, height });
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = axis_taps(self.width, width);
        let ys = axis_taps(self.height, height);
        let mut pixels = Vec::with_capacity(width * height);
        for &(y0, y1, wy) in &ys {
            let (r0, r1) = (self.row(y0), self.row(y1));
            for &(x0, x1, wx) in &xs {
                let top = u32::from(r0[x0]) * (256 - wx) + u32::from(r0[x1]) * wx;
                let bottom = u32::from(r1[x0]) * (256 - wx) + u32::from(r1[x1]) * wx;
                let acc = top * (256 - wy) + bottom * wy;
                pixels.push(((acc + (1 << 15)) >> 16) as u8);
            }
        }
        GrayFrame::new(width, height, pixels)
    }
}

/// Half-pixel-centre sampling taps: (low index, high index, weight of high in 1/256).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, u32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let w = ((pos - lo as f64) * 256.0).round() as u32;
            (lo, hi, w.min(256))
        })
        .collect()
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let weighted = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((weighted + 500) / 1000) as u8
}

/// Axis-aligned pixel rectangle; covers columns `[x, x+width)` and rows `[y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn right(&self) -> usize {
        self.x + self.width
    }

    pub fn bottom(&self) -> usize {
        self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}
