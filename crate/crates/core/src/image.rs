//! Planar float rasters and display previews.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Planar `(channels, height, width)` linear image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Max over channels at every pixel.
    pub fn channel_max(&self) -> Vec<f32> {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.data[c * n + i])
                    .fold(f32::NEG_INFINITY, f32::max)
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                out.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Self::new(self.channels, h, w, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiplies linear values by `2^stops`.
pub fn ev_scale(img: &Image, stops: f64) -> Image {
    let k = 2f64.powf(stops) as f32;
    img.map(|v| v * k)
}

/// 8-bit sRGB-ish preview: EV shift, clip, then `v^(1/2.2)`.
pub fn write_preview_png(img: &Image, stops: f64, path: &Path) -> Result<()> {
    let scaled = ev_scale(img, stops);
    let n = img.pixels();
    let mut buf = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            let v = scaled.data[c.min(img.channels - 1) * n + i].clamp(0.0, 1.0);
            buf.push((v.powf(1.0 / 2.2) * 255.0).round() as u8);
        }
    }
    write_png(path, img.width as u32, img.height as u32, png::ColorType::Rgb, png::BitDepth::Eight, &buf)
}

/// 16-bit grayscale PNG of `values` mapped linearly from `[lo, hi]`.
pub fn write_gray16_png(values: &[f32], width: usize, height: usize, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let mut buf = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let q = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, width as u32, height as u32, png::ColorType::Grayscale, png::BitDepth::Sixteen, &buf)
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(depth);
    let err = |e: png::EncodingError| Error::data(path, e.to_string());
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(data).map_err(err)?;
    writer.finish().map_err(err)
}
