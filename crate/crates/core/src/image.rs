//! Planar-interleaved `H × W × C` float images and the resampling helpers
//! used at dataset and embedder boundaries.

use std::path::Path;

use crate::container::{self, Array};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * value.len());
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Self {
            height,
            width,
            channels: value.len(),
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let o = (v * self.width + u) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Centered crop of `h × w`.
    pub fn center_crop(&self, h: usize, w: usize) -> Image {
        let (h, w) = (h.min(self.height), w.min(self.width));
        let (v0, u0) = ((self.height - h) / 2, (self.width - w) / 2);
        let mut out = Image::new(h, w, self.channels);
        for v in 0..h {
            let src = ((v0 + v) * self.width + u0) * self.channels;
            let dst = v * w * self.channels;
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::new(h, w, self.channels);
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        for v in 0..h {
            let fy = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for u in 0..w {
                let fx = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let p = |x: usize, y: usize| self.data[(y * self.width + x) * self.channels + c];
                    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                    let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                    out.data[(v * w + u) * self.channels + c] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling (for point maps and masks, where
    /// blending across depth edges would invent geometry).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::new(h, w, self.channels);
        for v in 0..h {
            let y = (((v as f64 + 0.5) * self.height as f64 / h as f64) as usize).min(self.height - 1);
            for u in 0..w {
                let x = (((u as f64 + 0.5) * self.width as f64 / w as f64) as usize).min(self.width - 1);
                let src = (y * self.width + x) * self.channels;
                let dst = (v * w + u) * self.channels;
                out.data[dst..dst + self.channels].copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    pub fn to_array(&self) -> Array {
        Array::F32 {
            shape: vec![self.height, self.width, self.channels],
            data: self.data.clone(),
        }
    }

    pub fn from_array(a: &Array) -> Result<Image> {
        match a {
            Array::F32 { shape, data } if shape.len() == 3 => {
                Image::from_vec(shape[0], shape[1], shape[2], data.clone())
            }
            Array::U8 { shape, data } if shape.len() == 2 => Image::from_vec(
                shape[0],
                shape[1],
                1,
                data.iter().map(|&b| b as f32).collect(),
            ),
            _ => Err(Error::validation(format!(
                "expected an H x W x C image array, got shape {:?}",
                a.shape()
            ))),
        }
    }

    /// 8-bit binary PPM preview (values clamped to [0, 1]).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::validation("PPM preview needs 3 channels"));
        }
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(
            self.data
                .iter()
                .map(|&x| (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
        );
        container::write_atomic(path, &bytes)
    }
}
