//! Dense float rasters and binary planes.
//!
//! All image data in memory is `f64`, interleaved `(y, x, channel)`. RGB data
//! is normalized to `[0, 1]`; latents and discriminator scores are unbounded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Constant RGB raster.
    pub fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, 3, |_, _, c| rgb[c])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_dims(&self, other: &Raster, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.check_same_dims(other, "zip_map")?;
        Ok(Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, element-wise. Panics on a dims mismatch.
    pub fn add_assign(&mut self, other: &Raster) {
        assert!(self.same_dims(other), "add_assign dims");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rec. 601 luminance of an RGB raster, as a single-channel raster.
    pub fn luminance(&self) -> Raster {
        assert_eq!(self.channels, 3, "luminance needs RGB input");
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Copy of the window `[x0, x0+w) x [y0, y0+h)`. Out-of-image samples
    /// replicate the nearest edge pixel.
    pub fn crop_clamped(&self, x0: isize, y0: isize, w: usize, h: usize) -> Raster {
        let maxx = self.width as isize - 1;
        let maxy = self.height as isize - 1;
        let mut out = Raster::zeros(w, h, self.channels);
        for y in 0..h {
            let sy = (y0 + y as isize).clamp(0, maxy) as usize;
            for x in 0..w {
                let sx = (x0 + x as isize).clamp(0, maxx) as usize;
                let src = self.index(sx, sy, 0);
                let dst = out.index(x, y, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Copy `src` into this raster with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &Raster, x0: usize, y0: usize) -> Result<()> {
        if src.channels != self.channels
            || x0 + src.width > self.width
            || y0 + src.height > self.height
        {
            return Err(Error::Range(format!(
                "{}x{} patch at ({x0}, {y0}) in {}x{} raster",
                src.width, src.height, self.width, self.height
            )));
        }
        let row = src.width * self.channels;
        for y in 0..src.height {
            let d = self.index(x0, y0 + y, 0);
            let s = src.index(0, y, 0);
            self.data[d..d + row].copy_from_slice(&src.data[s..s + row]);
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Raster {
        Raster::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    pub fn flip_vertical(&self) -> Raster {
        Raster::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(x, self.height - 1 - y, c)
        })
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Raster::zeros(width, height, self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    out.set(x, y, c, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// 2x box-filter downsample; odd trailing rows/columns average what exists.
    pub fn downsample2(&self) -> Raster {
        let w = self.width.div_ceil(2).max(1);
        let h = self.height.div_ceil(2).max(1);
        let mut out = Raster::zeros(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (px, py) = (2 * x + dx, 2 * y + dy);
                            if px < self.width && py < self.height {
                                sum += self.get(px, py, c);
                                n += 1.0;
                            }
                        }
                    }
                    out.set(x, y, c, sum / n);
                }
            }
        }
        out
    }

    /// Quantize to 8-bit per channel, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Raster::from_vec(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

/// A binary raster with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPlane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BitPlane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.data.len() as f64
        }
    }

    pub fn complement(&self) -> BitPlane {
        BitPlane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v == 0) as u8).collect(),
        }
    }

    /// Nearest-neighbour resampling; keeps values binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BitPlane {
        BitPlane::from_fn(width, height, |x, y| {
            let sx = nearest_index(x, width, self.width);
            let sy = nearest_index(y, height, self.height);
            self.get(sx, sy)
        })
    }

    /// As a single-channel float raster of 0.0 / 1.0.
    pub fn to_raster(&self) -> Raster {
        Raster::from_fn(self.width, self.height, 1, |x, y, _| {
            if self.get(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn flip_horizontal(&self) -> BitPlane {
        BitPlane::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_vertical(&self) -> BitPlane {
        BitPlane::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }
}

/// Source index sampled by nearest-neighbour resizing from `src_len` to `dst_len`.
#[inline]
pub fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}
