//! Channel-major floating-point images and resampling.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest width or height `Image::decode` accepts.
pub const MAX_SIDE: u32 = 16384;
const MAX_DECODE_BYTES: u64 = 256 << 20;

/// Pixel grid stored channel-major (`[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Bilinear,
    /// Catmull-Rom cubic (a = −0.5), edge-clamped.
    Bicubic,
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Domain(format!(
                "image {channels}x{height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[channels, height, width]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Replicates a single channel to three; other channel counts pass through.
    pub fn to_three_channels(self) -> Image {
        if self.channels != 1 {
            return self;
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..self
        }
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            x: 0,
            y: 0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn crop(&self, r: Rect) -> Image {
        Image::from_fn(self.channels, r.height, r.width, |c, y, x| {
            self.get(c, r.y + y, r.x + x)
        })
    }

    pub fn resize(&self, height: usize, width: usize, filter: Filter) -> Image {
        self.resample(self.full_rect(), height, width, filter)
    }

    /// Resamples the pixels of `region` onto a `height × width` grid using
    /// pixel-center alignment. Taps outside the region repeat its edge, so the
    /// result equals cropping first and resizing the crop.
    pub fn resample(&self, region: Rect, height: usize, width: usize, filter: Filter) -> Image {
        if region.width == width && region.height == height {
            return self.crop(region);
        }
        let cols = taps(region.x, region.width, width, filter);
        let rows = taps(region.y, region.height, height, filter);
        let mut tmp = vec![0.0; region.height * width];
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for c in 0..self.channels {
            for y in 0..region.height {
                let src = &self.plane(c)[(region.y + y) * self.width..][..self.width];
                for (x, t) in cols.iter().enumerate() {
                    tmp[y * width + x] = t.iter().map(|&(i, w)| w * src[i]).sum();
                }
            }
            let dst = out.plane_mut(c);
            for (y, t) in rows.iter().enumerate() {
                for x in 0..width {
                    dst[y * width + x] = t.iter().map(|&(i, w)| w * tmp[(i - region.y) * width + x]).sum();
                }
            }
        }
        out
    }

    /// Decodes PNG/JPEG bytes into `[0, 1]` intensities. Grayscale stays one
    /// channel; alpha is dropped.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let mut reader = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Data(format!("cannot sniff image format: {e}")))?;
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_SIDE);
        limits.max_image_height = Some(MAX_SIDE);
        limits.max_alloc = Some(MAX_DECODE_BYTES);
        reader.limits(limits);
        let dynimg = reader
            .decode()
            .map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::Data("image has zero area".into()));
        }
        let wide = dynimg.color().bytes_per_pixel() / dynimg.color().channel_count() > 1;
        let channels = if dynimg.color().has_color() { 3 } else { 1 };
        let raw: Vec<f64> = match (channels, wide) {
            (3, false) => dynimg.to_rgb8().as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
            (3, true) => dynimg.to_rgb16().as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            (_, false) => dynimg.to_luma8().as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
            (_, true) => dynimg
                .to_luma16()
                .as_raw()
                .iter()
                .map(|&v| v as f64 / 65535.0)
                .collect(),
        };
        Ok(Image::from_fn(channels, h, w, |c, y, x| {
            raw[(y * w + x) * channels + c]
        }))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// 8-bit RGB (or gray) buffer, clamping to `[0, 1]`.
    pub fn to_bytes_u8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::Domain(format!("cannot write {n}-channel PNG"))),
        };
        image::save_buffer(path, &self.to_bytes_u8(), self.width as u32, self.height as u32, color).map_err(|e| match e
        {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other}", path.display())),
        })
    }
}

fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for each output coordinate along one axis.
fn taps(start: usize, len: usize, out: usize, filter: Filter) -> Vec<Vec<(usize, f64)>> {
    let scale = len as f64 / out as f64;
    let last = (len - 1) as isize;
    let clamp = |i: isize| start + i.clamp(0, last) as usize;
    (0..out)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let b = base as isize;
            match filter {
                Filter::Bilinear => vec![(clamp(b), 1.0 - frac), (clamp(b + 1), frac)],
                Filter::Bicubic => (-1..=2).map(|k| (clamp(b + k), cubic(frac - k as f64))).collect(),
            }
        })
        .collect()
}
