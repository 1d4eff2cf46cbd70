//! Grayscale images in `[0, 1]` (0 black, 1 white) and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Value with out-of-range coordinates reading as `fill`.
    pub fn get_or(&self, x: isize, y: isize, fill: f32) -> f32 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            fill
        } else {
            self.get(x as usize, y as usize)
        }
    }

    /// Bilinear resampling with half-pixel centres; edges clamp.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut out = GrayImage::filled(width, height, 0.0);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.set(x, y, top * (1.0 - fy) + bot * fy);
            }
        }
        out
    }

    /// Aspect-preserving resize to `height` rows (width at least 1).
    pub fn resize_to_height(&self, height: usize) -> GrayImage {
        let w = ((self.width as f64 * height as f64 / self.height as f64).round() as usize).max(1);
        self.resize(w, height)
    }

    /// Quantised to 8 bits, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_u8()).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    /// Reads any 8- or 16-bit PNG, converting colour to luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
        let mut reader = dec.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let gray: Vec<f32> = bytes
            .chunks_exact(channels)
            .take(w * h)
            .map(|px| {
                let v = match channels {
                    1 | 2 => px[0] as f32,
                    _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
                };
                v / 255.0
            })
            .collect();
        Self::from_data(w, h, gray)
    }
}
