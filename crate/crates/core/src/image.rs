//! `ImagePlane`: the H×W×C intensity array every module trades in.
//!
//! Values live in `[0, 1]`. Planes read from 8-bit PNG hold exact multiples
//! of `1/255`, so writing them back is lossless.

use std::io::Cursor;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid image dimensions {width}x{height}x{channels}")]
    InvalidDims {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("pixel buffer length {got} does not match {width}x{height}x{channels}")]
    BufferLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("region {x},{y} {w}x{h} outside {width}x{height} image")]
    Region {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
}

/// Row-major, channel-interleaved intensity plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self, ImageError> {
        check_dims(width, height, channels)?;
        let value = value.clamp(0.0, 1.0);
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds a plane from a per-pixel generator `f(x, y, c)`; values are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        check_dims(width, height, channels)?;
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Wraps an existing buffer. Every value must be finite and inside `[0, 1]`.
    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        check_dims(width, height, channels)?;
        if data.len() != width * height * channels {
            return Err(ImageError::BufferLength {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(ImageError::OutOfRange { index, value });
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.offset(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        let o = self.offset(x, y) + c;
        self.data[o] = value.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = self.offset(x, y);
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Copies out the `w`×`h` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImagePlane, ImageError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(ImageError::Region {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = self.offset(x, row);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImagePlane {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Result<ImagePlane, ImageError> {
        check_dims(new_w, new_h, self.channels)?;
        if new_w == self.width && new_h == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let c = self.channels;
        let mut out = vec![0.0f32; new_w * new_h * c];
        for oy in 0..new_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..new_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let o = (oy * new_w + ox) * c;
                for ch in 0..c {
                    let p00 = self.get(x0, y0, ch) as f64;
                    let p10 = self.get(x1, y0, ch) as f64;
                    let p01 = self.get(x0, y1, ch) as f64;
                    let p11 = self.get(x1, y1, ch) as f64;
                    let top = p00 + (p10 - p00) * tx;
                    let bottom = p01 + (p11 - p01) * tx;
                    out[o + ch] = (top + (bottom - top) * ty).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(ImagePlane {
            width: new_w,
            height: new_h,
            channels: c,
            data: out,
        })
    }

    /// Nearest-neighbour resampling; preserves the value set of the input exactly.
    pub fn resize_nearest(&self, new_w: usize, new_h: usize) -> Result<ImagePlane, ImageError> {
        check_dims(new_w, new_h, self.channels)?;
        let c = self.channels;
        let mut out = Vec::with_capacity(new_w * new_h * c);
        for oy in 0..new_h {
            let sy = nearest_index(oy, new_h, self.height);
            for ox in 0..new_w {
                let sx = nearest_index(ox, new_w, self.width);
                out.extend_from_slice(self.pixel(sx, sy));
            }
        }
        Ok(ImagePlane {
            width: new_w,
            height: new_h,
            channels: c,
            data: out,
        })
    }

    /// Replicates a single channel to three, or returns a clone if already RGB.
    pub fn to_rgb(&self) -> ImagePlane {
        match self.channels {
            3 => self.clone(),
            _ => {
                let mut data = Vec::with_capacity(self.width * self.height * 3);
                for px in self.data.chunks(self.channels) {
                    let v = px[0];
                    data.extend_from_slice(&[v, v, v]);
                }
                ImagePlane {
                    width: self.width,
                    height: self.height,
                    channels: 3,
                    data,
                }
            }
        }
    }

    /// Single-channel plane holding the mean of the RGB channels.
    pub fn to_luma(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// RGB or luma copy with the requested channel count (1 or 3).
    pub fn with_channels(&self, channels: usize) -> ImagePlane {
        if channels == 1 {
            self.to_rgb().to_luma()
        } else {
            self.to_rgb()
        }
    }

    pub fn mse(&self, other: &ImagePlane) -> Option<f64> {
        if !self.same_shape(other) {
            return None;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Some(sum / self.data.len() as f64)
    }

    /// 8-bit quantization used for PNG output and content digests.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<ImagePlane, ImageError> {
        check_dims(width, height, channels)?;
        if bytes.len() != width * height * channels {
            return Err(ImageError::BufferLength {
                width,
                height,
                channels,
                got: bytes.len(),
            });
        }
        Ok(ImagePlane {
            width,
            height,
            channels,
            data: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        })
    }

    /// Hex SHA-256 over the dimensions and the 8-bit raster. Two planes that
    /// encode to the same PNG pixels share a digest regardless of file encoding.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{}x{}x{};", self.width, self.height, self.channels).as_bytes());
        hasher.update(self.to_u8());
        hex::encode(hasher.finalize())
    }

    pub fn decode(bytes: &[u8]) -> Result<ImagePlane, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .or_else(|_| image::load_from_memory(bytes))
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImagePlane::from_u8(w as usize, h as usize, 3, rgb.as_raw())
    }

    pub fn load(path: &Path) -> Result<ImagePlane, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ImagePlane::decode(&bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            _ => {
                return Err(ImageError::InvalidDims {
                    width: self.width,
                    height: self.height,
                    channels: self.channels,
                })
            }
        };
        let mut buf = Cursor::new(Vec::new());
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut buf),
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }

    /// Writes a PNG via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        crate::fsutil::write_atomic(path, &bytes).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn nearest_index(out_idx: usize, out_len: usize, in_len: usize) -> usize {
    let src = ((out_idx as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

fn check_dims(width: usize, height: usize, channels: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(ImageError::InvalidDims {
            width,
            height,
            channels,
        });
    }
    Ok(())
}
