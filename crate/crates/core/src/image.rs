//! 8-bit image buffers, luminance conversion and PNG/PPM IO.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer as RawBuffer, Luma};

use crate::error::{invalid, Error, Result};

/// Row-major, channel-interleaved 8-bit image with one or three channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("image dimensions must be >= 1, got {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(format!(
                "unsupported channel count {channels} (expected 1 or 3)"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(invalid(format!(
                "data length {} does not match {width}x{height}x{channels} = {expected}",
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

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    /// Single-channel image filled with `value`.
    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::gray(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::gray(width, height, data)
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

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sample at (x, y) of a single-channel image.
    #[inline]
    pub fn luma_at(&self, x: usize, y: usize) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    /// Reads a PNG or PPM/PGM file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.into_rgb8();
            Self {
                width,
                height,
                channels: 3,
                data: rgb.into_raw(),
            }
        } else {
            // 16-bit gray inputs are reduced to 8 bits here.
            let gray = img.into_luma8();
            Self {
                width,
                height,
                channels: 1,
                data: gray.into_raw(),
            }
        }
    }

    /// Writes the image as PNG (format picked from the extension).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            image::save_buffer(path, &self.data, w, h, image::ExtendedColorType::L8)
        } else {
            image::save_buffer(path, &self.data, w, h, image::ExtendedColorType::Rgb8)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// BT.601 luma: round(0.299 R + 0.587 G + 0.114 B). Single-channel input is returned unchanged.
pub fn to_luminance(img: &ImageBuffer) -> Result<ImageBuffer> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|px| {
                    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                    y.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            ImageBuffer::gray(img.width, img.height, data)
        }
        c => Err(invalid(format!("unsupported channel count {c}"))),
    }
}

/// Writes a 16-bit grayscale PNG from row-major samples.
pub fn save_gray16(path: &Path, width: usize, height: usize, samples: Vec<u16>) -> Result<()> {
    let buf: RawBuffer<Luma<u16>, Vec<u16>> = RawBuffer::from_raw(width as u32, height as u32, samples)
        .ok_or_else(|| invalid("16-bit buffer size mismatch"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit grayscale PNG from row-major samples.
pub fn save_gray8(path: &Path, width: usize, height: usize, samples: Vec<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, samples)
        .ok_or_else(|| invalid("8-bit buffer size mismatch"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
