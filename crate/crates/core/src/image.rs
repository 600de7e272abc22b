//! Interleaved RGB float images with 8-bit file I/O.

use std::path::Path;

use ::image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::PixelGrid;

/// RGB image with channel values nominally in `[0, 1]`, row-major,
/// channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "buffer of {} values does not hold a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid { height: self.height, width: self.width }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma (BT.601 weights), one value per pixel.
    pub fn to_gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn map_pixels(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Image {
        let mut out = self.clone();
        for p in out.data.chunks_exact_mut(3) {
            let v = f([p[0], p[1], p[2]]);
            p.copy_from_slice(&v);
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.to_bytes();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    /// 8-bit quantization (round to nearest, clamped).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|b| f32::from(*b) / 255.0).collect();
        Image { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// Round-trip through 8 bits, which is what every file on disk holds.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| f32::from(quantize(*v)) / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|source| match source {
            ::image::ImageError::IoError(e) => Error::io(path, e),
            other => Error::Codec { path: path.to_path_buf(), source: other },
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Saves as PNG, or baseline JPEG at quality 95 when the extension is
    /// `.jpg`/`.jpeg`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if ext == "jpg" || ext == "jpeg" {
            let bytes = encode_jpeg(self, 95)?;
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        } else {
            self.to_rgb8()
                .save_with_format(path, ImageFormat::Png)
                .map_err(|source| Error::Codec { path: path.to_path_buf(), source })
        }
    }

    /// SHA-256 of the 8-bit pixel buffer and dimensions.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(self.to_bytes());
        hex::encode(h.finalize())
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = ::image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    enc.encode(&img.to_bytes(), img.width as u32, img.height as u32, ::image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Codec { path: "<memory>".into(), source })?;
    Ok(out)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<Image> {
    let img = ::image::load_from_memory_with_format(bytes, ImageFormat::Jpeg)
        .map_err(|source| Error::Codec { path: "<memory>".into(), source })?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}
