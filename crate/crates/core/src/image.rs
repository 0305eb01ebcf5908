//! Float RGB images, their on-disk formats, and PSNR.
//!
//! Two formats are written:
//! - binary PPM (`P6`, 8-bit) for viewing;
//! - VQIM: `"VQIM"`, `u32` width, `u32` height (little-endian), then the
//!   R, G and B planes as little-endian `f32`, row-major. Lossless.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<f32>,
}

impl Image {
    pub fn from_rgb(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer size");
        Image {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image::from_rgb(width, height, data)
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

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn to_vqim(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(b"VQIM");
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for c in 0..3 {
            for px in self.data.chunks_exact(3) {
                out.extend_from_slice(&px[c].to_le_bytes());
            }
        }
        out
    }

    pub fn from_vqim(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated("VQIM header"));
        }
        if &bytes[..4] != b"VQIM" {
            return Err(Error::BadMagic { expected: "VQIM" });
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = w * h;
        if bytes.len() != 12 + n * 12 {
            return Err(Error::Truncated("VQIM planes"));
        }
        let mut data = vec![0f32; n * 3];
        let body = &bytes[12..];
        for c in 0..3 {
            for i in 0..n {
                let o = (c * n + i) * 4;
                data[i * 3 + c] = f32::from_le_bytes(body[o..o + 4].try_into().unwrap());
            }
        }
        Ok(Image::from_rgb(w, h, data))
    }

    pub fn write_vqim(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_vqim())?;
        Ok(())
    }

    pub fn read_vqim(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Image::from_vqim(&buf)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument("image sizes differ".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `-10 log10(mse)` for signals in [0, 1], capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR of the pooled MSE over several image pairs.
pub fn mean_psnr(pairs: &[(&Image, &Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images to compare".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += mse(a, b)?;
    }
    Ok(psnr_from_mse(total / pairs.len() as f64))
}
