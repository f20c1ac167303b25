//! Float RGB images and their PPM/PNG encodings.

use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

/// Planar RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]`, row-major.
    pub data: Vec<f32>,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect();
        Self { width, height, data }
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        (0..plane).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| to_byte(self.data[c * plane + i])).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let plane = width * height;
        if bytes.len() != 3 * plane {
            return Err(Error::Dimension(format!("{} bytes for a {width}x{height} RGB image", bytes.len())));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[3 * i + c] as f32 / 255.0;
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Binary (P6) 8-bit PPM.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            ExtendedColorType::Rgb8,
            ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Writes PPM or PNG depending on the extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        match path.as_ref().extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            _ => self.write_ppm(path),
        }
    }

    /// Reads any supported format (PPM, PNG, JPEG).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Scales the shorter edge to `size`, then crops the centre square.
    pub fn resize_center_crop(&self, size: usize) -> Result<Self> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
        let short = self.width.min(self.height) as f64;
        let scale = size as f64 / short;
        let nw = ((self.width as f64 * scale).round() as u32).max(size as u32);
        let nh = ((self.height as f64 * scale).round() as u32).max(size as u32);
        let resized = image::imageops::resize(&buf, nw, nh, image::imageops::FilterType::Triangle);
        let x0 = (nw - size as u32) / 2;
        let y0 = (nh - size as u32) / 2;
        let crop = image::imageops::crop_imm(&resized, x0, y0, size as u32, size as u32).to_image();
        Self::from_rgb8(size, size, crop.as_raw())
    }
}

/// Grayscale map in `[0, 1]` as binary PGM or PNG (by extension).
pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => image::save_buffer_with_format(path, &bytes, width as u32, height as u32, ExtendedColorType::L8, ImageFormat::Png)?,
        _ => {
            let file = BufWriter::new(std::fs::File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&bytes, width as u32, height as u32, ExtendedColorType::L8)?
        }
    }
    Ok(())
}

/// Stacks images into `[B, 3, H, W]` scaled to `[-1, 1]`.
pub fn images_to_tensor(images: &[&Image], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Domain("no images to stack".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Dimension(format!("mixed image sizes {w}x{h} and {}x{}", img.width, img.height)));
        }
        data.extend(img.data.iter().map(|&v| 2.0 * v - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`], clamping to `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks_exact(3 * h * w)
        .take(b)
        .map(|chunk| Image { width: w, height: h, data: chunk.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect() })
        .collect())
}

/// Tiles images into a grid with `cols` columns.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::Domain("empty grid".into()))?;
    let (w, h) = (first.width, first.height);
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (w * cols, h * rows);
    let mut data = vec![0.0; 3 * gw * gh];
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * w, (k / cols) * h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * gw * gh + (oy + y) * gw + ox + x] = img.data[c * w * h + y * w + x];
                }
            }
        }
    }
    Ok(Image { width: gw, height: gh, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| (i * 4 % 256) as f32 / 255.0).collect();
        let img = Image::new(5, 4, data).unwrap();
        let p = dir.path().join("x.ppm");
        img.write_ppm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(Image::read(&p).unwrap(), img);
        let q = dir.path().join("x.png");
        img.write_png(&q).unwrap();
        assert_eq!(Image::read(&q).unwrap(), img);
    }

    #[test]
    fn center_crop_of_wide_image_keeps_full_height() {
        // 8x4 image whose left and right quarters are red, middle green
        let mut img = Image::constant(8, 4, [0.0, 1.0, 0.0]);
        for y in 0..4 {
            for x in [0, 1, 6, 7] {
                img.data[y * 8 + x] = 1.0;
                img.data[32 + y * 8 + x] = 0.0;
            }
        }
        let out = img.resize_center_crop(4).unwrap();
        assert_eq!((out.width, out.height), (4, 4));
        // the crop is the green centre spanning every row
        for y in 0..4 {
            assert!(out.data[16 + y * 4 + 1] > 0.9 && out.data[y * 4 + 1] < 0.1);
        }
    }
}
