//! In-memory rasters: RGB images with channel values in `[0, 1]` and binary
//! masks. Pixel `(x, y)` is column `x`, row `y`; the pixel's center sits at
//! integer coordinates.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Interleaved RGB raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raw buffer of {} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[f32] {
        &self.data
    }

    pub fn as_raw_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous coordinates; `fill` outside the canvas.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: Rgb) -> Rgb {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut out = [0f32; 3];
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for (tx, ty, w) in taps {
            if w == 0.0 {
                continue;
            }
            let c = if tx >= 0 && ty >= 0 && (tx as usize) < self.width && (ty as usize) < self.height
            {
                self.get(tx as usize, ty as usize)
            } else {
                fill
            };
            for k in 0..3 {
                out[k] += w * c[k];
            }
        }
        out
    }

    /// Area-averaging / bilinear resize used when the working resolution
    /// differs from the reference resolution.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let cx = src_x.clamp(0.0, (self.width - 1) as f64);
                let cy = src_y.clamp(0.0, (self.height - 1) as f64);
                out.set(x, y, self.sample_bilinear(cx, cy, [0.0; 3]));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::image("<memory>", e))?;
        Ok(buf.into_inner())
    }

    /// Planar `[3, H, W]` buffer with values mapped to `[-1, 1]`.
    pub fn to_planar_signed(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// `[3, H, W]` tensor with values in `[-1, 1]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.to_planar_signed(), (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`] for a `[3, H, W]` tensor in `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let planar: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for i in 0..plane {
            for ch in 0..3 {
                data[i * 3 + ch] = ((planar[ch * plane + i] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Binary raster; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Build from arbitrary bytes; any non-zero value becomes 1.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raw buffer of {} values for a {width}x{height} mask",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Nearest-neighbour resize; keeps the mask binary.
    pub fn resize(&self, width: usize, height: usize) -> Mask {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Mask::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    /// Load an 8-bit grayscale PNG, thresholding at 128.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
        let data = img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_luma8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::image("<memory>", e))?;
        Ok(buf.into_inner())
    }

    /// `[1, H, W]` tensor with values in `{0, 1}`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Threshold a `[1, H, W]` logit tensor at probability 0.5 (logit 0).
    pub fn from_logits(t: &Tensor) -> Result<Self> {
        let (_, h, w) = t.dims3()?;
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Self {
            width: w,
            height: h,
            data: v.into_iter().map(|l| u8::from(l > 0.0)).collect(),
        })
    }
}
