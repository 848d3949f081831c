//! Planar float images in `[0, 1]`.

use std::path::Path;

use autograd::{Float, Tensor};

use crate::error::{Error, Result};

/// Channel-major (`C x H x W`) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
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

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snaps values onto the 8-bit grid so PNG storage is lossless.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::validation("PNG output expects 3 channels"));
        }
        let (h, w) = (self.height, self.width);
        let planar = self.to_u8();
        let mut rgb = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for i in 0..h * w {
                rgb[3 * i + c] = planar[c * h * w + i];
            }
        }
        image::save_buffer(path, &rgb, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
            Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            }
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::integrity(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let mut data = vec![0.0f32; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = raw[3 * i + c] as f32 / 255.0;
            }
        }
        Image::new(3, h, w, data)
    }
}

/// Stacks equally sized images into an `(N, C, H, W)` tensor.
pub fn stack<F: Float>(images: &[&Image]) -> Tensor<F> {
    assert!(!images.is_empty(), "stack of no images");
    let (c, h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        assert_eq!(im.dims(), (c, h, w), "stack: images differ in shape");
        data.extend(im.data().iter().map(|&v| F::c(v as f64)));
    }
    Tensor::constant(vec![images.len(), c, h, w], data)
}

/// Splits an `(N, C, H, W)` tensor back into images.
pub fn unstack<F: Float>(t: &Tensor<F>) -> Vec<Image> {
    let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|ch| Image {
            channels: c,
            height: h,
            width: w,
            data: ch.iter().map(|v| v.to_f32().unwrap()).collect(),
        })
        .collect()
}
