//! Images, normalization, split manifests and the synthetic toy dataset.

mod manifest;
mod synthetic;

pub use manifest::{DatasetManifest, ItemRef, LoadedSplit, Split, SplitSpec};
pub use synthetic::{generate_synthetic, nearest_centroid_accuracy, ClassLatent, SyntheticSpec};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved RGB image, row-major `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "image buffer holds {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
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

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
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

    /// Quantize `[0, 1]` values to 8-bit RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

impl Normalization {
    pub fn normalize(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for px in out.data.chunks_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for px in out.data.chunks_mut(3) {
            for c in 0..3 {
                px[c] = px[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }

    /// Normalize a batch of equally-sized images into a `[B, H, W, 3]` tensor.
    pub fn batch<F: Real>(&self, images: &[&Image]) -> Result<Tensor<F>> {
        let Some(first) = images.first() else {
            return Err(Error::Input("empty image batch".into()));
        };
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h * 3);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::Input(format!(
                    "mixed image sizes in batch: {}x{} vs {}x{}",
                    img.width, img.height, w, h
                )));
            }
            for px in img.data.chunks(3) {
                for c in 0..3 {
                    data.push(F::from_f64(((px[c] - self.mean[c]) / self.std[c]) as f64));
                }
            }
        }
        Ok(Tensor::from_vec(&[images.len(), h, w, 3], data))
    }
}
