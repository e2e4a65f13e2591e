//! Square grayscale images with intensities in `[0, 1]`.

use std::path::Path;

use ::image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::Shape {
                expected: format!("{side}x{side}"),
                got: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Bounds(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self { side, pixels: vec![value.clamp(0.0, 1.0); side * side] }
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`.
    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                pixels.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.side + x]
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.side + x] = v.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.side != other.side {
            return Err(Error::Shape {
                expected: format!("{0}x{0}", self.side),
                got: format!("{0}x{0}", other.side),
            });
        }
        Ok(())
    }

    /// Nearest 8-bit level; round-tripping through PNG loses at most 1/510.
    pub fn quantize(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_gray8(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let side = self.side as u32;
        let img = GrayImage::from_raw(side, side, self.quantize()).expect("buffer matches dimensions");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_luma8();
        if img.width() != img.height() {
            return Err(Error::Shape {
                expected: "square image".into(),
                got: format!("{}x{}", img.width(), img.height()),
            });
        }
        Self::from_gray8(img.width() as usize, img.as_raw())
    }

    /// Area-resamples to `side`×`side` (used when ingesting external corpora).
    pub fn resized(&self, side: usize) -> Self {
        if side == self.side {
            return self.clone();
        }
        let img = GrayImage::from_fn(self.side as u32, self.side as u32, |x, y| {
            Luma([(self.get(y as usize, x as usize) * 255.0).round() as u8])
        });
        let out = ::image::imageops::resize(&img, side as u32, side as u32, ::image::imageops::FilterType::Triangle);
        Self::from_gray8(side, out.as_raw()).expect("resize keeps dimensions")
    }

    pub fn to_tensor(images: &[&Image]) -> Tensor<f32> {
        let side = images.first().map_or(0, |i| i.side);
        let mut data = Vec::with_capacity(images.len() * side * side);
        for img in images {
            assert_eq!(img.side, side, "mixed image sizes in one batch");
            data.extend_from_slice(&img.pixels);
        }
        Tensor::new([images.len(), 1, side, side], data)
    }

    /// Splits a `[n, 1, s, s]` tensor back into images, clamping into range.
    pub fn from_tensor(t: &Tensor<f32>) -> Vec<Image> {
        let [n, c, h, w] = t.shape();
        assert!(c == 1 && h == w, "expected single-channel square tensor");
        (0..n)
            .map(|i| Image { side: h, pixels: t.item(i).iter().map(|v| v.clamp(0.0, 1.0)).collect() })
            .collect()
    }
}
