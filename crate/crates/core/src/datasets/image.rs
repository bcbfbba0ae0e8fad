use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width x channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: &[f32]) {
        let i = self.index(y, x, 0);
        self.data[i..i + self.channels].copy_from_slice(&rgb[..self.channels]);
    }

    /// Rounds to 8-bit levels, as any byte-oriented codec would see it.
    pub fn quantize_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::from_data(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

/// Splits an image into non-overlapping `patch x patch` tiles in row-major
/// tile order. Each tile is flattened row, column, channel.
pub fn patchify_image(image: &Image, patch: usize) -> Result<Vec<Vec<f32>>> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is not divisible by patch size {patch}",
            image.height, image.width
        )));
    }
    let c = image.channels;
    let mut patches = Vec::with_capacity((image.height / patch) * (image.width / patch));
    for py in (0..image.height).step_by(patch) {
        for px in (0..image.width).step_by(patch) {
            let mut v = Vec::with_capacity(patch * patch * c);
            for y in py..py + patch {
                let start = image.index(y, px, 0);
                v.extend_from_slice(&image.data[start..start + patch * c]);
            }
            patches.push(v);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify_image`].
pub fn unpatchify_image(
    patches: &[Vec<f32>],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Image> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{height}x{width} image is not divisible by patch size {patch}"
        )));
    }
    let per_row = width / patch;
    if patches.len() != per_row * (height / patch) {
        return Err(Error::DimensionMismatch(format!(
            "{} patches for a {height}x{width} image",
            patches.len()
        )));
    }
    let mut img = Image::filled(height, width, channels, 0.0);
    for (i, p) in patches.iter().enumerate() {
        if p.len() != patch * patch * channels {
            return Err(Error::DimensionMismatch(format!("patch of length {}", p.len())));
        }
        let (py, px) = ((i / per_row) * patch, (i % per_row) * patch);
        for dy in 0..patch {
            let start = img.index(py + dy, px, 0);
            let src = &p[dy * patch * channels..(dy + 1) * patch * channels];
            img.data[start..start + patch * channels].copy_from_slice(src);
        }
    }
    Ok(img)
}
