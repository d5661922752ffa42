use serde::{Deserialize, Serialize};

use super::config::{ImageSize, ModelConfig};
use crate::error::{Error, Result};

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: ImageSize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(size: ImageSize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size.numel() {
            return Err(Error::Dimension(format!(
                "image {}x{}x{} needs {} values, got {}",
                size.height,
                size.width,
                size.channels,
                size.numel(),
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: ImageSize) -> Self {
        Self {
            size,
            data: vec![0.0; size.numel()],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.size.channels;
        let start = (row * self.size.width + col) * c;
        &self.data[start..start + c]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let c = self.size.channels;
        let start = (row * self.size.width + col) * c;
        &mut self.data[start..start + c]
    }
}

/// Splits an image into the config's patch grid, one flattened patch per row
/// (`[n_visual_tokens × patch_dim]`, patches in raster order, pixels row-major).
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if image.size != cfg.image_size {
        return Err(Error::Dimension(format!(
            "image is {:?}, model expects {:?}",
            image.size, cfg.image_size
        )));
    }
    let g = cfg.patch_grid();
    let (ph, pw) = (cfg.patch_height(), cfg.patch_width());
    let mut out = Vec::with_capacity(cfg.n_visual_tokens * cfg.patch_dim());
    for gr in 0..g {
        for gc in 0..g {
            for dy in 0..ph {
                for dx in 0..pw {
                    out.extend_from_slice(image.pixel(gr * ph + dy, gc * pw + dx));
                }
            }
        }
    }
    Ok(out)
}
