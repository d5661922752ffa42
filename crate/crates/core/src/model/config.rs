use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSize {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
        }
    }
}

/// Architecture of one toy VLM.
///
/// Visual tokens come from a square grid of non-overlapping patches, so
/// `n_visual_tokens` must be a perfect square whose root divides both image sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    pub vision_dim: usize,
    pub n_visual_tokens: usize,
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Default teacher: wider and deeper language model.
    pub fn teacher() -> Self {
        Self {
            image_size: ImageSize::default(),
            vision_dim: 32,
            n_visual_tokens: 4,
            lm_dim: 64,
            lm_layers: 2,
            lm_heads: 4,
            vocab_size: 64,
            max_seq_len: 12,
        }
    }

    /// Default student: same visual interface, smaller language model.
    pub fn student() -> Self {
        Self {
            lm_dim: 32,
            lm_layers: 1,
            lm_heads: 2,
            ..Self::teacher()
        }
    }

    /// Patches per image side.
    pub fn patch_grid(&self) -> usize {
        (self.n_visual_tokens as f64).sqrt().round() as usize
    }

    pub fn patch_height(&self) -> usize {
        self.image_size.height / self.patch_grid()
    }

    pub fn patch_width(&self) -> usize {
        self.image_size.width / self.patch_grid()
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_height() * self.patch_width() * self.image_size.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size.height", self.image_size.height),
            ("image_size.width", self.image_size.width),
            ("image_size.channels", self.image_size.channels),
            ("vision_dim", self.vision_dim),
            ("n_visual_tokens", self.n_visual_tokens),
            ("lm_dim", self.lm_dim),
            ("lm_layers", self.lm_layers),
            ("lm_heads", self.lm_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let g = self.patch_grid();
        if g * g != self.n_visual_tokens {
            return Err(Error::Config(format!(
                "n_visual_tokens must be a perfect square, got {}",
                self.n_visual_tokens
            )));
        }
        if self.image_size.height % g != 0 || self.image_size.width % g != 0 {
            return Err(Error::Config(format!(
                "a {g}x{g} patch grid does not tile a {}x{} image",
                self.image_size.height, self.image_size.width
            )));
        }
        if self.lm_dim % self.lm_heads != 0 {
            return Err(Error::Config(format!(
                "lm_dim {} is not divisible by lm_heads {}",
                self.lm_dim, self.lm_heads
            )));
        }
        if self.max_seq_len <= self.n_visual_tokens {
            return Err(Error::Config(
                "max_seq_len must leave room for text after the visual tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Checks that a student's visual output can be fed through the teacher's
/// projector and language model: shared visual interface and vocabulary.
pub fn check_switch_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    fn differ<T: PartialEq + std::fmt::Debug>(field: &'static str, t: T, s: T) -> Result<()> {
        if t != s {
            return Err(Error::Compatibility {
                field,
                teacher: format!("{t:?}"),
                student: format!("{s:?}"),
            });
        }
        Ok(())
    }
    differ("vocab_size", teacher.vocab_size, student.vocab_size)?;
    differ("image_size", teacher.image_size, student.image_size)?;
    differ("vision_dim", teacher.vision_dim, student.vision_dim)?;
    differ("n_visual_tokens", teacher.n_visual_tokens, student.n_visual_tokens)?;
    Ok(())
}
