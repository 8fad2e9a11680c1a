use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which input streams reach the network; the other is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputModality {
    #[default]
    Both,
    Audio,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Shared embedding width `D`.
    pub embed_dim: usize,
    /// `L_s`
    pub unimodal_blocks: usize,
    /// `L_c`
    pub pyramid_levels: usize,
    pub heads: usize,
    pub classes: usize,
    /// `C′`
    pub hidden_classes: usize,
    /// `H`
    pub dependency_dim: usize,
    pub dependency_heads: usize,
    pub ffn_ratio: usize,
    /// Width of the hidden head layers; `None` means `embed_dim`.
    pub head_dim: Option<usize>,
    pub max_len: usize,
    pub use_positional: bool,
    pub use_dependency: bool,
    pub simultaneous_branch: bool,
    pub consecutive_branch: bool,
    pub class_aware_regression: bool,
    /// Stride 2 between pyramid levels; off keeps every level at full length.
    pub temporal_downsampling: bool,
    pub modality: InputModality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_dim: 128,
            visual_dim: 2048,
            embed_dim: 512,
            unimodal_blocks: 2,
            pyramid_levels: 6,
            heads: 4,
            classes: 100,
            hidden_classes: 100,
            dependency_dim: 128,
            dependency_heads: 4,
            ffn_ratio: 4,
            head_dim: None,
            max_len: 224,
            use_positional: true,
            use_dependency: true,
            simultaneous_branch: true,
            consecutive_branch: true,
            class_aware_regression: true,
            temporal_downsampling: true,
            modality: InputModality::Both,
        }
    }
}

pub const KERNEL: usize = 3;

impl ModelConfig {
    /// Smallest configuration exercising every module, used for gradient
    /// checks: T = 8, D = 8, C = 3, L_s = 1, L_c = 2, C′ = 2, H = 4.
    pub fn tiny() -> Self {
        ModelConfig {
            audio_dim: 4,
            visual_dim: 5,
            embed_dim: 8,
            unimodal_blocks: 1,
            pyramid_levels: 2,
            heads: 4,
            classes: 3,
            hidden_classes: 2,
            dependency_dim: 4,
            dependency_heads: 4,
            ffn_ratio: 2,
            max_len: 8,
            ..Default::default()
        }
    }

    /// Desk-scale configuration for the synthetic corpus: D = 64, L_s = 1,
    /// L_c = 4, C′ = 8, H = 16, T = 64, 16-dimensional streams, 6 classes.
    pub fn small() -> Self {
        ModelConfig {
            audio_dim: 16,
            visual_dim: 16,
            embed_dim: 64,
            unimodal_blocks: 1,
            pyramid_levels: 4,
            classes: 6,
            hidden_classes: 8,
            dependency_dim: 16,
            max_len: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| {
            Err(Error::Config {
                field: field.to_owned(),
                detail,
            })
        };
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim", format!("{} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels", "at least one level is required".into());
        }
        if self.hidden_classes == 0 {
            return bad("hidden_classes", "must be at least 1".into());
        }
        if self.dependency_dim == 0 || self.dependency_heads == 0 || self.dependency_dim % self.dependency_heads != 0 {
            return bad(
                "dependency_dim",
                format!("{} is not divisible by {} heads", self.dependency_dim, self.dependency_heads),
            );
        }
        for (field, v) in [
            ("classes", self.classes),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("ffn_ratio", self.ffn_ratio),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.head_dim == Some(0) {
            return bad("head_dim", "must be positive".into());
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.head_dim.unwrap_or(self.embed_dim)
    }

    pub fn level_stride(&self, level: usize) -> usize {
        if level == 0 || !self.temporal_downsampling {
            1
        } else {
            2
        }
    }

    /// Step length of each level in base steps.
    pub fn level_scale(&self, level: usize) -> usize {
        (1..=level).map(|l| self.level_stride(l)).product()
    }

    /// Sequence length of every pyramid level for an input of `len` steps.
    pub fn level_lengths(&self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.pyramid_levels);
        let mut cur = len;
        for l in 0..self.pyramid_levels {
            cur = cur.div_ceil(self.level_stride(l));
            out.push(cur);
        }
        out
    }

    /// Output channels of the last regression layer.
    pub fn regression_channels(&self) -> usize {
        if self.class_aware_regression {
            2 * self.classes
        } else {
            2
        }
    }
}
