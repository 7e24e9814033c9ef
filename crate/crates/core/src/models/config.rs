use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ReconNorm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PosEmbed {
    /// Fixed 3-D sinusoidal table, valid for any grid.
    Sinusoidal,
    /// Learned table for one fixed token grid.
    Learned { grid: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub token_patch: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
    pub pos_embed: PosEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeDecoderConfig {
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub pos_embed: PosEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimclrConfig {
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Channel width at voxel resolution; doubles per level towards the tokens.
    pub feature_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub decoder: MaeDecoderConfig,
    pub simclr: SimclrConfig,
    pub seg: SegConfig,
    pub recon_norm: ReconNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the synthetic experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            vit: ViTConfig {
                embed_dim: 48,
                depth: 4,
                num_heads: 4,
                token_patch: 8,
                mlp_ratio: 4,
                channels: 1,
                pos_embed: PosEmbed::Sinusoidal,
            },
            decoder: MaeDecoderConfig {
                decoder_dim: 24,
                decoder_depth: 2,
                decoder_heads: 2,
                pos_embed: PosEmbed::Sinusoidal,
            },
            simclr: SimclrConfig {
                proj_hidden: 48,
                proj_dim: 24,
                temperature: 0.5,
            },
            seg: SegConfig {
                num_classes: 4,
                feature_size: 8,
            },
            recon_norm: ReconNorm::L1,
        }
    }

    /// ViT3D-B/16 with the 8-layer, 512-d MAE decoder. The decoder width is
    /// not a multiple of 6, so its positions are learned for the 96^3 grid.
    pub fn vit3d_base() -> Self {
        ModelConfig {
            vit: ViTConfig {
                embed_dim: 768,
                depth: 12,
                num_heads: 12,
                token_patch: 16,
                mlp_ratio: 4,
                channels: 1,
                pos_embed: PosEmbed::Sinusoidal,
            },
            decoder: MaeDecoderConfig {
                decoder_dim: 512,
                decoder_depth: 8,
                decoder_heads: 16,
                pos_embed: PosEmbed::Learned { grid: [6, 6, 6] },
            },
            simclr: SimclrConfig {
                proj_hidden: 768,
                proj_dim: 128,
                temperature: 0.5,
            },
            seg: SegConfig {
                num_classes: 14,
                feature_size: 16,
            },
            recon_norm: ReconNorm::L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        let bad = |m: String| Err(Error::Config(m));
        if v.embed_dim == 0 || v.num_heads == 0 || !v.embed_dim.is_multiple_of(v.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                v.embed_dim, v.num_heads
            ));
        }
        if v.token_patch == 0 || v.channels == 0 || v.mlp_ratio == 0 {
            return bad("token_patch, channels and mlp_ratio must be positive".into());
        }
        check_pos(v.pos_embed, v.embed_dim, "encoder")?;
        let d = &self.decoder;
        if d.decoder_dim == 0
            || d.decoder_heads == 0
            || !d.decoder_dim.is_multiple_of(d.decoder_heads)
        {
            return bad(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                d.decoder_dim, d.decoder_heads
            ));
        }
        check_pos(d.pos_embed, d.decoder_dim, "decoder")?;
        if self.simclr.temperature <= 0.0
            || self.simclr.proj_dim == 0
            || self.simclr.proj_hidden == 0
        {
            return bad("simclr head sizes and temperature must be positive".into());
        }
        if self.seg.num_classes < 2 || self.seg.feature_size == 0 {
            return bad("segmentation needs >= 2 classes and a positive feature size".into());
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.vit.channels * self.vit.token_patch.pow(3)
    }
}

fn check_pos(pos: PosEmbed, dim: usize, what: &str) -> Result<()> {
    match pos {
        PosEmbed::Sinusoidal if !dim.is_multiple_of(6) => Err(Error::Config(format!(
            "{what} width {dim} must be a multiple of 6 for sinusoidal positions"
        ))),
        PosEmbed::Learned { grid } if grid.contains(&0) => Err(Error::Config(format!(
            "{what} learned position grid {grid:?} is empty"
        ))),
        _ => Ok(()),
    }
}
