//! ViT3D encoder, masked-modeling heads, contrastive head and the
//! segmentation decoder.

mod checkpoint;
mod config;
mod heads;
mod params;
mod unetr;
mod vit;

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC};
pub use config::{MaeDecoderConfig, ModelConfig, PosEmbed, SegConfig, SimclrConfig, ViTConfig};
pub use heads::{
    l2_normalize, mae_forward, pooled_feature, project, simclr_forward, simmim_forward, MimOutput,
};
pub use params::{Method, ParamVars, Parameters};
pub use unetr::{channels_last, unetr_logits, unetr_segment};
pub use vit::{encode, encode_embedded, encode_tensor, encoder_positions, patch_embed, tap_depths};

use crate::error::{Error, Result};
use crate::patch::Mask;
use crate::tensor::Graph;
use crate::volume::Volume;

/// Masked-modeling forward for `method` (MAE or SimMIM).
pub fn mim_forward(
    g: &mut Graph,
    method: Method,
    cfg: &ModelConfig,
    pv: &ParamVars,
    volume: &Volume,
    mask: &Mask,
) -> Result<MimOutput> {
    match method {
        Method::Mae => mae_forward(g, cfg, pv, volume, mask),
        Method::Simmim => simmim_forward(g, cfg, pv, volume, mask),
        other => Err(Error::Config(format!(
            "{} is not a masked image modeling method",
            other.name()
        ))),
    }
}
