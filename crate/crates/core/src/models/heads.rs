use super::config::ModelConfig;
use super::params::ParamVars;
use super::vit::{block, encode_embedded, encoder_positions, linear, norm, patch_embed, positions};
use crate::error::{Error, Result};
use crate::objectives::{masked_recon_loss, ntxent};
use crate::patch::{patchify, unpatchify, Mask, PatchGrid};
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::Volume;

/// Result of one masked-modeling forward pass on a single volume.
#[derive(Clone, Debug)]
pub struct MimOutput {
    /// `[N, C p^3]` predicted voxels for every token.
    pub pred: Var,
    /// `[N, C p^3]` ground-truth token rows.
    pub target: Tensor,
    pub loss: Var,
    pub grid: PatchGrid,
    pub encoder_len: usize,
    pub decoder_len: usize,
}

impl MimOutput {
    /// Predicted volume from the graph values.
    pub fn reconstruction(&self, g: &Graph) -> Result<Volume> {
        unpatchify(g.value(self.pred), &self.grid)
    }
}

fn tokens_for(cfg: &ModelConfig, volume: &Volume, mask: &Mask) -> Result<(Tensor, PatchGrid)> {
    if volume.channels() != cfg.vit.channels {
        return Err(Error::Config(format!(
            "model expects {} channels, volume has {}",
            cfg.vit.channels,
            volume.channels()
        )));
    }
    let (tokens, grid) = patchify(volume, cfg.vit.token_patch)?;
    if mask.total() != grid.num_tokens() {
        return Err(Error::Invalid(format!(
            "mask covers {} tokens, volume has {}",
            mask.total(),
            grid.num_tokens()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((tokens, grid))
}

/// Encoder on visible tokens only; the decoder sees every slot, with one
/// shared mask token at masked positions.
pub fn mae_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    volume: &Volume,
    mask: &Mask,
) -> Result<MimOutput> {
    let (tokens, grid) = tokens_for(cfg, volume, mask)?;
    let visible = mask.visible();
    let n = grid.num_tokens();

    let x = g.constant(tokens.gather_rows(&visible)?);
    let x = patch_embed(g, &cfg.vit, pv, x)?;
    let pos = encoder_positions(g, &cfg.vit, pv, &grid, &visible)?;
    let x = g.add(x, pos)?;
    let (latent, _) = encode_embedded(g, &cfg.vit, pv, x, &[])?;

    let d = &cfg.decoder;
    let y = linear(g, pv, "decoder.embed", latent)?;
    let y = g.scatter_rows(y, &visible, n)?;
    let ind = g.constant(mask.indicator());
    let token = pv.get("decoder.mask_token")?;
    let fill = g.mul(ind, token)?;
    let y = g.add(y, fill)?;
    let all: Vec<usize> = (0..n).collect();
    let dpos = positions(
        g,
        pv,
        d.pos_embed,
        "decoder.pos_embed",
        &grid,
        d.decoder_dim,
        &all,
    )?;
    let mut y = g.add(y, dpos)?;
    for i in 0..d.decoder_depth {
        y = block(g, pv, &format!("decoder.blocks.{i}"), y, d.decoder_heads)?;
    }
    let y = norm(g, pv, "decoder.norm", y)?;
    let pred = linear(g, pv, "decoder.pred", y)?;
    let loss = masked_recon_loss(g, pred, &tokens, mask, cfg.recon_norm)?;
    Ok(MimOutput {
        pred,
        target: tokens,
        loss,
        grid,
        encoder_len: visible.len(),
        decoder_len: n,
    })
}

/// Full-length encoder input with masked rows replaced by the mask token
/// after patch embedding, followed by a single linear head.
pub fn simmim_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    volume: &Volume,
    mask: &Mask,
) -> Result<MimOutput> {
    let (tokens, grid) = tokens_for(cfg, volume, mask)?;
    let n = grid.num_tokens();
    let x = g.constant(tokens.clone());
    let emb = patch_embed(g, &cfg.vit, pv, x)?;
    let ind = mask.indicator();
    let keep = g.constant(ind.map(|m| 1.0 - m));
    let ind = g.constant(ind);
    let token = pv.get("simmim.mask_token")?;
    let kept = g.mul(emb, keep)?;
    let fill = g.mul(ind, token)?;
    let x = g.add(kept, fill)?;
    let all: Vec<usize> = (0..n).collect();
    let pos = encoder_positions(g, &cfg.vit, pv, &grid, &all)?;
    let x = g.add(x, pos)?;
    let (latent, _) = encode_embedded(g, &cfg.vit, pv, x, &[])?;
    let pred = linear(g, pv, "simmim.head", latent)?;
    let loss = masked_recon_loss(g, pred, &tokens, mask, cfg.recon_norm)?;
    Ok(MimOutput {
        pred,
        target: tokens,
        loss,
        grid,
        encoder_len: n,
        decoder_len: n,
    })
}

/// Mean-pooled encoder feature of one full volume, `[1, E]`.
pub fn pooled_feature(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    volume: &Volume,
) -> Result<Var> {
    let (tokens, grid) = patchify(volume, cfg.vit.token_patch)?;
    let all: Vec<usize> = (0..grid.num_tokens()).collect();
    let x = g.constant(tokens);
    let x = patch_embed(g, &cfg.vit, pv, x)?;
    let pos = encoder_positions(g, &cfg.vit, pv, &grid, &all)?;
    let x = g.add(x, pos)?;
    let (latent, _) = encode_embedded(g, &cfg.vit, pv, x, &[])?;
    let pooled = g.mean_axis(latent, 0)?;
    g.reshape(pooled, &[1, cfg.vit.embed_dim])
}

/// Projection head and row-wise L2 normalization, `[n, E] -> [n, proj_dim]`.
pub fn project(g: &mut Graph, pv: &ParamVars, features: Var) -> Result<Var> {
    let h = linear(g, pv, "simclr.fc1", features)?;
    let h = g.gelu(h)?;
    let z = linear(g, pv, "simclr.fc2", h)?;
    l2_normalize(g, z)
}

pub fn l2_normalize(g: &mut Graph, z: Var) -> Result<Var> {
    let n = g.shape(z)[0];
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let tiny = g.constant(Tensor::scalar(1e-24));
    let ss = g.add(ss, tiny)?;
    let norm = g.sqrt(ss)?;
    let norm = g.reshape(norm, &[n, 1])?;
    g.div(z, norm)
}

/// NT-Xent between two augmented views of the same `B >= 2` volumes.
pub fn simclr_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    view1: &[Volume],
    view2: &[Volume],
) -> Result<Var> {
    if view1.len() != view2.len() {
        return Err(Error::Invalid(format!(
            "view batches differ in size: {} vs {}",
            view1.len(),
            view2.len()
        )));
    }
    if view1.len() < 2 {
        return Err(Error::Invalid(format!(
            "contrastive loss needs batch >= 2, got {}",
            view1.len()
        )));
    }
    let feats = view1
        .iter()
        .chain(view2)
        .map(|v| pooled_feature(g, cfg, pv, v))
        .collect::<Result<Vec<_>>>()?;
    let f = g.concat(&feats, 0)?;
    let z = project(g, pv, f)?;
    ntxent(g, z, cfg.simclr.temperature)
}
