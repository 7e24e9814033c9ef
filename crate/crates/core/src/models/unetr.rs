use super::config::ModelConfig;
use super::params::{level_width, tap_level, upsample_levels, ParamVars, Parameters};
use super::vit::{encode_embedded, encoder_positions, linear, patch_embed, tap_depths};
use crate::error::{Error, Result};
use crate::patch::patchify;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::Volume;

fn up(g: &mut Graph, pv: &ParamVars, name: &str, x: Var, grid: [usize; 3]) -> Result<Var> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    let y = g.transpose_conv3d(x, w, b, grid, 2)?;
    g.gelu(y)
}

/// Volume as channels-last rows `[D*H*W, C]`.
pub fn channels_last(v: &Volume) -> Tensor {
    let c = v.channels();
    let n = v.data().len() / c;
    let mut out = vec![0.0; v.data().len()];
    for ch in 0..c {
        for (i, &x) in v.channel(ch).iter().enumerate() {
            out[i * c + ch] = x;
        }
    }
    Tensor::new(vec![n, c], out).expect("consistent shape")
}

/// Segmentation logits as channels-last rows `[D*H*W, classes]`.
pub fn unetr_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    volume: &Volume,
) -> Result<Var> {
    let levels = upsample_levels(cfg.vit.token_patch)?;
    if cfg.vit.depth < 4 {
        return Err(Error::Config(format!(
            "segmentation taps 4 encoder depths but depth is {}",
            cfg.vit.depth
        )));
    }
    let (tokens, grid) = patchify(volume, cfg.vit.token_patch)?;
    let all: Vec<usize> = (0..grid.num_tokens()).collect();
    let x = g.constant(tokens);
    let x = patch_embed(g, &cfg.vit, pv, x)?;
    let pos = encoder_positions(g, &cfg.vit, pv, &grid, &all)?;
    let x = g.add(x, pos)?;
    let depths = tap_depths(cfg.vit.depth);
    let (top, taps) = encode_embedded(g, &cfg.vit, pv, x, &depths[..3])?;
    let fs = cfg.seg.feature_size;
    let grid_at = |l: usize| grid.grid.map(|gd| gd << l);

    // Skip paths, each upsampled to the level where it joins.
    let mut skips: Vec<(usize, Var)> = Vec::with_capacity(4);
    for j in 1..=3 {
        let mut s = taps[j - 1];
        for i in 1..=tap_level(j, levels) {
            s = up(g, pv, &format!("unetr.skip{j}.up{i}"), s, grid_at(i - 1))?;
        }
        skips.push((tap_level(j, levels), s));
    }
    let input = g.constant(channels_last(volume));
    let input = linear(g, pv, "unetr.input_proj", input)?;
    skips.push((levels, input));

    let mut h = top;
    for l in 1..=levels {
        h = up(g, pv, &format!("unetr.up{l}"), h, grid_at(l - 1))?;
        let mut parts = vec![h];
        parts.extend(skips.iter().filter(|(lv, _)| *lv == l).map(|(_, s)| *s));
        if parts.len() > 1 {
            let cat = g.concat(&parts, 1)?;
            let merged = linear(g, pv, &format!("unetr.merge{l}"), cat)?;
            h = g.gelu(merged)?;
        }
        debug_assert_eq!(g.shape(h)[1], level_width(fs, levels, l));
    }
    linear(g, pv, "unetr.head", h)
}

/// Per-class logits `[classes, D, H, W]` for one volume.
pub fn unetr_segment(cfg: &ModelConfig, params: &Parameters, volume: &Volume) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = params.bind_frozen(&mut g);
    let logits = unetr_logits(&mut g, cfg, &pv, volume)?;
    let [d, h, w] = volume.extents();
    let l = g.value(logits);
    let c = l.shape()[1];
    let mut out = vec![0.0; l.len()];
    for (i, row) in l.data().chunks(c).enumerate() {
        for (k, &x) in row.iter().enumerate() {
            out[k * d * h * w + i] = x;
        }
    }
    Tensor::new(vec![c, d, h, w], out)
}
