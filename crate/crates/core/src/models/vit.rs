use super::config::{PosEmbed, ViTConfig};
use super::params::ParamVars;
use crate::error::{Error, Result};
use crate::patch::{positional_encoding, PatchGrid};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) fn linear(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn norm(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = pv.get(&format!("{name}.weight"))?;
    let b = pv.get(&format!("{name}.bias"))?;
    g.layernorm(x, Some((w, b)))
}

fn attention(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let [n, e] = [g.shape(x)[0], g.shape(x)[1]];
    let dh = e / heads;
    let qkv = linear(g, pv, &format!("{prefix}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[n, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[1, 2, 0, 3])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = g.slice(qkv, 0, i, i + 1)?;
        *part = g.reshape(s, &[heads, n, dh])?;
    }
    let [q, k, v] = parts;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[1, 0, 2])?;
    let out = g.reshape(out, &[n, e])?;
    linear(g, pv, &format!("{prefix}.proj"), out)
}

/// Pre-norm transformer block: attention and MLP, each with a residual.
pub(crate) fn block(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = norm(g, pv, &format!("{prefix}.norm1"), x)?;
    let h = attention(g, pv, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, h)?;
    let h = norm(g, pv, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, pv, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, pv, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Position rows for tokens `rows` of `grid` at width `dim`.
pub(crate) fn positions(
    g: &mut Graph,
    pv: &ParamVars,
    pos: PosEmbed,
    table_name: &str,
    grid: &PatchGrid,
    dim: usize,
    rows: &[usize],
) -> Result<Var> {
    match pos {
        PosEmbed::Sinusoidal => {
            let table = positional_encoding(grid, dim)?;
            Ok(g.constant(table.gather_rows(rows)?))
        }
        PosEmbed::Learned { grid: learned } => {
            if learned != grid.grid {
                return Err(Error::Config(format!(
                    "learned positions cover token grid {learned:?}, input has {:?}",
                    grid.grid
                )));
            }
            let table = pv.get(table_name)?;
            g.gather_rows(table, rows)
        }
    }
}

/// Encoder positions for the given token rows.
pub fn encoder_positions(
    g: &mut Graph,
    cfg: &ViTConfig,
    pv: &ParamVars,
    grid: &PatchGrid,
    rows: &[usize],
) -> Result<Var> {
    positions(
        g,
        pv,
        cfg.pos_embed,
        "encoder.pos_embed",
        grid,
        cfg.embed_dim,
        rows,
    )
}

/// Linear patch embedding of `[n, C p^3]` token rows.
pub fn patch_embed(g: &mut Graph, cfg: &ViTConfig, pv: &ParamVars, tokens: Var) -> Result<Var> {
    let want = cfg.channels * cfg.token_patch.pow(3);
    let s = g.shape(tokens);
    if s.len() != 2 || s[1] != want {
        return Err(Error::shape(
            "patch-embed",
            s,
            &[s.first().copied().unwrap_or(0), want],
        ));
    }
    linear(g, pv, "encoder.patch_embed", tokens)
}

/// Transformer blocks and final norm on already embedded rows. Returns the
/// normed output plus the raw output of each block listed in `taps`
/// (1-based block counts).
pub fn encode_embedded(
    g: &mut Graph,
    cfg: &ViTConfig,
    pv: &ParamVars,
    x: Var,
    taps: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let mut x = x;
    let mut tapped = Vec::with_capacity(taps.len());
    for i in 0..cfg.depth {
        x = block(g, pv, &format!("encoder.blocks.{i}"), x, cfg.num_heads)?;
        if taps.contains(&(i + 1)) {
            tapped.push(x);
        }
    }
    let out = norm(g, pv, "encoder.norm", x)?;
    Ok((out, tapped))
}

/// Patch embed, add `positions`, run the encoder. `[n, C p^3] -> [n, E]`.
pub fn encode(
    g: &mut Graph,
    cfg: &ViTConfig,
    pv: &ParamVars,
    tokens: Var,
    positions: Var,
) -> Result<Var> {
    let x = patch_embed(g, cfg, pv, tokens)?;
    if g.shape(x) != g.shape(positions) {
        return Err(Error::shape("encode", g.shape(x), g.shape(positions)));
    }
    let x = g.add(x, positions)?;
    Ok(encode_embedded(g, cfg, pv, x, &[])?.0)
}

/// Block counts after which the segmentation decoder taps features.
pub fn tap_depths(depth: usize) -> [usize; 4] {
    [1, 2, 3, 4].map(|k| (depth * k).div_ceil(4))
}

/// Value-only encoder on detached inputs.
pub fn encode_tensor(
    cfg: &ViTConfig,
    params: &super::Parameters,
    tokens: &Tensor,
    positions: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let t = g.constant(tokens.clone());
    let p = g.constant(positions.clone());
    let out = encode(&mut g, cfg, &pv, t, p)?;
    Ok(g.value(out).clone())
}
