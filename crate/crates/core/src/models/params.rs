use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, PosEmbed};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Gradients, Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mae,
    Simmim,
    Simclr,
    Segmentation,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mae => "mae",
            Method::Simmim => "simmim",
            Method::Simclr => "simclr",
            Method::Segmentation => "segmentation",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Method::Mae),
            "simmim" => Ok(Method::Simmim),
            "simclr" => Ok(Method::Simclr),
            "segmentation" | "seg" => Ok(Method::Segmentation),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn is_mim(self) -> bool {
        matches!(self, Method::Mae | Method::Simmim)
    }
}

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    entries: BTreeMap<String, Tensor>,
}

/// Parameters bound as grad-requiring leaves of one graph.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Rebinds `name` to `var`, e.g. to probe gradients of one parameter.
    pub fn with(mut self, name: &str, var: Var) -> Result<Self> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(self)
            }
            None => Err(Error::Config(format!("missing parameter `{name}`"))),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Weight,
    Zeros,
    Ones,
    Token,
}

struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.entries.push((name.into(), shape, init));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.add(format!("{name}.weight"), vec![din, dout], Init::Weight);
        self.add(format!("{name}.bias"), vec![dout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.add(format!("{name}.weight"), vec![dim], Init::Ones);
        self.add(format!("{name}.bias"), vec![dim], Init::Zeros);
    }

    fn blocks(&mut self, prefix: &str, depth: usize, dim: usize, mlp_ratio: usize) {
        for i in 0..depth {
            let b = format!("{prefix}.blocks.{i}");
            self.norm(&format!("{b}.norm1"), dim);
            self.linear(&format!("{b}.attn.qkv"), dim, 3 * dim);
            self.linear(&format!("{b}.attn.proj"), dim, dim);
            self.norm(&format!("{b}.norm2"), dim);
            self.linear(&format!("{b}.mlp.fc1"), dim, mlp_ratio * dim);
            self.linear(&format!("{b}.mlp.fc2"), mlp_ratio * dim, dim);
        }
    }

    fn pos(&mut self, name: &str, pos: PosEmbed, dim: usize) {
        if let PosEmbed::Learned { grid } = pos {
            self.add(name, vec![grid.iter().product(), dim], Init::Token);
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) {
        self.add(
            format!("{name}.weight"),
            vec![cin, stride.pow(3) * cout],
            Init::Weight,
        );
        self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
    }
}

/// Number of 2x upsampling levels between the token grid and voxels.
pub(crate) fn upsample_levels(token_patch: usize) -> Result<usize> {
    if token_patch < 2 || !token_patch.is_power_of_two() {
        return Err(Error::Config(format!(
            "segmentation decoder needs a power-of-two token patch >= 2, got {token_patch}"
        )));
    }
    Ok(token_patch.trailing_zeros() as usize)
}

/// Feature width at upsampling level `l` (1-based, `levels` at voxel resolution).
pub(crate) fn level_width(feature_size: usize, levels: usize, l: usize) -> usize {
    feature_size << (levels - l)
}

/// Level at which encoder tap `j` (1..=3, shallow to deep) joins the decoder.
pub(crate) fn tap_level(j: usize, levels: usize) -> usize {
    (4 - j).min(levels)
}

fn layout_for(cfg: &ModelConfig, method: Method) -> Result<Layout> {
    cfg.validate()?;
    let v = &cfg.vit;
    let e = v.embed_dim;
    let mut s = Layout {
        entries: Vec::new(),
    };
    s.linear("encoder.patch_embed", cfg.token_dim(), e);
    s.pos("encoder.pos_embed", v.pos_embed, e);
    s.blocks("encoder", v.depth, e, v.mlp_ratio);
    s.norm("encoder.norm", e);
    match method {
        Method::Mae => {
            let d = &cfg.decoder;
            s.linear("decoder.embed", e, d.decoder_dim);
            s.add("decoder.mask_token", vec![d.decoder_dim], Init::Token);
            s.pos("decoder.pos_embed", d.pos_embed, d.decoder_dim);
            s.blocks("decoder", d.decoder_depth, d.decoder_dim, v.mlp_ratio);
            s.norm("decoder.norm", d.decoder_dim);
            s.linear("decoder.pred", d.decoder_dim, cfg.token_dim());
        }
        Method::Simmim => {
            s.add("simmim.mask_token", vec![e], Init::Token);
            s.linear("simmim.head", e, cfg.token_dim());
        }
        Method::Simclr => {
            s.linear("simclr.fc1", e, cfg.simclr.proj_hidden);
            s.linear("simclr.fc2", cfg.simclr.proj_hidden, cfg.simclr.proj_dim);
        }
        Method::Segmentation => {
            if v.depth < 4 {
                return Err(Error::Config(format!(
                    "segmentation taps 4 encoder depths but depth is {}",
                    v.depth
                )));
            }
            let levels = upsample_levels(v.token_patch)?;
            let fs = cfg.seg.feature_size;
            let w = |l| level_width(fs, levels, l);
            let mut prev = e;
            for l in 1..=levels {
                s.conv(&format!("unetr.up{l}"), prev, w(l), 2);
                prev = w(l);
            }
            for j in 1..=3 {
                let mut prev = e;
                for i in 1..=tap_level(j, levels) {
                    s.conv(&format!("unetr.skip{j}.up{i}"), prev, w(i), 2);
                    prev = w(i);
                }
            }
            s.linear("unetr.input_proj", v.channels, w(levels));
            for l in 1..=levels {
                let skips = (1..=3).filter(|&j| tap_level(j, levels) == l).count();
                let extra = if l == levels { 1 } else { 0 };
                if skips + extra > 0 {
                    s.linear(&format!("unetr.merge{l}"), w(l) * (1 + skips + extra), w(l));
                }
            }
            s.linear("unetr.head", w(levels), cfg.seg.num_classes);
        }
    }
    Ok(s)
}

impl Parameters {
    /// Truncated-normal weights, zero biases, unit norm scales and
    /// normal mask tokens, drawn in declaration order from `seed`.
    pub fn init(cfg: &ModelConfig, method: Method, seed: u64) -> Result<Self> {
        let layout = layout_for(cfg, method)?;
        let mut rng: Rng = rng::seeded(seed, 0x1417);
        let mut entries = BTreeMap::new();
        for (name, shape, init) in layout.entries {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Weight => (0..n)
                    .map(|_| rng::trunc_normal(&mut rng, INIT_STD))
                    .collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Token => (0..n).map(|_| INIT_STD * rng::normal(&mut rng)).collect(),
            };
            if entries
                .insert(name.clone(), Tensor::from_parts(shape, data))
                .is_some()
            {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(Parameters { entries })
    }

    pub fn from_map(entries: BTreeMap<String, Tensor>) -> Self {
        Parameters { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Binds every tensor as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Gradients for each bound parameter, by name.
    pub fn collect_grads(
        &self,
        bound: &ParamVars,
        grads: &mut Gradients,
    ) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.entries[k].shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Copies every `encoder.*` tensor from `other`; shapes must agree.
    pub fn load_encoder_from(&mut self, other: &Parameters) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self
            .entries
            .iter_mut()
            .filter(|(k, _)| k.starts_with("encoder."))
        {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible_and_unique() {
        let cfg = ModelConfig::tiny();
        for m in [
            Method::Mae,
            Method::Simmim,
            Method::Simclr,
            Method::Segmentation,
        ] {
            let a = Parameters::init(&cfg, m, 5).unwrap();
            let b = Parameters::init(&cfg, m, 5).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.count(), b.count());
            assert!(a.get("encoder.patch_embed.weight").is_some());
        }
        let a = Parameters::init(&cfg, Method::Mae, 5).unwrap();
        let c = Parameters::init(&cfg, Method::Mae, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_parameter_count_is_a_function_of_config() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::init(&cfg, Method::Simmim, 0).unwrap();
        let e = 48;
        let per_block = 2 * e
            + (e * 3 * e + 3 * e)
            + (e * e + e)
            + 2 * e
            + (e * 4 * e + 4 * e)
            + (4 * e * e + e);
        let encoder = (512 * e + e) + 4 * per_block + 2 * e;
        let head = e + (e * 512 + 512);
        assert_eq!(p.count(), encoder + head);
    }

    #[test]
    fn segmentation_needs_four_blocks() {
        let mut cfg = ModelConfig::tiny();
        cfg.vit.depth = 3;
        assert!(Parameters::init(&cfg, Method::Segmentation, 0).is_err());
    }

    #[test]
    fn encoder_transfer_checks_shapes() {
        let cfg = ModelConfig::tiny();
        let src = Parameters::init(&cfg, Method::Mae, 1).unwrap();
        let mut dst = Parameters::init(&cfg, Method::Segmentation, 2).unwrap();
        let n = dst.load_encoder_from(&src).unwrap();
        assert!(n > 0);
        assert_eq!(
            dst.get("encoder.norm.weight"),
            src.get("encoder.norm.weight")
        );
        let mut other = cfg.clone();
        other.vit.embed_dim = 24;
        other.vit.num_heads = 2;
        let mut small = Parameters::init(&other, Method::Segmentation, 2).unwrap();
        assert!(small.load_encoder_from(&src).is_err());
    }
}
