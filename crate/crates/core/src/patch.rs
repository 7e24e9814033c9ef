//! Patchification, uniform patch-level masking and fixed 3-D sinusoidal
//! positional encodings.
//!
//! Tokens are `p x p x p` blocks flattened channel-major then row-major, and
//! token order is row-major over the `(gD, gH, gW)` grid. Masking operates on
//! super-cells of `(q/p)^3` tokens so the masked patch size `q` can be chosen
//! independently of the token patch size `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::volume::{Modality, Volume};

const AXES: [&str; 3] = ["depth", "height", "width"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub token_patch: usize,
    pub grid: [usize; 3],
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(extents: [usize; 3], token_patch: usize, channels: usize) -> Result<Self> {
        if token_patch == 0 {
            return Err(Error::Config("token patch size must be positive".into()));
        }
        let mut grid = [0; 3];
        for a in 0..3 {
            if !extents[a].is_multiple_of(token_patch) || extents[a] == 0 {
                return Err(Error::NotDivisible {
                    axis: AXES[a],
                    extent: extents[a],
                    divisor: token_patch,
                });
            }
            grid[a] = extents[a] / token_patch;
        }
        Ok(PatchGrid {
            token_patch,
            grid,
            channels,
        })
    }

    pub fn for_volume(v: &Volume, token_patch: usize) -> Result<Self> {
        Self::new(v.extents(), token_patch, v.channels())
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.token_patch.pow(3)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.grid.map(|g| g * self.token_patch)
    }

    /// Grid coordinate of token `i`.
    pub fn coord(&self, i: usize) -> [usize; 3] {
        let [_, gh, gw] = self.grid;
        [i / (gh * gw), (i / gw) % gh, i % gw]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Edge of the masking unit in voxels; a multiple of the token patch.
    pub masked_patch: usize,
    pub ratio: f64,
}

impl MaskingConfig {
    pub fn validate(&self, grid: &PatchGrid) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "masking ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        let p = grid.token_patch;
        if self.masked_patch == 0 || !self.masked_patch.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "masked patch size {} is not a positive multiple of token patch size {p}",
                self.masked_patch
            )));
        }
        let cell = self.masked_patch / p;
        for (&g, axis) in grid.grid.iter().zip(AXES) {
            if !g.is_multiple_of(cell) {
                return Err(Error::NotDivisible {
                    axis,
                    extent: g * p,
                    divisor: self.masked_patch,
                });
            }
        }
        Ok(cell)
    }
}

/// Sorted masked token ids of one volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    masked: Vec<usize>,
    total: usize,
}

impl Mask {
    pub fn new(mut masked: Vec<usize>, total: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(Error::Invalid(format!("masked id out of range {total}")));
        }
        Ok(Mask { masked, total })
    }

    pub fn empty(total: usize) -> Self {
        Mask {
            masked: Vec::new(),
            total,
        }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total - self.masked.len());
        let mut it = self.masked.iter().peekable();
        for i in 0..self.total {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }

    /// `[N, 1]` indicator column: 1 on masked rows.
    pub fn indicator(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.total, 1]);
        for &m in &self.masked {
            t.data_mut()[m] = 1.0;
        }
        t
    }
}

/// Splits a volume into `N x (C p^3)` token rows.
pub fn patchify(v: &Volume, token_patch: usize) -> Result<(Tensor, PatchGrid)> {
    let grid = PatchGrid::for_volume(v, token_patch)?;
    let p = token_patch;
    let [gd, gh, gw] = grid.grid;
    let dim = grid.token_dim();
    let mut data = Vec::with_capacity(grid.num_tokens() * dim);
    for tz in 0..gd {
        for ty in 0..gh {
            for tx in 0..gw {
                for c in 0..grid.channels {
                    for z in 0..p {
                        for y in 0..p {
                            let start = v.index(c, tz * p + z, ty * p + y, tx * p);
                            data.extend_from_slice(&v.data()[start..start + p]);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![grid.num_tokens(), dim], data), grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<Volume> {
    let dim = grid.token_dim();
    if tokens.shape() != [grid.num_tokens(), dim] {
        return Err(Error::shape(
            "unpatchify",
            tokens.shape(),
            &[grid.num_tokens(), dim],
        ));
    }
    let p = grid.token_patch;
    let [d, h, w] = grid.extents();
    let [gd, gh, gw] = grid.grid;
    let mut vol = Volume::zeros([grid.channels, d, h, w]);
    let mut src = 0;
    for tz in 0..gd {
        for ty in 0..gh {
            for tx in 0..gw {
                for c in 0..grid.channels {
                    for z in 0..p {
                        for y in 0..p {
                            let start = vol.index(c, tz * p + z, ty * p + y, tx * p);
                            vol.data_mut()[start..start + p]
                                .copy_from_slice(&tokens.data()[src..src + p]);
                            src += p;
                        }
                    }
                }
            }
        }
    }
    Ok(vol.with_modality(Modality::Synth))
}

/// Draws `floor(ratio * cells)` super-cells uniformly without replacement and
/// masks every token inside them.
pub fn sample_mask(grid: &PatchGrid, cfg: &MaskingConfig, rng: &mut Rng) -> Result<Mask> {
    let cell = cfg.validate(grid)?;
    let sg = grid.grid.map(|g| g / cell);
    let cells = sg.iter().product::<usize>();
    let k = (cfg.ratio * cells as f64).floor() as usize;
    let picked = rng::partial_shuffle(rng, cells, k);
    let [_, gh, gw] = grid.grid;
    let mut masked = Vec::with_capacity(k * cell.pow(3));
    for c in picked {
        let (cz, cy, cx) = (c / (sg[1] * sg[2]), (c / sg[2]) % sg[1], c % sg[2]);
        for z in 0..cell {
            for y in 0..cell {
                for x in 0..cell {
                    masked.push(((cz * cell + z) * gh + cy * cell + y) * gw + cx * cell + x);
                }
            }
        }
    }
    Mask::new(masked, grid.num_tokens())
}

/// Fixed 3-D sinusoidal encoding, `N x dim`: `dim/3` channels per axis
/// (depth, height, width), each laid out as `[sin.., cos..]` over a geometric
/// frequency ladder with base 10000.
pub fn positional_encoding(grid: &PatchGrid, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(6) {
        return Err(Error::Config(format!(
            "positional encoding dimension {dim} is not a positive multiple of 6"
        )));
    }
    let per_axis = dim / 3;
    let half = per_axis / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64))
        .collect();
    let n = grid.num_tokens();
    let mut data = Vec::with_capacity(n * dim);
    for t in 0..n {
        let coord = grid.coord(t);
        for &pos in &coord {
            let pos = pos as f64;
            data.extend(freqs.iter().map(|f| (pos * f).sin()));
            data.extend(freqs.iter().map(|f| (pos * f).cos()));
        }
    }
    Ok(Tensor::from_parts(vec![n, dim], data))
}
