//! Sliding-window inference, reconstruction triptychs and Dice evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{mim_forward, unetr_segment, Checkpoint, Method, ModelConfig, Parameters};
use crate::objectives::DiceReport;
use crate::patch::{patchify, sample_mask, unpatchify, Mask, MaskingConfig, PatchGrid};
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::volume::{LabelVolume, Volume};

/// Gray level used for masked voxels in triptychs.
pub const MASK_GRAY: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlidingWindowConfig {
    pub window: usize,
    pub overlap: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            window: 32,
            overlap: 0.5,
        }
    }
}

impl SlidingWindowConfig {
    pub fn stride(&self) -> Result<usize> {
        if self.window == 0 {
            return Err(Error::Config("sliding window edge must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        Ok(((self.window as f64 * (1.0 - self.overlap)).round() as usize).max(1))
    }
}

/// Window start offsets along one axis; the last window is clamped to the
/// edge. `extent` must be at least `window`.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// How many windows cover each voxel of a `D x H x W` volume.
pub fn coverage(extents: [usize; 3], cfg: &SlidingWindowConfig) -> Result<Vec<u32>> {
    let stride = cfg.stride()?;
    let padded = extents.map(|e| e.max(cfg.window));
    let starts = padded.map(|e| window_starts(e, cfg.window, stride));
    let [d, h, w] = extents;
    let mut count = vec![0u32; d * h * w];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                for z in z0..(z0 + cfg.window).min(d) {
                    for y in y0..(y0 + cfg.window).min(h) {
                        for x in x0..(x0 + cfg.window).min(w) {
                            count[(z * h + y) * w + x] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(count)
}

/// Tiles `v` with cubic windows, runs `model` on each (`[C, w, w, w]` in,
/// `[K, w, w, w]` out) and averages overlapping outputs. Volumes smaller
/// than the window are zero-padded; padding is cropped from the result.
pub fn sliding_window_infer<F>(
    mut model: F,
    v: &Volume,
    cfg: &SlidingWindowConfig,
) -> Result<Tensor>
where
    F: FnMut(&Volume) -> Result<Tensor>,
{
    let stride = cfg.stride()?;
    let win = cfg.window;
    let extents = v.extents();
    let padded = v.pad_to([win; 3]);
    let pe = padded.extents();
    let starts = pe.map(|e| window_starts(e, win, stride));
    let [d, h, w] = extents;
    let mut sum: Vec<f64> = Vec::new();
    let mut count = vec![0u32; d * h * w];
    let mut k = 0;
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let crop = padded.crop([z0, y0, x0], [win; 3])?;
                let out = model(&crop)?;
                let s = out.shape();
                if s.len() != 4 || s[1..] != [win; 3] {
                    return Err(Error::shape("sliding-window", s, &[0, win, win, win]));
                }
                if sum.is_empty() {
                    k = s[0];
                    sum = vec![0.0; k * d * h * w];
                } else if s[0] != k {
                    return Err(Error::shape("sliding-window", s, &[k, win, win, win]));
                }
                let od = out.data();
                for z in z0..(z0 + win).min(d) {
                    for y in y0..(y0 + win).min(h) {
                        for x in x0..(x0 + win).min(w) {
                            let vi = (z * h + y) * w + x;
                            count[vi] += 1;
                            let wi = ((z - z0) * win + (y - y0)) * win + (x - x0);
                            for c in 0..k {
                                sum[c * d * h * w + vi] += od[c * win * win * win + wi];
                            }
                        }
                    }
                }
            }
        }
    }
    let n = d * h * w;
    for (i, s) in sum.iter_mut().enumerate() {
        *s /= f64::from(count[i % n]);
    }
    Tensor::new(vec![k, d, h, w], sum)
}

/// Class with the largest score per voxel of `[K, D, H, W]` scores; ties go
/// to the lower class id.
pub fn argmax_labels(scores: &Tensor) -> Result<LabelVolume> {
    let s = scores.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::operand(
            "argmax",
            format!("expected [K, D, H, W], got {s:?}"),
        ));
    }
    let k = s[0];
    let n = s[1] * s[2] * s[3];
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if scores.data()[c * n + i] > scores.data()[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelVolume::new([s[1], s[2], s[3]], k, data)
}

/// Sliding-window segmentation with a trained model.
pub fn predict_labels(
    cfg: &ModelConfig,
    params: &Parameters,
    v: &Volume,
    swi: &SlidingWindowConfig,
) -> Result<LabelVolume> {
    let logits = sliding_window_infer(|w| unetr_segment(cfg, params, w), v, swi)?;
    argmax_labels(&logits)
}

/// Mean per-class Dice of `predict` over a labeled dataset.
pub fn evaluate_with<F>(mut predict: F, dataset: &[(Volume, LabelVolume)]) -> Result<DiceReport>
where
    F: FnMut(&Volume) -> Result<LabelVolume>,
{
    let reports = dataset
        .iter()
        .map(|(v, l)| {
            let p = predict(v)?;
            DiceReport::compute(l, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    DiceReport::mean(&reports)
}

/// Dice report of a segmentation checkpoint on `dataset`.
pub fn evaluate(
    ck: &Checkpoint,
    dataset: &[(Volume, LabelVolume)],
    swi: &SlidingWindowConfig,
) -> Result<DiceReport> {
    if ck.meta.method != Method::Segmentation {
        return Err(Error::Config(format!(
            "evaluation needs a segmentation checkpoint, got {}",
            ck.meta.method.name()
        )));
    }
    let classes = ck.meta.model.seg.num_classes;
    if let Some((_, l)) = dataset.iter().find(|(_, l)| l.num_classes() != classes) {
        return Err(Error::Config(format!(
            "model predicts {classes} classes, labels have {}",
            l.num_classes()
        )));
    }
    evaluate_with(
        |v| predict_labels(&ck.meta.model, &ck.params, v, swi),
        dataset,
    )
}

/// Binary 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Invalid(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary 8-bit PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = fs::read(path)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        msg: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&buf[start..pos])
                .map_err(|_| bad("bad header"))?
                .to_string(),
        );
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = buf[pos + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, pixels))
}

struct Gray {
    lo: f64,
    span: f64,
}

impl Gray {
    fn new(values: &[f64]) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Gray { lo, span: hi - lo }
    }

    fn byte(&self, x: f64) -> u8 {
        if self.span <= 0.0 {
            return 0;
        }
        (255.0 * (x - self.lo) / self.span)
            .round()
            .clamp(0.0, 255.0) as u8
    }
}

/// Per-voxel flag: voxel lies in a masked token.
fn voxel_mask(grid: &PatchGrid, mask: &Mask) -> Vec<bool> {
    let p = grid.token_patch;
    let [d, h, w] = grid.extents();
    let mut out = vec![false; d * h * w];
    for &t in mask.masked() {
        let [tz, ty, tx] = grid.coord(t);
        for z in tz * p..(tz + 1) * p {
            for y in ty * p..(ty + 1) * p {
                let row = (z * h + y) * w;
                out[row + tx * p..row + (tx + 1) * p].fill(true);
            }
        }
    }
    out
}

/// Writes original / masked / reconstructed PGM slices of channel 0 at each
/// requested depth. Reconstruction keeps visible voxels and fills masked
/// ones with the model prediction.
pub fn reconstruct_dump(
    ck: &Checkpoint,
    v: &Volume,
    masking: &MaskingConfig,
    depths: &[usize],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let method = ck.meta.method;
    if !method.is_mim() {
        return Err(Error::Config(format!(
            "reconstruction needs an mae or simmim checkpoint, got {}",
            method.name()
        )));
    }
    let [d, h, w] = v.extents();
    if let Some(&bad) = depths.iter().find(|&&z| z >= d) {
        return Err(Error::Invalid(format!("depth {bad} out of range 0..{d}")));
    }
    let (_, grid) = patchify(v, ck.meta.model.vit.token_patch)?;
    let mask = sample_mask(&grid, masking, &mut rng::seeded(seed, 0x5eed))?;
    let recon = if mask.is_empty() {
        v.clone()
    } else {
        let mut g = Graph::new();
        let pv = ck.params.bind_frozen(&mut g);
        let out = mim_forward(&mut g, method, &ck.meta.model, &pv, v, &mask)?;
        unpatchify(g.value(out.pred), &grid)?
    };
    let hidden = voxel_mask(&grid, &mask);
    let original = v.channel(0);
    let predicted = recon.channel(0);
    let gray = Gray::new(original);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(3 * depths.len());
    for &z in depths {
        let range = z * h * w..(z + 1) * h * w;
        let orig: Vec<u8> = original[range.clone()]
            .iter()
            .map(|&x| gray.byte(x))
            .collect();
        let masked: Vec<u8> = range
            .clone()
            .map(|i| {
                if hidden[i] {
                    MASK_GRAY
                } else {
                    gray.byte(original[i])
                }
            })
            .collect();
        let rec: Vec<u8> = range
            .map(|i| gray.byte(if hidden[i] { predicted[i] } else { original[i] }))
            .collect();
        for (kind, px) in [("original", orig), ("masked", masked), ("recon", rec)] {
            let path = out_dir.join(format!("slice{z:03}_{kind}.pgm"));
            write_pgm(&path, w, h, &px)?;
            written.push(path);
        }
    }
    Ok(written)
}
