//! Volumes, label maps, intensity normalization and resampling.

mod io;
mod synth;

pub use io::{load_labels, load_volume, save_labels, save_volume, LabelHeader, VolumeHeader};
pub use synth::{synth_generate, SynthSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "SYNTH")]
    Synth,
}

/// Dense `channels x D x H x W` image with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    spacing: [f64; 3],
    modality: Modality,
    data: Vec<f64>,
}

/// Integer class map over `D x H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    num_classes: usize,
    data: Vec<u16>,
}

impl Volume {
    pub fn new(
        shape: [usize; 4],
        spacing: [f64; 3],
        modality: Modality,
        data: Vec<f64>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "volume extents must be >= 1, got {shape:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Invalid(format!(
                "volume {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i}")));
        }
        Ok(Volume {
            shape,
            spacing,
            modality,
            data,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Volume {
            shape,
            spacing: [1.0; 3],
            modality: Modality::Synth,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor, spacing: [f64; 3], modality: Modality) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Invalid(format!("expected a 4-D tensor, got {s:?}")));
        }
        Volume::new(
            [s[0], s[1], s[2], s[3]],
            spacing,
            modality,
            t.data().to_vec(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.to_vec(), self.data.clone())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents `[D, H, W]`.
    pub fn extents(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, d, h, w] = self.shape;
        ((c * d + z) * h + y) * w + x
    }

    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[c * n..(c + 1) * n]
    }

    /// Axis-aligned sub-volume starting at `origin` with extents `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        check_window(self.extents(), origin, size)?;
        let c = self.channels();
        let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
        for ch in 0..c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = self.index(ch, origin[0] + z, origin[1] + y, origin[2]);
                    data.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Ok(Volume {
            shape: [c, size[0], size[1], size[2]],
            spacing: self.spacing,
            modality: self.modality,
            data,
        })
    }

    /// Zero-pads at the far end of each axis up to at least `min`.
    pub fn pad_to(&self, min: [usize; 3]) -> Volume {
        let [c, d, h, w] = self.shape;
        let (pd, ph, pw) = (d.max(min[0]), h.max(min[1]), w.max(min[2]));
        if (pd, ph, pw) == (d, h, w) {
            return self.clone();
        }
        let mut out = Volume {
            shape: [c, pd, ph, pw],
            spacing: self.spacing,
            modality: self.modality,
            data: vec![0.0; c * pd * ph * pw],
        };
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = self.index(ch, z, y, 0);
                    let dst = out.index(ch, z, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    /// Multiplies every voxel by `factor`.
    pub fn scaled(&self, factor: f64) -> Volume {
        let mut v = self.clone();
        v.data.iter_mut().for_each(|x| *x *= factor);
        v
    }
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], num_classes: usize, data: Vec<u16>) -> Result<Self> {
        if shape.contains(&0) || num_classes == 0 {
            return Err(Error::Invalid(format!(
                "label volume {shape:?} with {num_classes} classes"
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Invalid(format!(
                "label volume {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Invalid(format!(
                "label id {bad} outside [0, {num_classes})"
            )));
        }
        Ok(LabelVolume {
            shape,
            num_classes,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        let [_, h, w] = self.shape;
        self.data[(z * h + y) * w + x]
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<LabelVolume> {
        check_window(self.shape, origin, size)?;
        let [_, h, w] = self.shape;
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(LabelVolume {
            shape: size,
            num_classes: self.num_classes,
            data,
        })
    }

    /// Count of voxels carrying each class id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

fn check_window(extents: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > extents[a] {
            return Err(Error::Invalid(format!(
                "window {size:?} at {origin:?} does not fit extents {extents:?}"
            )));
        }
    }
    Ok(())
}

/// Clamps `(x - lo) / (hi - lo)` into `[0, 1]` voxelwise.
pub fn normalize_ct(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::Invalid(format!(
            "normalization window [{lo}, {hi}] is empty"
        )));
    }
    let mut out = v.clone();
    let span = hi - lo;
    out.data
        .iter_mut()
        .for_each(|x| *x = ((*x - lo) / span).clamp(0.0, 1.0));
    Ok(out)
}

/// Per-channel `(x - mean) / std` with population std. Channels whose std is
/// below 1e-8 become all zeros.
pub fn normalize_zscore(v: &Volume) -> Volume {
    let mut out = v.clone();
    let n = v.extents().iter().product::<usize>();
    for c in 0..v.channels() {
        let ch = &mut out.data[c * n..(c + 1) * n];
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            ch.iter_mut().for_each(|x| *x = 0.0);
        } else {
            ch.iter_mut().for_each(|x| *x = (*x - mean) / std);
        }
    }
    out
}

fn resampled_extents(extents: [usize; 3], from: [f64; 3], to: [f64; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !(to[a] > 0.0 && to[a].is_finite()) {
            return Err(Error::Invalid(format!(
                "target spacing must be positive, got {to:?}"
            )));
        }
        out[a] = ((extents[a] as f64 * from[a] / to[a]).round() as usize).max(1);
    }
    Ok(out)
}

/// Source coordinate of output index `i` when both grids share their origin.
fn source_coord(i: usize, from: f64, to: f64, n: usize) -> f64 {
    (i as f64 * to / from).clamp(0.0, (n - 1) as f64)
}

/// Trilinear resampling onto a new voxel spacing.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let ext = v.extents();
    let out_ext = resampled_extents(ext, v.spacing, target)?;
    if v.spacing == target {
        return Ok(v.clone());
    }
    let axis_taps = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out_ext[a])
            .map(|i| {
                let s = source_coord(i, v.spacing[a], target[a], ext[a]);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(ext[a] - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (axis_taps(0), axis_taps(1), axis_taps(2));
    let c = v.channels();
    let mut data = Vec::with_capacity(c * out_ext.iter().product::<usize>());
    for ch in 0..c {
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let g = |z, y, x| v.get(ch, z, y, x);
                    let c00 = g(z0, y0, x0) * (1.0 - fx) + g(z0, y0, x1) * fx;
                    let c01 = g(z0, y1, x0) * (1.0 - fx) + g(z0, y1, x1) * fx;
                    let c10 = g(z1, y0, x0) * (1.0 - fx) + g(z1, y0, x1) * fx;
                    let c11 = g(z1, y1, x0) * (1.0 - fx) + g(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    data.push(c0 * (1.0 - fz) + c1 * fz);
                }
            }
        }
    }
    Ok(Volume {
        shape: [c, out_ext[0], out_ext[1], out_ext[2]],
        spacing: target,
        modality: v.modality,
        data,
    })
}

/// Nearest-neighbour resampling of a label map from `spacing` to `target`.
pub fn resample_labels(
    l: &LabelVolume,
    spacing: [f64; 3],
    target: [f64; 3],
) -> Result<LabelVolume> {
    let ext = l.shape;
    let out_ext = resampled_extents(ext, spacing, target)?;
    if spacing == target {
        return Ok(l.clone());
    }
    let idx = |a: usize| -> Vec<usize> {
        (0..out_ext[a])
            .map(|i| source_coord(i, spacing[a], target[a], ext[a]).round() as usize)
            .collect()
    };
    let (iz, iy, ix) = (idx(0), idx(1), idx(2));
    let mut data = Vec::with_capacity(out_ext.iter().product());
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                data.push(l.get(z, y, x));
            }
        }
    }
    Ok(LabelVolume {
        shape: out_ext,
        num_classes: l.num_classes,
        data,
    })
}
