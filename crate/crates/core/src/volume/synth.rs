use super::{LabelVolume, Modality, Volume};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub type SynthSample = (Volume, LabelVolume);

const MAX_PLACEMENT_TRIES: usize = 2000;
const NOISE_STD: f64 = 0.08;
const BACKGROUND_MEAN: f64 = 0.1;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bound(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

/// Mean intensity of class `k` before per-sample jitter.
fn class_mean(k: usize, num_classes: usize) -> f64 {
    BACKGROUND_MEAN + 0.5 * k as f64 / (num_classes - 1) as f64
}

/// Synthetic single-channel volumes, each holding `num_classes - 1`
/// non-overlapping ellipsoids on a noisy background. Label `k` marks
/// ellipsoid `k`. Voxel values are f32-representable so the pair survives a
/// disk round trip unchanged.
pub fn synth_generate(
    seed: u64,
    count: usize,
    shape: [usize; 3],
    num_classes: usize,
) -> Result<Vec<SynthSample>> {
    if shape.iter().any(|&e| e < 16) {
        return Err(Error::Invalid(format!(
            "synthetic extents must be >= 16, got {shape:?}"
        )));
    }
    if !(2..=u16::MAX as usize).contains(&num_classes) {
        return Err(Error::Invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    (0..count)
        .map(|i| {
            generate_one(
                &mut rng::seeded(rng::derive_seed(seed, i as u64), 0),
                shape,
                num_classes,
            )
        })
        .collect()
}

fn place(rng: &mut Rng, shape: [usize; 3], placed: &[Ellipsoid]) -> Result<Ellipsoid> {
    let min_extent = *shape.iter().min().unwrap() as f64;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let radii = [0, 1, 2].map(|_| rng::uniform(rng, min_extent / 8.0, min_extent / 4.0));
        let mut center = [0.0; 3];
        for a in 0..3 {
            let lo = radii[a] + 1.0;
            let hi = shape[a] as f64 - radii[a] - 2.0;
            center[a] = rng::uniform(rng, lo, hi);
        }
        let cand = Ellipsoid { center, radii };
        let clear = placed.iter().all(|e| {
            let d: f64 = (0..3)
                .map(|a| (e.center[a] - center[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            d > e.bound() + cand.bound() + 1.0
        });
        if clear {
            return Ok(cand);
        }
    }
    Err(Error::Invalid(format!(
        "could not place non-overlapping ellipsoids in {shape:?} after {MAX_PLACEMENT_TRIES} tries"
    )))
}

fn generate_one(rng: &mut Rng, shape: [usize; 3], num_classes: usize) -> Result<SynthSample> {
    let mut bodies: Vec<Ellipsoid> = Vec::with_capacity(num_classes - 1);
    for _ in 1..num_classes {
        let e = place(rng, shape, &bodies)?;
        bodies.push(e);
    }
    let means: Vec<f64> = (0..num_classes)
        .map(|k| class_mean(k, num_classes) + rng::uniform(rng, -0.03, 0.03))
        .collect();
    let [d, h, w] = shape;
    let mut data = Vec::with_capacity(d * h * w);
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let k = bodies
                    .iter()
                    .position(|e| e.contains(p))
                    .map_or(0, |i| i + 1);
                let v = means[k] + NOISE_STD * rng::normal(rng);
                data.push(f64::from(v as f32));
                labels.push(k as u16);
            }
        }
    }
    let vol = Volume::new([1, d, h, w], [1.0; 3], Modality::Synth, data)?;
    let lab = LabelVolume::new(shape, num_classes, labels)?;
    Ok((vol, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = synth_generate(7, 2, [16, 16, 16], 3).unwrap();
        let b = synth_generate(7, 2, [16, 16, 16], 3).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, 2, [16, 16, 16], 3).unwrap();
        assert_ne!(a[0].0, c[0].0);
    }

    #[test]
    fn every_class_present_and_background_majority() {
        for (_, lab) in synth_generate(3, 4, [24, 20, 16], 4).unwrap() {
            let hist = lab.histogram();
            assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
            assert!(hist[0] * 2 > lab.len());
        }
    }

    #[test]
    fn rejects_small_shapes() {
        assert!(synth_generate(0, 1, [8, 16, 16], 3).is_err());
        assert!(synth_generate(0, 1, [16, 16, 16], 1).is_err());
    }
}
