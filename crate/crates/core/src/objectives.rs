//! Reconstruction losses, segmentation loss, contrastive loss and Dice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Mask;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::LabelVolume;

/// Smoothing added to numerator and denominator of the soft Dice term.
pub const SOFT_DICE_SMOOTH: f64 = 1e-5;

const NORM_TOLERANCE: f64 = 1e-6;
const DIAGONAL_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    #[default]
    L1,
    L2,
}

impl ReconNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(ReconNorm::L1),
            "l2" => Ok(ReconNorm::L2),
            other => Err(Error::Config(format!(
                "unknown reconstruction norm `{other}`"
            ))),
        }
    }

    fn residual(self, d: f64) -> f64 {
        match self {
            ReconNorm::L1 => d.abs(),
            ReconNorm::L2 => d * d,
        }
    }
}

/// Loss averaged over every voxel of every masked token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconLossConfig {
    pub norm: ReconNorm,
}

fn check_recon(pred: &[usize], target: &[usize], mask: &Mask) -> Result<()> {
    if pred != target {
        return Err(Error::shape("masked-recon-loss", pred, target));
    }
    if pred.len() != 2 || pred[0] != mask.total() {
        return Err(Error::operand(
            "masked-recon-loss",
            format!("expected [{}, dim] token rows, got {pred:?}", mask.total()),
        ));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Differentiable masked reconstruction loss; only masked rows of `pred` and
/// `target` are read.
pub fn masked_recon_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    mask: &Mask,
    norm: ReconNorm,
) -> Result<Var> {
    check_recon(g.shape(pred), target.shape(), mask)?;
    let p = g.gather_rows(pred, mask.masked())?;
    let t = g.constant(target.gather_rows(mask.masked())?);
    let d = g.sub(p, t)?;
    let r = match norm {
        ReconNorm::L1 => g.abs(d)?,
        ReconNorm::L2 => g.mul(d, d)?,
    };
    g.mean(r)
}

/// Value-only form of [`masked_recon_loss`].
pub fn masked_recon_loss_value(
    pred: &Tensor,
    target: &Tensor,
    mask: &Mask,
    norm: ReconNorm,
) -> Result<f64> {
    check_recon(pred.shape(), target.shape(), mask)?;
    let dim = pred.shape()[1];
    let mut sum = 0.0;
    for &m in mask.masked() {
        let rows = m * dim..(m + 1) * dim;
        for (a, b) in pred.data()[rows.clone()].iter().zip(&target.data()[rows]) {
            sum += norm.residual(a - b);
        }
    }
    Ok(sum / (mask.len() * dim) as f64)
}

/// Dice overlap of class `class` between ground truth and prediction. Two
/// empty sets score 1.
pub fn dice(truth: &LabelVolume, pred: &LabelVolume, class: u16) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("dice", &truth.shape(), &pred.shape()));
    }
    let (mut inter, mut gs, mut ps) = (0usize, 0usize, 0usize);
    for (&a, &b) in truth.data().iter().zip(pred.data()) {
        let (ga, pb) = (a == class, b == class);
        inter += usize::from(ga && pb);
        gs += usize::from(ga);
        ps += usize::from(pb);
    }
    if gs + ps == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (gs + ps) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Foreground class id to Dice score.
    pub per_class: BTreeMap<u16, f64>,
    pub average: f64,
}

impl DiceReport {
    pub fn from_scores(per_class: BTreeMap<u16, f64>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::Invalid(
                "dice report needs at least one class".into(),
            ));
        }
        let average = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(DiceReport { per_class, average })
    }

    /// Per-class Dice over foreground classes `1..num_classes` of one pair.
    pub fn compute(truth: &LabelVolume, pred: &LabelVolume) -> Result<Self> {
        let per_class = (1..truth.num_classes() as u16)
            .map(|c| Ok((c, dice(truth, pred, c)?)))
            .collect::<Result<_>>()?;
        Self::from_scores(per_class)
    }

    /// Class-wise mean of several reports over the same classes.
    pub fn mean(reports: &[DiceReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Invalid("no dice reports to average".into()))?;
        let mut per_class = BTreeMap::new();
        for &c in first.per_class.keys() {
            let mut s = 0.0;
            for r in reports {
                s += r
                    .per_class
                    .get(&c)
                    .ok_or_else(|| Error::Invalid(format!("report lacks class {c}")))?;
            }
            per_class.insert(c, s / reports.len() as f64);
        }
        Self::from_scores(per_class)
    }

    /// Tab-separated rows: class name and score, then the average.
    pub fn to_table(&self, names: Option<&[String]>) -> String {
        let mut out = String::from("class\tdice\n");
        for (&c, &d) in &self.per_class {
            let name = names
                .and_then(|n| n.get(c as usize))
                .cloned()
                .unwrap_or_else(|| format!("class{c}"));
            out.push_str(&format!("{name}\t{d:.4}\n"));
        }
        out.push_str(&format!("avg\t{:.4}\n", self.average));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dice report serializes")
    }
}

/// `[V, C]` one-hot rows for `labels`.
pub fn one_hot(labels: &[u16], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::Invalid(format!(
                "label {l} at voxel {i} outside {num_classes} classes"
            )));
        }
        t.data_mut()[i * num_classes + l as usize] = 1.0;
    }
    Ok(t)
}

/// `weight_dice * (1 - mean soft Dice) + (1 - weight_dice) * cross-entropy`
/// for channels-last logits `[V, C]`.
pub fn dice_ce_loss(g: &mut Graph, logits: Var, labels: &[u16], weight_dice: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("dice-ce-loss", &shape, &[labels.len()]));
    }
    let (v, c) = (shape[0], shape[1]);
    let y = one_hot(labels, c)?;
    let ysum: Vec<f64> = (0..c)
        .map(|k| (0..v).map(|i| y.data()[i * c + k]).sum::<f64>() + SOFT_DICE_SMOOTH)
        .collect();
    let y = g.constant(y);

    let probs = g.softmax(logits, 1)?;
    let py = g.mul(probs, y)?;
    let inter = g.sum_axis(py, 0)?;
    let inter = g.scale(inter, 2.0)?;
    let smooth = g.constant(Tensor::scalar(SOFT_DICE_SMOOTH));
    let num = g.add(inter, smooth)?;
    let psum = g.sum_axis(probs, 0)?;
    let ysum = g.constant(Tensor::from_parts(vec![c], ysum));
    let den = g.add(psum, ysum)?;
    let soft = g.div(num, den)?;
    let soft = g.mean(soft)?;
    let one = g.constant(Tensor::scalar(1.0));
    let dice_term = g.sub(one, soft)?;

    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, y)?;
    let picked = g.sum(picked)?;
    let ce = g.scale(picked, -1.0 / v as f64)?;

    let a = g.scale(dice_term, weight_dice)?;
    let b = g.scale(ce, 1.0 - weight_dice)?;
    g.add(a, b)
}

/// NT-Xent over `[2B, d]` unit rows; row `i` and row `i + B` are positives.
pub fn ntxent(g: &mut Graph, z: Var, temperature: f64) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::operand(
            "ntxent",
            format!("expected [2B, dim] rows, got {shape:?}"),
        ));
    }
    let n = shape[0];
    let b = n / 2;
    if b < 2 {
        return Err(Error::Invalid(format!(
            "contrastive loss needs batch >= 2, got {b}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let d = shape[1];
    for (i, row) in g.value(z).data().chunks(d).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Invalid(format!(
                "embedding row {i} has norm {norm}, expected 1"
            )));
        }
    }
    let zt = g.permute(z, &[1, 0])?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / temperature)?;
    let mut diag = Tensor::zeros(&[n, n]);
    let mut pos = Tensor::zeros(&[n, n]);
    for i in 0..n {
        diag.data_mut()[i * n + i] = DIAGONAL_FILL;
        pos.data_mut()[i * n + (i + b) % n] = 1.0;
    }
    let diag = g.constant(diag);
    let sim = g.add(sim, diag)?;
    let logp = g.log_softmax(sim, 1)?;
    let pos = g.constant(pos);
    let picked = g.mul(logp, pos)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_l1_case() {
        let pred = Tensor::new(vec![2, 2], vec![9.0, 9.0, 0.0, 0.0]).unwrap();
        let target = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 3.0]).unwrap();
        let mask = Mask::new(vec![1], 2).unwrap();
        assert_eq!(
            masked_recon_loss_value(&pred, &target, &mask, ReconNorm::L1).unwrap(),
            2.0
        );
        let mut g = Graph::new();
        let p = g.param(pred);
        let l = masked_recon_loss(&mut g, p, &target, &mask, ReconNorm::L1).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        assert!(matches!(
            masked_recon_loss_value(&target, &target, &Mask::empty(2), ReconNorm::L1),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn dice_hand_cases() {
        let g = LabelVolume::new([1, 1, 4], 2, vec![1, 1, 0, 0]).unwrap();
        let p = LabelVolume::new([1, 1, 4], 2, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(dice(&g, &p, 1).unwrap(), 0.5);
        assert_eq!(dice(&g, &g, 1).unwrap(), 1.0);
        let z = LabelVolume::new([1, 1, 4], 3, vec![0; 4]).unwrap();
        assert_eq!(dice(&z, &z, 2).unwrap(), 1.0);
        let q = LabelVolume::new([1, 1, 4], 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice(&g, &q, 1).unwrap(), 0.0);
    }

    #[test]
    fn report_average_and_table() {
        let r = DiceReport::from_scores([(1, 0.5), (2, 1.0)].into_iter().collect()).unwrap();
        assert_eq!(r.average, 0.75);
        let t = r.to_table(None);
        assert!(t.ends_with("avg\t0.7500\n"));
        let back: DiceReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[4, 2]));
        let l = dice_ce_loss(&mut g, logits, &[0, 1, 0, 1], 0.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        assert!(dice_ce_loss(&mut g, logits, &[0, 2, 0, 1], 0.5).is_err());
    }

    #[test]
    fn ntxent_orthogonal_pairs() {
        let mut g = Graph::new();
        let z = g.constant(
            Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let l = ntxent(&mut g, z, 0.5).unwrap();
        let e2 = 2f64.exp();
        let want = -(e2 / (e2 + 2.0)).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!((want - 0.2395).abs() < 1e-4);
        let big = ntxent(&mut g, z, 1e6).unwrap();
        assert!((g.value(big).item() - 3f64.ln()).abs() < 1e-3);
        let bad = g.constant(Tensor::full(&[4, 2], 1.0));
        assert!(ntxent(&mut g, bad, 0.5).is_err());
    }
}
