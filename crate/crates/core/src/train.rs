//! AdamW, warmup-cosine schedule, crop sampling and the training loops.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{evaluate_with, predict_labels, SlidingWindowConfig};
use crate::models::{
    mim_forward, simclr_forward, unetr_logits, Checkpoint, Method, ModelConfig, ParamVars,
    Parameters,
};
use crate::objectives::{dice_ce_loss, DiceReport};
use crate::patch::{sample_mask, MaskingConfig, PatchGrid};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{LabelVolume, Volume};

/// Weight of the soft-Dice term in the fine-tuning loss.
pub const DICE_WEIGHT: f64 = 0.5;
/// Intensity scale range for contrastive views.
pub const VIEW_SCALE: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Crop edge in voxels.
    pub window: usize,
    pub seed: u64,
    /// Global gradient-norm limit; off when `None`.
    pub grad_clip: Option<f64>,
    /// Checkpoint cadence in epochs; `None` means `total_epochs / 10`.
    pub checkpoint_every: Option<usize>,
    /// Validation cadence in epochs while fine-tuning.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            min_lr: 0.0,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 2,
            warmup_epochs: 1,
            total_epochs: 10,
            window: 32,
            seed: 0,
            grad_clip: None,
            checkpoint_every: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, token_patch: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return bad(format!(
                "need 0 <= min_lr <= base_lr and base_lr > 0, got {} / {}",
                self.min_lr, self.base_lr
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 || self.total_epochs == 0 || self.validate_every == 0 {
            return bad("batch_size, total_epochs and validate_every must be positive".into());
        }
        if self.window == 0 || !self.window.is_multiple_of(token_patch) {
            return bad(format!(
                "window {} is not a multiple of token patch {token_patch}",
                self.window
            ));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b))
            || !(self.eps > 0.0)
            || self.weight_decay < 0.0
        {
            return bad(
                "betas must lie in [0, 1), eps must be positive, weight decay non-negative".into(),
            );
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || self.checkpoint_every == Some(0) {
            return bad("grad_clip and checkpoint_every must be positive when set".into());
        }
        Ok(())
    }

    pub fn checkpoint_cadence(&self) -> usize {
        self.checkpoint_every
            .unwrap_or((self.total_epochs / 10).max(1))
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One AdamW update. Decay `w -= lr * wd * w` is applied before the
/// bias-corrected Adam delta.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let t = state.t + 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= lr * cfg.weight_decay * *w;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    state.t = t;
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to `min_lr`.
pub fn lr_at(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    base_lr: f64,
    min_lr: f64,
) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress =
        (step.min(total_steps) - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Uniform window origin along each axis.
pub fn crop_origin(extents: [usize; 3], window: usize, rng: &mut Rng) -> Result<[usize; 3]> {
    if let Some(a) = (0..3).find(|&a| extents[a] < window) {
        return Err(Error::Invalid(format!(
            "crop window {window} exceeds extent {} on axis {a}",
            extents[a]
        )));
    }
    Ok(extents.map(|e| rng::below(rng, e - window + 1)))
}

/// Random cubic crop with the matching label crop.
pub fn crop_sampler(
    v: &Volume,
    labels: Option<&LabelVolume>,
    window: usize,
    rng: &mut Rng,
) -> Result<(Volume, Option<LabelVolume>)> {
    if let Some(l) = labels {
        if l.shape() != v.extents() {
            return Err(Error::shape("crop", &l.shape(), &v.extents()));
        }
    }
    let o = crop_origin(v.extents(), window, rng)?;
    let crop = v.crop(o, [window; 3])?;
    let lab = labels.map(|l| l.crop(o, [window; 3])).transpose()?;
    Ok((crop, lab))
}

/// `floor(ratio * n)` ids drawn without replacement, kept in input order.
pub fn subset_labeled(ids: &[usize], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "labeled ratio {ratio} outside (0, 1]"
        )));
    }
    let k = (ratio * ids.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Invalid(format!(
            "labeled ratio {ratio} of {} ids selects nothing",
            ids.len()
        )));
    }
    let mut picked = rng::partial_shuffle(&mut rng::seeded(seed, 0x5b5e), ids.len(), k);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ids[i]).collect())
}

/// One line of a training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<DiceReport>,
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Parameters plus optimizer state, stepped by closures that build a loss.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: Parameters,
    pub opt: OptState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(params: Parameters, cfg: TrainConfig) -> Self {
        Trainer {
            params,
            opt: OptState::default(),
            cfg,
        }
    }

    /// Builds the loss on a fresh graph, backpropagates and applies AdamW.
    /// Returns the loss value before the update.
    pub fn step<F>(&mut self, lr: f64, build: F) -> Result<f64>
    where
        F: FnOnce(&mut Graph, &ParamVars) -> Result<Var>,
    {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g);
        let loss = build(&mut g, &pv)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(self.opt.t as usize));
        }
        let mut grads = g.backward(loss)?;
        let mut named = self.params.collect_grads(&pv, &mut grads);
        if let Some(limit) = self.cfg.grad_clip {
            let norm = named
                .values()
                .flat_map(|t| t.data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let s = limit / norm;
                for t in named.values_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        adamw_step(&mut self.params, &named, &mut self.opt, lr, &self.cfg)?;
        Ok(value)
    }
}

/// Ids of batch `b` of an epoch: consecutive entries of `order`, wrapping
/// so every batch is full.
fn batch_ids(order: &[usize], b: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|k| order[(b * batch + k) % order.len()])
        .collect()
}

struct Schedule {
    steps_per_epoch: usize,
    warmup: usize,
    total: usize,
}

impl Schedule {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        Schedule {
            steps_per_epoch,
            warmup: cfg.warmup_epochs * steps_per_epoch,
            total: cfg.total_epochs * steps_per_epoch,
        }
    }

    fn lr(&self, step: usize, cfg: &TrainConfig) -> f64 {
        lr_at(step, self.warmup, self.total, cfg.base_lr, cfg.min_lr)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRecord>,
    /// Intermediate checkpoint files written, in order.
    pub saved: Vec<PathBuf>,
}

fn save_periodic(
    out_dir: Option<&Path>,
    tag: &str,
    epoch: usize,
    cfg: &TrainConfig,
    make: impl FnOnce() -> Checkpoint,
    saved: &mut Vec<PathBuf>,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    if !epoch.is_multiple_of(cfg.checkpoint_cadence()) && epoch != cfg.total_epochs {
        return Ok(());
    }
    let path = dir.join(format!("{tag}-epoch{epoch:04}.ckpt"));
    make().save(&path)?;
    saved.push(path);
    Ok(())
}

/// Self-supervised pretraining of `method` on unlabeled volumes. One epoch
/// draws one random crop per volume. With `out_dir`, periodic checkpoints
/// and `trace.jsonl` are written there.
pub fn pretrain(
    method: Method,
    model: &ModelConfig,
    cfg: &TrainConfig,
    masking: &MaskingConfig,
    dataset: &[Volume],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if method == Method::Segmentation {
        return Err(Error::Config(
            "pretraining method must be mae, simmim or simclr".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Invalid("pretraining dataset is empty".into()));
    }
    cfg.validate(model.vit.token_patch)?;
    if method == Method::Simclr && cfg.batch_size < 2 {
        return Err(Error::Config(
            "contrastive pretraining needs batch_size >= 2".into(),
        ));
    }
    if method.is_mim() {
        let grid = PatchGrid::new([cfg.window; 3], model.vit.token_patch, model.vit.channels)?;
        let cell = masking.validate(&grid)?;
        let cells: usize = grid.grid.iter().map(|g| g / cell).product();
        if (masking.ratio * cells as f64).floor() < 1.0 {
            return Err(Error::Config(format!(
                "masking ratio {} hides none of the {cells} masking units in a {}^3 crop",
                masking.ratio, cfg.window
            )));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let params = Parameters::init(model, method, rng::derive_seed(cfg.seed, 1))?;
    let mut trainer = Trainer::new(params, cfg.clone());
    let mut data_rng = rng::seeded(cfg.seed, 2);
    let mut mask_rng = rng::seeded(cfg.seed, 3);
    let sched = Schedule::new(dataset.len(), cfg);
    let mut trace = Vec::with_capacity(sched.total);
    let mut saved = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.total_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng::shuffle(&mut data_rng, &mut order);
        for b in 0..sched.steps_per_epoch {
            let ids = batch_ids(&order, b, cfg.batch_size);
            let lr = sched.lr(step, cfg);
            let loss = match method {
                Method::Simclr => {
                    let mut views = (Vec::new(), Vec::new());
                    for &i in &ids {
                        for side in [&mut views.0, &mut views.1] {
                            let (c, _) =
                                crop_sampler(&dataset[i], None, cfg.window, &mut data_rng)?;
                            side.push(c.scaled(rng::uniform(
                                &mut data_rng,
                                VIEW_SCALE.0,
                                VIEW_SCALE.1,
                            )));
                        }
                    }
                    trainer.step(lr, |g, pv| simclr_forward(g, model, pv, &views.0, &views.1))
                }
                _ => {
                    let mut batch = Vec::with_capacity(ids.len());
                    for &i in &ids {
                        let (c, _) = crop_sampler(&dataset[i], None, cfg.window, &mut data_rng)?;
                        let grid = PatchGrid::for_volume(&c, model.vit.token_patch)?;
                        let mask = sample_mask(&grid, masking, &mut mask_rng)?;
                        batch.push((c, mask));
                    }
                    trainer.step(lr, |g, pv| {
                        let losses = batch
                            .iter()
                            .map(|(v, m)| Ok(mim_forward(g, method, model, pv, v, m)?.loss))
                            .collect::<Result<Vec<_>>>()?;
                        mean_of(g, &losses)
                    })
                }
            };
            let loss = loss.map_err(|e| match e {
                Error::Diverged(_) => Error::Diverged(step),
                other => other,
            })?;
            trace.push(TraceRecord {
                step,
                epoch,
                lr,
                loss,
                dice: None,
            });
            step += 1;
        }
        save_periodic(
            out_dir,
            method.name(),
            epoch,
            cfg,
            || {
                Checkpoint::new(
                    method,
                    model.clone(),
                    step,
                    cfg.seed,
                    trainer.params.clone(),
                )
            },
            &mut saved,
        )?;
    }
    if let Some(dir) = out_dir {
        write_trace(&dir.join("trace.jsonl"), &trace)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(method, model.clone(), step, cfg.seed, trainer.params),
        trace,
        saved,
    })
}

fn mean_of(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / losses.len() as f64)
}

/// Segmentation initialised from the encoder of `init`, or from scratch.
pub fn segmentation_params(
    init: Option<&Checkpoint>,
    model: &ModelConfig,
    seed: u64,
) -> Result<Parameters> {
    let mut params = Parameters::init(model, Method::Segmentation, rng::derive_seed(seed, 1))?;
    if let Some(ck) = init {
        if ck.meta.model.vit != model.vit {
            return Err(Error::Config(format!(
                "checkpoint encoder {:?} does not match model encoder {:?}",
                ck.meta.model.vit, model.vit
            )));
        }
        params.load_encoder_from(&ck.params)?;
    }
    Ok(params)
}

/// Supervised fine-tuning with Dice + cross-entropy on a `labeled_ratio`
/// subset of `train`; validation Dice on `val` every `validate_every`
/// epochs is attached to the last trace record of that epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    init: Option<&Checkpoint>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[(Volume, LabelVolume)],
    val: &[(Volume, LabelVolume)],
    labeled_ratio: f64,
    swi: &SlidingWindowConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(model.vit.token_patch)?;
    if let Some((_, l)) = train
        .iter()
        .chain(val)
        .find(|(_, l)| l.num_classes() != model.seg.num_classes)
    {
        return Err(Error::Config(format!(
            "model predicts {} classes, labels have {}",
            model.seg.num_classes,
            l.num_classes()
        )));
    }
    let ids: Vec<usize> = (0..train.len()).collect();
    let chosen = subset_labeled(&ids, labeled_ratio, cfg.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let params = segmentation_params(init, model, cfg.seed)?;
    let mut trainer = Trainer::new(params, cfg.clone());
    let mut data_rng = rng::seeded(cfg.seed, 2);
    let sched = Schedule::new(chosen.len(), cfg);
    let mut trace = Vec::with_capacity(sched.total);
    let mut saved = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.total_epochs {
        let mut order = chosen.clone();
        rng::shuffle(&mut data_rng, &mut order);
        for b in 0..sched.steps_per_epoch {
            let ids = batch_ids(&order, b, cfg.batch_size);
            let lr = sched.lr(step, cfg);
            let mut batch = Vec::with_capacity(ids.len());
            for &i in &ids {
                let (v, l) =
                    crop_sampler(&train[i].0, Some(&train[i].1), cfg.window, &mut data_rng)?;
                batch.push((v, l.expect("label crop")));
            }
            let loss = trainer
                .step(lr, |g, pv| {
                    let losses = batch
                        .iter()
                        .map(|(v, l)| {
                            let logits = unetr_logits(g, model, pv, v)?;
                            dice_ce_loss(g, logits, l.data(), DICE_WEIGHT)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    mean_of(g, &losses)
                })
                .map_err(|e| match e {
                    Error::Diverged(_) => Error::Diverged(step),
                    other => other,
                })?;
            trace.push(TraceRecord {
                step,
                epoch,
                lr,
                loss,
                dice: None,
            });
            step += 1;
        }
        if !val.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.total_epochs) {
            let report = evaluate_with(|v| predict_labels(model, &trainer.params, v, swi), val)?;
            trace.last_mut().expect("at least one step").dice = Some(report);
        }
        save_periodic(
            out_dir,
            "segmentation",
            epoch,
            cfg,
            || {
                Checkpoint::new(
                    Method::Segmentation,
                    model.clone(),
                    step,
                    cfg.seed,
                    trainer.params.clone(),
                )
            },
            &mut saved,
        )?;
    }
    if let Some(dir) = out_dir {
        write_trace(&dir.join("trace.jsonl"), &trace)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(
            Method::Segmentation,
            model.clone(),
            step,
            cfg.seed,
            trainer.params,
        ),
        trace,
        saved,
    })
}

/// `(step, average Dice)` of every validation record, steps counted from 1.
pub fn dice_curve(trace: &[TraceRecord]) -> Vec<(usize, f64)> {
    trace
        .iter()
        .filter_map(|r| r.dice.as_ref().map(|d| (r.step + 1, d.average)))
        .collect()
}

/// First step at which a Dice curve reaches `target`.
pub fn steps_to_reach(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|(_, d)| *d >= target).map(|(s, _)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    fn single(w: f64) -> Parameters {
        let mut p = Parameters::default();
        p.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn adamw_hand_cases() {
        let mut p = single(2.0);
        let mut s = OptState::default();
        adamw_step(&mut p, &grad(0.0), &mut s, 0.1, &cfg(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0]);

        let mut p = single(2.0);
        adamw_step(
            &mut p,
            &grad(0.0),
            &mut OptState::default(),
            0.1,
            &cfg(0.05),
        )
        .unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.995 * 2.0).abs() < 1e-15);

        let mut p = single(1.0);
        adamw_step(&mut p, &grad(1.0), &mut OptState::default(), 0.1, &cfg(0.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let err = adamw_step(
            &mut single(1.0),
            &grad(f64::NAN),
            &mut OptState::default(),
            0.1,
            &cfg(0.0),
        );
        assert!(err.unwrap_err().to_string().contains("`w`"));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 10, 100, 1.0, 0.0), 0.0);
        assert_eq!(lr_at(10, 10, 100, 1.0, 0.0), 1.0);
        assert!((lr_at(100, 10, 100, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_at(9, 10, 100, 1.0, 0.0) - 0.9).abs() < 1e-15);
        assert_eq!(lr_at(0, 0, 10, 0.5, 0.0), 0.5);
    }

    #[test]
    fn subset_sizes_and_identity() {
        let ids: Vec<usize> = (100..124).collect();
        let half = subset_labeled(&ids, 0.5, 3).unwrap();
        assert_eq!(half.len(), 12);
        assert_eq!(half, subset_labeled(&ids, 0.5, 3).unwrap());
        assert_eq!(subset_labeled(&ids, 1.0, 9).unwrap(), ids);
        assert!(subset_labeled(&ids, 0.01, 3).is_err());
        assert!(subset_labeled(&ids, 0.0, 3).is_err());
    }

    #[test]
    fn crop_whole_volume_and_too_large() {
        let v = Volume::zeros([1, 8, 8, 8]);
        let mut r = rng::seeded(0, 0);
        let (c, _) = crop_sampler(&v, None, 8, &mut r).unwrap();
        assert_eq!(c, v);
        assert!(crop_sampler(&v, None, 9, &mut r).is_err());
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        c.validate(8).unwrap();
        assert!(TrainConfig {
            window: 30,
            ..c.clone()
        }
        .validate(8)
        .is_err());
        assert!(TrainConfig {
            warmup_epochs: 11,
            ..c.clone()
        }
        .validate(8)
        .is_err());
        assert_eq!(
            TrainConfig {
                total_epochs: 40,
                ..c
            }
            .checkpoint_cadence(),
            4
        );
    }
}
