use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use volmim_core::config::RunConfig;
use volmim_core::experiment::{ablate, format_table, validate_grid};
use volmim_core::infer::{evaluate, reconstruct_dump};
use volmim_core::models::Checkpoint;
use volmim_core::train::{finetune, pretrain};
use volmim_core::volume::{
    load_labels, load_volume, save_labels, save_volume, synth_generate, LabelVolume, Volume,
};

#[derive(Parser)]
#[command(
    name = "volmim",
    version,
    about = "Masked image modeling pretraining for 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volume/label pairs.
    Synth(SynthArgs),
    /// Self-supervised pretraining on unlabeled volumes.
    Pretrain(PretrainArgs),
    /// Supervised segmentation fine-tuning.
    Finetune(FinetuneArgs),
    /// Per-class Dice of a segmentation checkpoint.
    Eval(EvalArgs),
    /// Dump original / masked / reconstructed slices as PGM images.
    Reconstruct(ReconstructArgs),
    /// Pretrain, fine-tune and evaluate over a masked patch size x ratio grid.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `pretrain.base_lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of segmentation classes, background included.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct MaskArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    masked_patch: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Cubic edge, or D,H,W.
    #[arg(long, default_value = "48")]
    shape: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory of `.vol` volumes.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pretrained checkpoint; omit to train from scratch.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// Directory of `.vol` / `.lab` pairs.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Writes `dice.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `.vol` file.
    #[arg(long)]
    volume: PathBuf,
    /// Comma-separated slice depths; defaults to the middle slice.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32")]
    patches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.15,0.75")]
    ratios: Vec<f64>,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to repeat a run: pass the file back as `--config`
/// with the same inputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    seed: u64,
    config: RunConfig,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

const MANIFEST: &str = "manifest.json";

impl ConfigArgs {
    fn resolve(&self, flags: Vec<String>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => Some(config_text(path)?),
            None => None,
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("pretrain.seed={s}"));
            overrides.push(format!("finetune.seed={s}"));
        }
        if let Some(c) = self.classes {
            overrides.push(format!("model.seg.num_classes={c}"));
        }
        overrides.extend(flags);
        Ok(RunConfig::resolve(text.as_deref(), &overrides)?)
    }
}

impl MaskArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(m) = &self.method {
            out.push(format!("method=\"{m}\""));
        }
        if let Some(r) = self.mask_ratio {
            out.push(format!("masking.ratio={r:?}"));
        }
        if let Some(q) = self.masked_patch {
            out.push(format!("masking.masked_patch={q}"));
        }
        out
    }
}

/// Reads a TOML config, or the config embedded in a manifest.
fn config_text(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a run manifest", path.display()))?;
        return Ok(m.config.to_toml());
    }
    Ok(text)
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    seed: u64,
    config: &RunConfig,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let m = RunManifest {
        subcommand: subcommand.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: config.clone(),
        inputs,
        artifacts,
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Checkpoint paths a run with `epochs` and `cadence` will write.
fn planned_checkpoints(out: &Path, tag: &str, epochs: usize, cadence: usize) -> Vec<PathBuf> {
    (1..=epochs)
        .filter(|e| e % cadence == 0 || *e == epochs)
        .map(|e| out.join(format!("{tag}-epoch{e:04}.ckpt")))
        .collect()
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad shape `{s}`"))?;
    match parts.as_slice() {
        [e] => Ok([*e; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => bail!("shape `{s}` needs 1 or 3 extents"),
    }
}

fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "vol"));
    files.sort();
    if files.is_empty() {
        bail!("no .vol files in {}", dir.display());
    }
    Ok(files)
}

fn load_unlabeled(dir: &Path) -> Result<Vec<Volume>> {
    volume_files(dir)?
        .iter()
        .map(|p| load_volume(p).map_err(Into::into))
        .collect()
}

fn load_labeled(dir: &Path) -> Result<Vec<(Volume, LabelVolume)>> {
    volume_files(dir)?
        .iter()
        .map(|p| {
            let lab = p.with_extension("lab");
            if !lab.exists() {
                bail!("{} has no label file {}", p.display(), lab.display());
            }
            Ok((load_volume(p)?, load_labels(&lab)?))
        })
        .collect()
}

fn synth(a: &SynthArgs) -> Result<()> {
    let shape = parse_shape(&a.shape)?;
    let pairs = synth_generate(a.seed, a.count, shape, a.classes)?;
    let stems: Vec<PathBuf> = (0..a.count)
        .map(|i| a.out.join(format!("case{i:03}")))
        .collect();
    let artifacts = stems
        .iter()
        .flat_map(|s| ["vol", "volh", "lab", "labh"].map(|e| s.with_extension(e)))
        .collect();
    let config = RunConfig::resolve(None, &[format!("model.seg.num_classes={}", a.classes)])?;
    write_manifest(&a.out, "synth", a.seed, &config, vec![], artifacts)?;
    for ((v, l), stem) in pairs.iter().zip(&stems) {
        save_volume(v, stem)?;
        save_labels(l, stem)?;
    }
    println!(
        "wrote {} pairs of {shape:?} to {}",
        a.count,
        a.out.display()
    );
    Ok(())
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut flags = a.mask.overrides();
    if let Some(e) = a.epochs {
        flags.push(format!("pretrain.total_epochs={e}"));
    }
    let cfg = a.cfg.resolve(flags)?;
    let tc = &cfg.pretrain;
    let mut artifacts = planned_checkpoints(
        &a.out,
        cfg.method.name(),
        tc.total_epochs,
        tc.checkpoint_cadence(),
    );
    artifacts.push(a.out.join("trace.jsonl"));
    write_manifest(
        &a.out,
        "pretrain",
        tc.seed,
        &cfg,
        vec![a.data.clone()],
        artifacts,
    )?;
    let data = load_unlabeled(&a.data)?;
    let outcome = pretrain(
        cfg.method,
        &cfg.model,
        tc,
        &cfg.masking,
        &data,
        Some(&a.out),
    )?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{} steps, final loss {last:.6}, checkpoint {}",
        outcome.trace.len(),
        outcome
            .saved
            .last()
            .map_or(String::new(), |p| p.display().to_string())
    );
    Ok(())
}

fn run_finetune(a: &FinetuneArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(e) = a.epochs {
        flags.push(format!("finetune.total_epochs={e}"));
    }
    if let Some(r) = a.labeled_ratio {
        flags.push(format!("labeled_ratio={r:?}"));
    }
    let mut cfg = a.cfg.resolve(flags)?;
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &init {
        // The encoder shape is fixed by the checkpoint.
        cfg.model.vit = ck.meta.model.vit.clone();
        cfg.validate()?;
    }
    let tc = &cfg.finetune;
    let mut artifacts = planned_checkpoints(
        &a.out,
        "segmentation",
        tc.total_epochs,
        tc.checkpoint_cadence(),
    );
    artifacts.push(a.out.join("trace.jsonl"));
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.val.clone());
    inputs.extend(a.init.clone());
    write_manifest(&a.out, "finetune", tc.seed, &cfg, inputs, artifacts)?;
    let train = load_labeled(&a.train)?;
    let val = match &a.val {
        Some(d) => load_labeled(d)?,
        None => Vec::new(),
    };
    let outcome = finetune(
        init.as_ref(),
        &cfg.model,
        tc,
        &train,
        &val,
        cfg.labeled_ratio,
        &cfg.sliding_window,
        Some(&a.out),
    )?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    print!("{} steps, final loss {last:.6}", outcome.trace.len());
    if let Some(d) = outcome.trace.iter().rev().find_map(|r| r.dice.as_ref()) {
        print!(", validation dice {:.4}", d.average);
    }
    println!();
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.resolve(Vec::new())?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(out) = &a.out {
        write_manifest(
            out,
            "eval",
            ck.meta.seed,
            &cfg,
            vec![a.checkpoint.clone(), a.data.clone()],
            vec![out.join("dice.json")],
        )?;
    }
    let data = load_labeled(&a.data)?;
    let report = evaluate(&ck, &data, &cfg.sliding_window)?;
    print!("{}", report.to_table(None));
    if let Some(out) = &a.out {
        fs::write(out.join("dice.json"), report.to_json() + "\n")?;
    }
    Ok(())
}

fn run_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let cfg = a.cfg.resolve(a.mask.overrides())?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let v = load_volume(&a.volume)?;
    let depths = if a.depths.is_empty() {
        vec![v.extents()[0] / 2]
    } else {
        a.depths.clone()
    };
    let artifacts = depths
        .iter()
        .flat_map(|z| {
            ["original", "masked", "recon"].map(|k| a.out.join(format!("slice{z:03}_{k}.pgm")))
        })
        .collect();
    let seed = cfg.pretrain.seed;
    write_manifest(
        &a.out,
        "reconstruct",
        seed,
        &cfg,
        vec![a.checkpoint.clone(), a.volume.clone()],
        artifacts,
    )?;
    let written = reconstruct_dump(&ck, &v, &cfg.masking, &depths, &a.out, seed)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let flags = a.method.iter().map(|m| format!("method=\"{m}\"")).collect();
    let cfg = a.cfg.resolve(flags)?;
    validate_grid(&cfg, &a.patches, &a.ratios)?;
    let table = a.out.join("ablation.tsv");
    write_manifest(
        &a.out,
        "ablate",
        cfg.pretrain.seed,
        &cfg,
        vec![a.unlabeled.clone(), a.train.clone(), a.val.clone()],
        vec![table.clone()],
    )?;
    let unlabeled = load_unlabeled(&a.unlabeled)?;
    let train = load_labeled(&a.train)?;
    let val = load_labeled(&a.val)?;
    let rows = ablate(&cfg, &a.patches, &a.ratios, &unlabeled, &train, &val)?;
    let text = format_table(&rows);
    fs::write(&table, &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => run_eval(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with status 2 inside clap.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
