//! Masked patch size x masking ratio sweeps.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::infer::evaluate;
use crate::patch::{MaskingConfig, PatchGrid};
use crate::rng;
use crate::train::{finetune, pretrain};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub masked_patch_size: usize,
    pub masking_ratio: f64,
    pub dice_avg: f64,
}

pub const TABLE_HEADER: &str = "method\tmasked_patch_size\tmasking_ratio\tdice_avg";

/// Checks that every cell yields a valid, non-empty mask on training crops.
pub fn validate_grid(base: &RunConfig, patches: &[usize], ratios: &[f64]) -> Result<()> {
    if !base.method.is_mim() {
        return Err(Error::Config(format!(
            "ablation sweeps masked modeling; method {} has no mask",
            base.method.name()
        )));
    }
    if patches.is_empty() || ratios.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let grid = PatchGrid::new(
        [base.pretrain.window; 3],
        base.model.vit.token_patch,
        base.model.vit.channels,
    )?;
    for &q in patches {
        for &r in ratios {
            let m = MaskingConfig {
                masked_patch: q,
                ratio: r,
            };
            let cell = m
                .validate(&grid)
                .map_err(|e| Error::Config(format!("cell ({q}, {r}): {e}")))?;
            let cells: usize = grid.grid.iter().map(|g| g / cell).product();
            if (r * cells as f64).floor() < 1.0 {
                return Err(Error::Config(format!(
                    "cell ({q}, {r}): masks nothing on a {}^3 crop",
                    base.pretrain.window
                )));
            }
        }
    }
    Ok(())
}

/// Pretrain, fine-tune and evaluate once per grid cell, in row-major order
/// with per-cell derived seeds.
pub fn ablate(
    base: &RunConfig,
    patches: &[usize],
    ratios: &[f64],
    unlabeled: &[Volume],
    train: &[(Volume, LabelVolume)],
    val: &[(Volume, LabelVolume)],
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    validate_grid(base, patches, ratios)?;
    let mut rows = Vec::with_capacity(patches.len() * ratios.len());
    for &q in patches {
        for &r in ratios {
            let cell_seed = rng::derive_seed(base.pretrain.seed, rows.len() as u64);
            let mut pre_cfg = base.pretrain.clone();
            pre_cfg.seed = cell_seed;
            let masking = MaskingConfig {
                masked_patch: q,
                ratio: r,
            };
            let pre = pretrain(
                base.method,
                &base.model,
                &pre_cfg,
                &masking,
                unlabeled,
                None,
            )?;
            let mut ft_cfg = base.finetune.clone();
            ft_cfg.seed = cell_seed;
            let ft = finetune(
                Some(&pre.checkpoint),
                &base.model,
                &ft_cfg,
                train,
                &[],
                base.labeled_ratio,
                &base.sliding_window,
                None,
            )?;
            let report = evaluate(&ft.checkpoint, val, &base.sliding_window)?;
            rows.push(AblationRow {
                method: base.method.name().to_string(),
                masked_patch_size: q,
                masking_ratio: r,
                dice_avg: report.average,
            });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\n",
            r.method, r.masked_patch_size, r.masking_ratio, r.dice_avg
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation_rejects_empty_and_misaligned_cells() {
        let mut base = RunConfig::default();
        base.pretrain.window = 64;
        base.finetune.window = 64;
        validate_grid(&base, &[16, 32], &[0.15, 0.75]).unwrap();
        assert!(validate_grid(&base, &[12], &[0.5]).is_err());
        base.pretrain.window = 32;
        assert!(validate_grid(&base, &[32], &[0.15]).is_err());
    }

    #[test]
    fn table_layout() {
        let rows = vec![AblationRow {
            method: "simmim".into(),
            masked_patch_size: 16,
            masking_ratio: 0.75,
            dice_avg: 0.5,
        }];
        assert_eq!(
            format_table(&rows),
            "method\tmasked_patch_size\tmasking_ratio\tdice_avg\nsimmim\t16\t0.75\t0.5000\n"
        );
    }
}
