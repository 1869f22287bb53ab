use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::datamodel::TrimodalDataset;
use crate::decode::{decode_dataset, DecodeOptions};
use crate::error::{Error, Result};
use crate::gaussian::PosteriorKind;
use crate::train::{train_run, RunOptions, TrainConfig};

/// Which regularizers stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoIntra,
    NoInter,
    ElboOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoIntra, Variant::NoInter, Variant::ElboOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntra => "no-intra",
            Variant::NoInter => "no-inter",
            Variant::ElboOnly => "elbo-only",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (intra_off, inter_off) = match self {
            Variant::Full => (false, false),
            Variant::NoIntra => (true, false),
            Variant::NoInter => (false, true),
            Variant::ElboOnly => (true, true),
        };
        TrainConfig {
            intra_off,
            inter_off,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, no-intra, no-inter, elbo-only)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub posterior: PosteriorKind,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Trains and decodes every variant x posterior x seed combination, in that
/// nesting order. `on_row` sees each result as it completes.
pub fn run_ablation(
    ds: &TrimodalDataset,
    base: &TrainConfig,
    variants: &[Variant],
    posteriors: &[PosteriorKind],
    seeds: &[u64],
    decode: &DecodeOptions,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &posterior in posteriors {
            for &seed in seeds {
                let cfg = TrainConfig {
                    posterior_type: posterior,
                    seed,
                    ..variant.apply(base)
                };
                let trained = train_run(ds, &cfg, &RunOptions::default())?;
                let (_, report) = decode_dataset(&trained.checkpoint.params, ds, decode)?;
                let row = AblationRow {
                    variant,
                    posterior,
                    seed,
                    top1: report.top1(),
                    top5: report.top5(),
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean top-1 and top-5 over the rows of one variant and posterior.
pub fn ablation_mean(rows: &[AblationRow], variant: Variant, posterior: PosteriorKind) -> Option<(f64, f64)> {
    let group: Vec<&AblationRow> = rows
        .iter()
        .filter(|r| r.variant == variant && r.posterior == posterior)
        .collect();
    if group.is_empty() {
        return None;
    }
    let n = group.len() as f64;
    Some((
        group.iter().map(|r| r.top1).sum::<f64>() / n,
        group.iter().map(|r| r.top5).sum::<f64>() / n,
    ))
}

/// One line per run, then one `mean` line per variant and posterior.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,posterior,seed,top1,top5\n");
    let mut groups: Vec<(Variant, PosteriorKind)> = Vec::new();
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.posterior, r.seed, r.top1, r.top5);
        if !groups.contains(&(r.variant, r.posterior)) {
            groups.push((r.variant, r.posterior));
        }
    }
    for (v, p) in groups {
        let (top1, top5) = ablation_mean(rows, v, p).expect("group has rows");
        let _ = writeln!(s, "{v},{p},mean,{top1},{top5}");
    }
    s
}
