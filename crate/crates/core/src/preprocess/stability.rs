//! Voxel stability: mean pairwise Pearson correlation of repeated trials.

use ndarray::{ArrayView1, ArrayView2, Axis};

use crate::datamodel::RoiMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// One score per voxel; 0 where the correlation is undefined.
    pub scores: Vec<f64>,
    /// Selected voxels per region, filled in by [`StabilityReport::with_selection`].
    pub per_roi: Vec<(String, Vec<usize>)>,
    pub ratio: Option<f64>,
}

impl StabilityReport {
    pub fn with_selection(mut self, roi: &RoiMap, ratio: f64) -> Result<Self> {
        self.per_roi = select_per_roi(&self, roi, ratio)?;
        self.ratio = Some(ratio);
        Ok(self)
    }

    /// Union of the per-region selections, ascending.
    pub fn selected(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_roi.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        all.sort_unstable();
        all
    }
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `brain` rows are `n_stimuli * repeats`, grouped in consecutive per-stimulus blocks.
pub fn stability_scores(brain: ArrayView2<'_, f64>, repeats: usize) -> Result<StabilityReport> {
    if repeats < 2 {
        return Err(Error::Invalid(format!(
            "stability needs at least 2 trials per stimulus, got {repeats}"
        )));
    }
    if brain.nrows() % repeats != 0 {
        return Err(Error::Invalid(format!(
            "{} rows are not divisible by {repeats} repeats",
            brain.nrows()
        )));
    }
    let n_stimuli = brain.nrows() / repeats;
    // trials[r] is the (stimulus x voxel) response matrix of trial r.
    let trials: Vec<_> = (0..repeats)
        .map(|r| brain.select(Axis(0), &(0..n_stimuli).map(|s| s * repeats + r).collect::<Vec<_>>()))
        .collect();
    let n_pairs = (repeats * (repeats - 1) / 2) as f64;
    let scores = (0..brain.ncols())
        .map(|voxel| {
            let mut total = 0.0;
            for i in 0..repeats {
                for j in i + 1..repeats {
                    total += pearson(trials[i].column(voxel), trials[j].column(voxel)).unwrap_or(0.0);
                }
            }
            total / n_pairs
        })
        .collect();
    Ok(StabilityReport {
        scores,
        per_roi: Vec::new(),
        ratio: None,
    })
}

fn budget(ratio: f64, size: usize) -> usize {
    // The epsilon keeps e.g. 0.15 * 20 = 3.0000000000000004 from rounding up to 4.
    ((ratio * size as f64 - 1e-9).ceil() as usize).clamp(1, size)
}

fn select_per_roi(report: &StabilityReport, roi: &RoiMap, ratio: f64) -> Result<Vec<(String, Vec<usize>)>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("selection ratio must lie in (0, 1], got {ratio}")));
    }
    let n = report.scores.len();
    let mut covered = vec![false; n];
    let mut out = Vec::new();
    for (name, voxels) in roi.regions() {
        if voxels.is_empty() {
            return Err(Error::EmptyRoi(name));
        }
        let mut ranked = voxels.clone();
        for &v in &ranked {
            if v >= n {
                return Err(Error::Invalid(format!("region {name} references voxel {v} of {n}")));
            }
            covered[v] = true;
        }
        // Highest score first, lower index on ties.
        ranked.sort_by(|&a, &b| report.scores[b].total_cmp(&report.scores[a]).then(a.cmp(&b)));
        ranked.truncate(budget(ratio, voxels.len()));
        ranked.sort_unstable();
        out.push((name, ranked));
    }
    if let Some(v) = covered.iter().position(|c| !c) {
        return Err(Error::Invalid(format!("voxel {v} has no region")));
    }
    Ok(out)
}

/// Top `ceil(ratio * |ROI|)` voxels of every region, union in ascending order.
pub fn select_stable(report: &StabilityReport, roi: &RoiMap, ratio: f64) -> Result<Vec<usize>> {
    let per_roi = select_per_roi(report, roi, ratio)?;
    let mut all: Vec<usize> = per_roi.into_iter().flat_map(|(_, v)| v).collect();
    all.sort_unstable();
    Ok(all)
}
