//! Feature preprocessing: per-region voxel stability selection for brain data,
//! then normalization and PCA fitted on seen-class training rows only and
//! applied unchanged to every other split.

mod norm;
mod pca;
mod stability;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::datamodel::{
    read_matrix_f64, write_matrix_f64, ExtraPool, FeatureMatrix, Manifest, ModalKind, NovelSplit,
    RoiMap, SeenSplit, TestSplit, TrimodalDataset, MANIFEST_FILE,
};
use crate::error::{Error, Result};

pub use norm::{apply_norm, fit_norm, NormStats, STD_FLOOR};
pub use pca::{apply_pca, fit_pca, inverse_pca, PcaModel};
pub use stability::{pearson, select_stable, stability_scores, StabilityReport};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Fraction of voxels kept per region; `None` disables stability selection.
    pub stability_ratio: Option<f64>,
    pub pca_variance: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            stability_ratio: Some(0.15),
            pca_variance: 0.99,
        }
    }
}

/// Per-modality normalizer and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTransform {
    pub norm: NormStats,
    pub pca: PcaModel,
}

impl ModalityTransform {
    fn fit(train: ArrayView2<'_, f64>, variance: f64) -> Result<Self> {
        let norm = fit_norm(train)?;
        let pca = fit_pca(apply_norm(&norm, train)?.view(), variance)?;
        Ok(ModalityTransform { norm, pca })
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        apply_pca(&self.pca, apply_norm(&self.norm, x)?.view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessModel {
    pub stability: Option<StabilityReport>,
    /// Raw brain columns kept, ascending.
    pub selected_voxels: Vec<usize>,
    pub raw_brain_dim: usize,
    /// Indexed by [`ModalKind::index`].
    pub transforms: [ModalityTransform; 3],
}

impl PreprocessModel {
    pub fn transform(&self, kind: ModalKind) -> &ModalityTransform {
        &self.transforms[kind.index()]
    }

    /// Selection, trial averaging, normalization and projection for raw brain rows.
    pub fn apply_brain(&self, raw: ArrayView2<'_, f64>, repeats: usize) -> Result<Array2<f64>> {
        if raw.ncols() != self.raw_brain_dim {
            return Err(Error::Shape(format!(
                "brain data has {} columns, preprocessing expects {}",
                raw.ncols(),
                self.raw_brain_dim
            )));
        }
        let selected = raw.select(Axis(1), &self.selected_voxels);
        let averaged = average_trials(selected.view(), repeats)?;
        self.transform(ModalKind::Brain).apply(averaged.view())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        m.set("kind", "preprocess");
        m.set("version", 1);
        m.set("raw_brain_dim", self.raw_brain_dim);
        m.set(
            "selected_voxels",
            self.selected_voxels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        if let Some(report) = &self.stability {
            write_matrix_f64(&dir.join("stability_scores.bvlm"), &row(&report.scores))?;
            m.set("stability_scores", "stability_scores.bvlm");
            if let Some(ratio) = report.ratio {
                m.set("stability_ratio", ratio);
            }
        }
        for kind in ModalKind::ALL {
            let t = self.transform(kind);
            let files = [
                ("norm_mean", row(t.norm.mean.as_slice().unwrap())),
                ("norm_std", row(t.norm.std.as_slice().unwrap())),
                ("pca_components", t.pca.components.clone()),
                ("pca_mean", row(t.pca.mean.as_slice().unwrap())),
                ("pca_ratio", row(&t.pca.explained_ratio)),
            ];
            for (stem, mat) in files {
                let file = format!("{}_{stem}.bvlm", kind.name());
                write_matrix_f64(&dir.join(&file), &mat)?;
                m.set(format!("{stem}.{}", kind.name()), file);
            }
            m.set(format!("pca_target.{}", kind.name()), t.pca.target_variance);
        }
        m.write(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let m = Manifest::read(&path)?;
        let p = path.as_path();
        let read = |key: &str| -> Result<Array2<f64>> { read_matrix_f64(&dir.join(m.require(key, p)?)) };
        let vector = |key: &str| -> Result<Array1<f64>> { Ok(read(key)?.row(0).to_owned()) };
        let selected_voxels = m
            .require("selected_voxels", p)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::format(p, format!("bad voxel index {s}"))))
            .collect::<Result<Vec<usize>>>()?;
        let stability = match m.get("stability_scores") {
            Some(_) => Some(StabilityReport {
                scores: vector("stability_scores")?.to_vec(),
                per_roi: Vec::new(),
                ratio: m.get("stability_ratio").map(|_| m.parse_value("stability_ratio", p)).transpose()?,
            }),
            None => None,
        };
        let load_transform = |kind: ModalKind| -> Result<ModalityTransform> {
            let name = kind.name();
            Ok(ModalityTransform {
                norm: NormStats {
                    mean: vector(&format!("norm_mean.{name}"))?,
                    std: vector(&format!("norm_std.{name}"))?,
                },
                pca: PcaModel {
                    components: read(&format!("pca_components.{name}"))?,
                    mean: vector(&format!("pca_mean.{name}"))?,
                    explained_ratio: vector(&format!("pca_ratio.{name}"))?.to_vec(),
                    target_variance: m.parse_value(&format!("pca_target.{name}"), p)?,
                },
            })
        };
        Ok(PreprocessModel {
            stability,
            selected_voxels,
            raw_brain_dim: m.parse_value("raw_brain_dim", p)?,
            transforms: [
                load_transform(ModalKind::Brain)?,
                load_transform(ModalKind::Visual)?,
                load_transform(ModalKind::Textual)?,
            ],
        })
    }
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Mean over each consecutive block of `repeats` rows.
pub fn average_trials(x: ArrayView2<'_, f64>, repeats: usize) -> Result<Array2<f64>> {
    if repeats == 0 || x.nrows() % repeats != 0 {
        return Err(Error::Invalid(format!(
            "{} rows are not divisible by {repeats} repeats",
            x.nrows()
        )));
    }
    if repeats == 1 {
        return Ok(x.to_owned());
    }
    let n = x.nrows() / repeats;
    let mut out = Array2::zeros((n, x.ncols()));
    for (s, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
        let block = x.slice(ndarray::s![s * repeats..(s + 1) * repeats, ..]);
        dst.assign(&block.mean_axis(Axis(0)).expect("non-empty block"));
    }
    Ok(out)
}

fn first_of_blocks(n_rows: usize, repeats: usize) -> Vec<usize> {
    (0..n_rows / repeats).map(|s| s * repeats).collect()
}

/// Fits the pipeline on seen-class rows and returns the model together with the
/// transformed dataset (one row per stimulus, trials averaged).
pub fn fit_pipeline(ds: &TrimodalDataset, cfg: &PreprocessConfig) -> Result<(PreprocessModel, TrimodalDataset)> {
    ds.validate()?;
    let repeats = ds.repeats_per_stimulus;
    let raw_brain = ds.seen.brain.to_f64();
    let raw_brain_dim = raw_brain.ncols();

    // Single-trial data has nothing to measure stability on; keep every voxel.
    let (stability, selected_voxels) = match cfg.stability_ratio {
        Some(ratio) if repeats >= 2 => {
            let roi = ds
                .roi_map
                .clone()
                .unwrap_or_else(|| RoiMap::single(raw_brain_dim, "all"));
            let report = stability_scores(raw_brain.view(), repeats)?.with_selection(&roi, ratio)?;
            let selected = report.selected();
            (Some(report), selected)
        }
        _ => (None, (0..raw_brain_dim).collect()),
    };

    let stimuli = first_of_blocks(ds.seen.labels.len(), repeats);
    let seen_brain = average_trials(raw_brain.select(Axis(1), &selected_voxels).view(), repeats)?;
    let seen_visual = ds.seen.visual.select_rows(&stimuli).to_f64();
    let seen_textual = ds.seen.textual.select_rows(&stimuli).to_f64();

    let transforms = [
        ModalityTransform::fit(seen_brain.view(), cfg.pca_variance)?,
        ModalityTransform::fit(seen_visual.view(), cfg.pca_variance)?,
        ModalityTransform::fit(seen_textual.view(), cfg.pca_variance)?,
    ];
    let model = PreprocessModel {
        stability,
        selected_voxels,
        raw_brain_dim,
        transforms,
    };

    let project = |kind: ModalKind, m: &FeatureMatrix| -> Result<FeatureMatrix> {
        FeatureMatrix::from_f64(&model.transform(kind).apply(m.to_f64().view())?)
    };
    let seen = SeenSplit {
        brain: FeatureMatrix::from_f64(&model.transform(ModalKind::Brain).apply(seen_brain.view())?)?,
        visual: FeatureMatrix::from_f64(&model.transform(ModalKind::Visual).apply(seen_visual.view())?)?,
        textual: FeatureMatrix::from_f64(&model.transform(ModalKind::Textual).apply(seen_textual.view())?)?,
        labels: ds.seen.labels.select(&stimuli),
    };
    let novel = NovelSplit {
        visual: project(ModalKind::Visual, &ds.novel.visual)?,
        textual: project(ModalKind::Textual, &ds.novel.textual)?,
        labels: ds.novel.labels.clone(),
    };
    let test = match &ds.test {
        Some(t) => Some(TestSplit {
            brain: FeatureMatrix::from_f64(&model.apply_brain(t.brain.to_f64().view(), repeats)?)?,
            labels: t.labels.select(&first_of_blocks(t.labels.len(), repeats)),
        }),
        None => None,
    };
    let extra = ds
        .extra
        .iter()
        .map(|pool| {
            Ok(match pool {
                ExtraPool::Pairs { visual, textual } => ExtraPool::Pairs {
                    visual: project(ModalKind::Visual, visual)?,
                    textual: project(ModalKind::Textual, textual)?,
                },
                ExtraPool::Visual(v) => ExtraPool::Visual(project(ModalKind::Visual, v)?),
                ExtraPool::Textual(t) => ExtraPool::Textual(project(ModalKind::Textual, t)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let out = TrimodalDataset {
        classes: ds.classes.clone(),
        seen,
        novel,
        test,
        extra,
        repeats_per_stimulus: 1,
        roi_map: None,
    };
    out.validate()?;
    Ok((model, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_generate, SynthConfig};
    use ndarray::array;

    fn small() -> SynthConfig {
        SynthConfig {
            n_seen_classes: 6,
            n_novel_classes: 3,
            samples_per_class: 4,
            test_samples_per_class: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn averaging_blocks() {
        let x = array![[1.0, 0.0], [3.0, 2.0], [5.0, 5.0], [7.0, 7.0]];
        assert_eq!(average_trials(x.view(), 2).unwrap(), array![[2.0, 1.0], [6.0, 6.0]]);
        assert!(average_trials(x.view(), 3).is_err());
    }

    #[test]
    fn pipeline_shapes() {
        let ds = synth_generate(&small()).unwrap();
        let (model, out) = fit_pipeline(&ds, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.repeats_per_stimulus, 1);
        assert_eq!(out.seen.labels.len(), 6 * 4);
        assert_eq!(out.test.as_ref().unwrap().brain.rows(), 3 * 2);
        // 3 regions of 20 voxels at 15% -> 3 voxels each.
        assert_eq!(model.selected_voxels.len(), 9);
        assert_eq!(out.dim(ModalKind::Brain), model.transform(ModalKind::Brain).pca.n_components());
    }

    #[test]
    fn single_trial_data_skips_selection() {
        let ds = synth_generate(&SynthConfig {
            repeats_per_stimulus: 1,
            ..small()
        })
        .unwrap();
        let (model, _) = fit_pipeline(&ds, &PreprocessConfig::default()).unwrap();
        assert!(model.stability.is_none());
        assert_eq!(model.selected_voxels.len(), 60);
    }

    #[test]
    fn stats_come_from_training_rows_only() {
        let ds = synth_generate(&small()).unwrap();
        let cfg = PreprocessConfig {
            stability_ratio: None,
            pca_variance: 0.99,
        };
        let (model, _) = fit_pipeline(&ds, &cfg).unwrap();
        let repeats = ds.repeats_per_stimulus;
        let train = average_trials(ds.seen.brain.to_f64().view(), repeats).unwrap();
        let refit = ModalityTransform::fit(train.view(), 0.99).unwrap();
        assert_eq!(refit, *model.transform(ModalKind::Brain));

        let test = average_trials(ds.test.as_ref().unwrap().brain.to_f64().view(), repeats).unwrap();
        let both = ndarray::concatenate(Axis(0), &[train.view(), test.view()]).unwrap();
        let leaked = ModalityTransform::fit(both.view(), 0.99).unwrap();
        assert_ne!(leaked.norm, model.transform(ModalKind::Brain).norm);
        assert_ne!(leaked.pca.mean, model.transform(ModalKind::Brain).pca.mean);
    }

    #[test]
    fn model_save_load_round_trip() {
        let ds = synth_generate(&small()).unwrap();
        let (model, _) = fit_pipeline(&ds, &PreprocessConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = PreprocessModel::load(dir.path()).unwrap();
        assert_eq!(loaded.selected_voxels, model.selected_voxels);
        assert_eq!(loaded.transforms, model.transforms);
        assert_eq!(loaded.stability.unwrap().scores, model.stability.unwrap().scores);
    }
}
