//! Seeded synthetic trimodal data with a shared ground-truth latent.
//!
//! Each class owns a latent center; every stimulus draws `z* = center + jitter`
//! and each modality observes `tanh(A_m z* + b_m) + noise` through its own fixed
//! random map. A fraction of brain voxels ignore `z*` and carry trial noise only.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    ClassSplit, ExtraPool, FeatureMatrix, LabelVector, NovelSplit, RoiMap, SeenSplit, TestSplit,
    TrimodalDataset,
};
use crate::error::{Error, Result};

const ROI_NAMES: [&str; 7] = ["V1", "V2", "V3", "hV4", "LOC", "FFA", "PPA"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_seen_classes: usize,
    pub n_novel_classes: usize,
    pub samples_per_class: usize,
    /// Held-out novel-class brain stimuli per class.
    pub test_samples_per_class: usize,
    pub latent_true_dim: usize,
    pub dim_brain: usize,
    pub dim_visual: usize,
    pub dim_textual: usize,
    pub noise_brain: f64,
    pub noise_visual: f64,
    pub noise_textual: f64,
    /// Standard deviation of class centers around the origin.
    pub class_spread: f64,
    /// Standard deviation of per-stimulus latents around their class center.
    pub within_class_jitter: f64,
    /// Scale of the random linear map feeding the `tanh`.
    pub map_gain: f64,
    pub repeats_per_stimulus: usize,
    /// Fraction of brain voxels that carry no stimulus signal.
    pub noise_voxel_fraction: f64,
    pub n_rois: usize,
    pub extra_pairs: usize,
    pub extra_visual: usize,
    pub extra_textual: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_seen_classes: 40,
            n_novel_classes: 10,
            samples_per_class: 20,
            test_samples_per_class: 10,
            latent_true_dim: 8,
            dim_brain: 60,
            dim_visual: 50,
            dim_textual: 30,
            noise_brain: 0.5,
            noise_visual: 0.1,
            noise_textual: 0.1,
            class_spread: 1.0,
            within_class_jitter: 0.3,
            map_gain: 1.0,
            repeats_per_stimulus: 3,
            noise_voxel_fraction: 0.2,
            n_rois: 3,
            extra_pairs: 0,
            extra_visual: 0,
            extra_textual: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_seen_classes", self.n_seen_classes),
            ("n_novel_classes", self.n_novel_classes),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
            ("latent_true_dim", self.latent_true_dim),
            ("dim_brain", self.dim_brain),
            ("dim_visual", self.dim_visual),
            ("dim_textual", self.dim_textual),
            ("repeats_per_stimulus", self.repeats_per_stimulus),
            ("n_rois", self.n_rois),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let scales = [
            self.noise_brain,
            self.noise_visual,
            self.noise_textual,
            self.class_spread,
            self.within_class_jitter,
            self.map_gain,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise and scale parameters must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.noise_voxel_fraction) {
            return Err(Error::Config("noise_voxel_fraction must lie in [0, 1)".into()));
        }
        if self.n_rois > self.dim_brain {
            return Err(Error::Config("more regions than brain voxels".into()));
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let e: f64 = StandardNormal.sample(rng);
        e * scale
    })
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let e: f64 = StandardNormal.sample(rng);
        e * scale
    })
}

/// Brain voxels that carry no stimulus signal, ascending.
pub fn noise_voxel_indices(cfg: &SynthConfig) -> Vec<usize> {
    let n_noise = (cfg.noise_voxel_fraction * cfg.dim_brain as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_6576_6f78);
    let mut voxels: Vec<usize> = (0..cfg.dim_brain).collect();
    voxels.shuffle(&mut rng);
    let mut out = voxels[..n_noise].to_vec();
    out.sort_unstable();
    out
}

struct ModalityMap {
    weights: Array2<f64>,
    bias: Array1<f64>,
    noise: f64,
    /// Columns with no dependence on the latent.
    silent: Vec<bool>,
}

impl ModalityMap {
    fn new(rng: &mut ChaCha8Rng, dim: usize, latent: usize, gain: f64, noise: f64) -> Self {
        ModalityMap {
            weights: normal_matrix(rng, dim, latent, gain / (latent as f64).sqrt()),
            bias: normal_vector(rng, dim, 0.2),
            noise,
            silent: vec![false; dim],
        }
    }

    fn observe(&self, rng: &mut ChaCha8Rng, z: &Array1<f64>) -> Vec<f32> {
        let clean = (self.weights.dot(z) + &self.bias).mapv(f64::tanh);
        clean
            .iter()
            .zip(&self.silent)
            .map(|(&c, &silent)| {
                let e: f64 = StandardNormal.sample(rng);
                let signal = if silent { 0.0 } else { c };
                (signal + self.noise * e) as f32
            })
            .collect()
    }
}

/// Generates a dataset; a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TrimodalDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.latent_true_dim;
    let n_classes = cfg.n_seen_classes + cfg.n_novel_classes;

    let mut brain = ModalityMap::new(&mut rng, cfg.dim_brain, latent, cfg.map_gain, cfg.noise_brain);
    for v in noise_voxel_indices(cfg) {
        brain.silent[v] = true;
    }
    let visual = ModalityMap::new(&mut rng, cfg.dim_visual, latent, cfg.map_gain, cfg.noise_visual);
    let textual = ModalityMap::new(&mut rng, cfg.dim_textual, latent, cfg.map_gain, cfg.noise_textual);
    let centers: Vec<Array1<f64>> = (0..n_classes)
        .map(|_| normal_vector(&mut rng, latent, cfg.class_spread))
        .collect();
    let draw_latent = |rng: &mut ChaCha8Rng, center: &Array1<f64>| {
        center + &normal_vector(rng, latent, cfg.within_class_jitter)
    };

    let repeats = cfg.repeats_per_stimulus;
    let mut seen_b = Vec::new();
    let mut seen_v = Vec::new();
    let mut seen_t = Vec::new();
    let mut seen_labels = Vec::new();
    for class in 0..cfg.n_seen_classes {
        for _ in 0..cfg.samples_per_class {
            let z = draw_latent(&mut rng, &centers[class]);
            let xv = visual.observe(&mut rng, &z);
            let xt = textual.observe(&mut rng, &z);
            for _ in 0..repeats {
                seen_b.extend(brain.observe(&mut rng, &z));
                seen_v.extend_from_slice(&xv);
                seen_t.extend_from_slice(&xt);
                seen_labels.push(class as u32);
            }
        }
    }

    let mut novel_v = Vec::new();
    let mut novel_t = Vec::new();
    let mut novel_labels = Vec::new();
    for class in cfg.n_seen_classes..n_classes {
        for _ in 0..cfg.samples_per_class {
            let z = draw_latent(&mut rng, &centers[class]);
            novel_v.extend(visual.observe(&mut rng, &z));
            novel_t.extend(textual.observe(&mut rng, &z));
            novel_labels.push(class as u32);
        }
    }

    let mut test_b = Vec::new();
    let mut test_labels = Vec::new();
    for class in cfg.n_seen_classes..n_classes {
        for _ in 0..cfg.test_samples_per_class {
            let z = draw_latent(&mut rng, &centers[class]);
            for _ in 0..repeats {
                test_b.extend(brain.observe(&mut rng, &z));
                test_labels.push(class as u32);
            }
        }
    }

    // Label-free extra data: latents drawn around fresh random centers.
    let extra_latent = |rng: &mut ChaCha8Rng| {
        let center = normal_vector(rng, latent, cfg.class_spread);
        draw_latent(rng, &center)
    };
    let mut extra = Vec::new();
    if cfg.extra_pairs > 0 {
        let mut v = Vec::new();
        let mut t = Vec::new();
        for _ in 0..cfg.extra_pairs {
            let z = extra_latent(&mut rng);
            v.extend(visual.observe(&mut rng, &z));
            t.extend(textual.observe(&mut rng, &z));
        }
        extra.push(ExtraPool::Pairs {
            visual: FeatureMatrix::from_rows(cfg.extra_pairs, cfg.dim_visual, v)?,
            textual: FeatureMatrix::from_rows(cfg.extra_pairs, cfg.dim_textual, t)?,
        });
    }
    if cfg.extra_visual > 0 {
        let mut v = Vec::new();
        for _ in 0..cfg.extra_visual {
            let z = extra_latent(&mut rng);
            v.extend(visual.observe(&mut rng, &z));
        }
        extra.push(ExtraPool::Visual(FeatureMatrix::from_rows(cfg.extra_visual, cfg.dim_visual, v)?));
    }
    if cfg.extra_textual > 0 {
        let mut t = Vec::new();
        for _ in 0..cfg.extra_textual {
            let z = extra_latent(&mut rng);
            t.extend(textual.observe(&mut rng, &z));
        }
        extra.push(ExtraPool::Textual(FeatureMatrix::from_rows(
            cfg.extra_textual,
            cfg.dim_textual,
            t,
        )?));
    }

    let n_seen_rows = seen_labels.len();
    let n_novel_rows = novel_labels.len();
    let n_test_rows = test_labels.len();
    let roi_assignment = (0..cfg.dim_brain)
        .map(|v| {
            let region = v * cfg.n_rois / cfg.dim_brain;
            let name = ROI_NAMES
                .get(region)
                .map_or_else(|| format!("roi{region}"), |s| s.to_string());
            (v, name)
        })
        .collect();

    let ds = TrimodalDataset {
        classes: ClassSplit::new(
            0..cfg.n_seen_classes as u32,
            cfg.n_seen_classes as u32..n_classes as u32,
        )?,
        seen: SeenSplit {
            brain: FeatureMatrix::from_rows(n_seen_rows, cfg.dim_brain, seen_b)?,
            visual: FeatureMatrix::from_rows(n_seen_rows, cfg.dim_visual, seen_v)?,
            textual: FeatureMatrix::from_rows(n_seen_rows, cfg.dim_textual, seen_t)?,
            labels: LabelVector::new(seen_labels, n_classes as u32)?,
        },
        novel: NovelSplit {
            visual: FeatureMatrix::from_rows(n_novel_rows, cfg.dim_visual, novel_v)?,
            textual: FeatureMatrix::from_rows(n_novel_rows, cfg.dim_textual, novel_t)?,
            labels: LabelVector::new(novel_labels, n_classes as u32)?,
        },
        test: Some(TestSplit {
            brain: FeatureMatrix::from_rows(n_test_rows, cfg.dim_brain, test_b)?,
            labels: LabelVector::new(test_labels, n_classes as u32)?,
        }),
        extra,
        repeats_per_stimulus: repeats,
        roi_map: Some(RoiMap::new(roi_assignment)),
    };
    ds.validate()?;
    Ok(ds)
}
