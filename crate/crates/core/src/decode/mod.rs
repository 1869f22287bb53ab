//! Zero-shot decoding: latent embeddings of modality subsets, a one-vs-rest
//! RBF SVM trained on novel-class visual/textual latents, brain-side
//! classification reports, and the latent-space analyses.

mod analysis;
mod svm;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};

use crate::datamodel::{ModalKind, NovelSplit, TrimodalDataset};
use crate::error::{Error, Result};
use crate::gaussian::ModalitySet;
use crate::nets::{encode, ModelParams};
use crate::objectives::BatchView;

pub use analysis::{
    class_means, cosine_similarity_matrix, cross_modal_generate, off_diagonal_stats, pearson_match, voxel_contribution,
    VoxelWeightMap,
};
pub use svm::{rank_classes, rbf, smo_binary, svm_fit, svm_predict_topk, BinarySvm, SvmConfig, SvmModel};

/// Posterior means of the product of `subset`'s experts, one row per sample.
pub fn embed(params: &ModelParams, batch: &BatchView, subset: ModalitySet) -> Result<Array2<f64>> {
    if subset.is_empty() {
        return Err(Error::Invalid("cannot embed an empty modality subset".into()));
    }
    let mut experts = Vec::new();
    for kind in subset.kinds() {
        let x = batch
            .block(kind)
            .ok_or_else(|| Error::Invalid(format!("missing {} features for subset {subset}", kind.name())))?;
        experts.push(encode(params.encoder(kind), x.view())?);
    }
    if experts.len() == 1 {
        return Ok(experts.pop().expect("one expert").mean);
    }
    let shape = experts[0].mean.dim();
    let mut precision = Array2::<f64>::zeros(shape);
    let mut weighted = Array2::<f64>::zeros(shape);
    for e in &experts {
        let p = e.logvar.mapv(|v| (-v).exp());
        weighted += &(&p * &e.mean);
        precision += &p;
    }
    Ok(weighted / precision)
}

/// Which latents the classifier is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    /// A non-empty subset of `{v, t}`.
    pub modalities: ModalitySet,
    /// With `{v, t}`, train on the union of the `{v}`, `{t}` and `{v, t}`
    /// latents of each sample; otherwise on `modalities` alone.
    pub union_subsets: bool,
    pub svm: SvmConfig,
    pub k_list: Vec<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            modalities: ModalitySet::from_kinds([ModalKind::Visual, ModalKind::Textual]),
            union_subsets: true,
            svm: SvmConfig::default(),
            k_list: vec![1, 5],
        }
    }
}

impl DecodeOptions {
    pub fn training_subsets(&self) -> Result<Vec<ModalitySet>> {
        let vt = ModalitySet::from_kinds([ModalKind::Visual, ModalKind::Textual]);
        if self.modalities.is_empty() || !self.modalities.is_subset_of(vt) {
            return Err(Error::Config(format!(
                "classifier modalities must be a non-empty subset of v,t, got `{}`",
                self.modalities
            )));
        }
        Ok(if self.modalities == vt && self.union_subsets {
            vec![
                ModalitySet::single(ModalKind::Visual),
                ModalitySet::single(ModalKind::Textual),
                vt,
            ]
        } else {
            vec![self.modalities]
        })
    }
}

/// An SVM together with the latent subsets it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClassifier {
    pub svm: SvmModel,
    pub modalities: ModalitySet,
    pub subsets: Vec<ModalitySet>,
}

fn novel_batch(novel: &NovelSplit) -> Result<BatchView> {
    BatchView::new(vec![
        (ModalKind::Visual, novel.visual.to_f64()),
        (ModalKind::Textual, novel.textual.to_f64()),
    ])
}

/// Latents and labels the classifier is trained on, subset-major.
pub fn classifier_training_set(
    params: &ModelParams,
    novel: &NovelSplit,
    subsets: &[ModalitySet],
) -> Result<(Array2<f64>, Vec<u32>)> {
    let batch = novel_batch(novel)?;
    let blocks = subsets
        .iter()
        .map(|s| embed(params, &batch, *s))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let latents = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let labels = subsets.iter().flat_map(|_| novel.labels.entries().iter().copied()).collect();
    Ok((latents, labels))
}

pub fn fit_classifier(params: &ModelParams, novel: &NovelSplit, opts: &DecodeOptions) -> Result<LatentClassifier> {
    let subsets = opts.training_subsets()?;
    let (latents, labels) = classifier_training_set(params, novel, &subsets)?;
    Ok(LatentClassifier {
        svm: svm_fit(latents.view(), &labels, &opts.svm)?,
        modalities: opts.modalities,
        subsets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub class: u32,
    pub n: usize,
    /// Accuracy for each entry of the report's `k_list`.
    pub topk: Vec<f64>,
}

/// Top-k accuracies of brain-side decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub modalities: ModalitySet,
    pub classes: Vec<u32>,
    pub n_test: usize,
    pub k_list: Vec<usize>,
    pub topk: Vec<f64>,
    pub per_class: Vec<ClassAccuracy>,
    /// Counts of (true class, top-1 class), indexed like `classes`.
    pub confusion: Array2<usize>,
    /// Per-class top-1 gain over a baseline report.
    pub gains: Option<Vec<f64>>,
}

fn tags(set: ModalitySet) -> String {
    set.kinds().map(ModalKind::tag).collect()
}

impl DecodeReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|i| self.topk[i])
    }

    pub fn top1(&self) -> f64 {
        self.accuracy(1).unwrap_or(f64::NAN)
    }

    pub fn top5(&self) -> f64 {
        self.accuracy(5).unwrap_or(f64::NAN)
    }

    /// Accuracy of uniform guessing.
    pub fn chance(&self, k: usize) -> f64 {
        k as f64 / self.classes.len() as f64
    }

    /// Adds per-class top-1 gains relative to `baseline`.
    pub fn with_gains(mut self, baseline: &DecodeReport) -> Result<Self> {
        if baseline.classes != self.classes {
            return Err(Error::Invalid("reports cover different classes".into()));
        }
        let (Some(i), Some(j)) = (
            self.k_list.iter().position(|&k| k == 1),
            baseline.k_list.iter().position(|&k| k == 1),
        ) else {
            return Err(Error::Invalid("gains need top-1 accuracies in both reports".into()));
        };
        self.gains = Some(
            self.per_class
                .iter()
                .zip(&baseline.per_class)
                .map(|(a, b)| a.topk[i] - b.topk[j])
                .collect(),
        );
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "modalities,{}", tags(self.modalities));
        let _ = writeln!(s, "n_test,{}", self.n_test);
        let _ = writeln!(s, "n_classes,{}", self.classes.len());
        for (k, acc) in self.k_list.iter().zip(&self.topk) {
            let _ = writeln!(s, "top{k},{acc}");
        }
        for k in &self.k_list {
            let _ = writeln!(s, "chance_top{k},{}", self.chance(*k));
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,n");
        for k in &self.k_list {
            let _ = write!(s, ",top{k}");
        }
        s.push_str(",gain\n");
        for (i, c) in self.per_class.iter().enumerate() {
            let _ = write!(s, "{},{}", c.class, c.n);
            for acc in &c.topk {
                let _ = write!(s, ",{acc}");
            }
            let gain = self.gains.as_ref().map_or(String::new(), |g| g[i].to_string());
            let _ = writeln!(s, ",{gain}");
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(self.confusion.rows()) {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `{stem}.csv`, `{stem}_per_class.csv` and `{stem}_confusion.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (suffix, text) in [
            ("", self.to_csv()),
            ("_per_class", self.per_class_csv()),
            ("_confusion", self.confusion_csv()),
        ] {
            let path = dir.join(format!("{stem}{suffix}.csv"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Embeds each brain row through `{b}`, ranks the classifier's classes and
/// scores the top-k lists.
pub fn evaluate_decoding(
    params: &ModelParams,
    clf: &LatentClassifier,
    test_brain: &Array2<f64>,
    labels: &[u32],
    k_list: &[usize],
) -> Result<DecodeReport> {
    let classes = &clf.svm.classes;
    if test_brain.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} brain rows vs {} labels", test_brain.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("no test samples".into()));
    }
    let truth: Vec<usize> = labels
        .iter()
        .map(|&l| {
            clf.svm
                .class_index(l)
                .ok_or_else(|| Error::Invalid(format!("test label {l} is not a classifier class")))
        })
        .collect::<Result<_>>()?;
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > classes.len()) {
        return Err(Error::Invalid(format!("top-{k} is undefined for {} classes", classes.len())));
    }
    let batch = BatchView::new(vec![(ModalKind::Brain, test_brain.clone())])?;
    let latents = embed(params, &batch, ModalitySet::single(ModalKind::Brain))?;
    let kmax = k_list.iter().copied().max().unwrap_or(1).max(1);

    let mut hits = vec![vec![0usize; k_list.len()]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let mut confusion = Array2::zeros((classes.len(), classes.len()));
    for (row, &t) in latents.rows().into_iter().zip(&truth) {
        let ranked = rank_classes(&clf.svm.decision_values(row)?, kmax);
        counts[t] += 1;
        confusion[[t, ranked[0]]] += 1;
        for (slot, &k) in k_list.iter().enumerate() {
            if ranked[..k].contains(&t) {
                hits[t][slot] += 1;
            }
        }
    }
    let n = labels.len();
    let topk = (0..k_list.len())
        .map(|slot| hits.iter().map(|h| h[slot]).sum::<usize>() as f64 / n as f64)
        .collect();
    let per_class = classes
        .iter()
        .enumerate()
        .filter(|(i, _)| counts[*i] > 0)
        .map(|(i, &class)| ClassAccuracy {
            class,
            n: counts[i],
            topk: hits[i].iter().map(|&h| h as f64 / counts[i] as f64).collect(),
        })
        .collect();
    Ok(DecodeReport {
        modalities: clf.modalities,
        classes: classes.clone(),
        n_test: n,
        k_list: k_list.to_vec(),
        topk,
        per_class,
        confusion,
        gains: None,
    })
}

/// Fits the classifier on the novel split and evaluates on the test split.
/// Entries of `k_list` above the number of novel classes are skipped.
pub fn decode_dataset(
    params: &ModelParams,
    ds: &TrimodalDataset,
    opts: &DecodeOptions,
) -> Result<(LatentClassifier, DecodeReport)> {
    let test = ds
        .test
        .as_ref()
        .ok_or_else(|| Error::Invalid("dataset has no test split to decode".into()))?;
    let clf = fit_classifier(params, &ds.novel, opts)?;
    let n_classes = clf.svm.classes.len();
    let k_list: Vec<usize> = opts.k_list.iter().copied().filter(|&k| k <= n_classes).collect();
    let report = evaluate_decoding(params, &clf, &test.brain.to_f64(), test.labels.entries(), &k_list)?;
    Ok((clf, report))
}
