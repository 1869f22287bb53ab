//! Datasets, labels and class splits for the trimodal (brain, visual, textual)
//! setting, plus the on-disk container and a seeded synthetic generator.
//!
//! Seen classes carry all three modalities. Novel classes carry only visual and
//! textual features at training time; their brain recordings live in a separate
//! held-out [`TestSplit`] that training code never reads.

mod io;
mod synth;

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, read_labels, read_matrix, read_matrix_f64, save_dataset, write_labels,
    write_matrix, write_matrix_f64, Manifest, MANIFEST_FILE,
};
pub use synth::{noise_voxel_indices, synth_generate, SynthConfig};

/// One of the three observed modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalKind {
    Brain,
    Visual,
    Textual,
}

impl ModalKind {
    pub const ALL: [ModalKind; 3] = [ModalKind::Brain, ModalKind::Visual, ModalKind::Textual];

    pub fn index(self) -> usize {
        match self {
            ModalKind::Brain => 0,
            ModalKind::Visual => 1,
            ModalKind::Textual => 2,
        }
    }

    /// Single-letter tag used in subset names and CLI flags.
    pub fn tag(self) -> char {
        match self {
            ModalKind::Brain => 'b',
            ModalKind::Visual => 'v',
            ModalKind::Textual => 't',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalKind::Brain => "brain",
            ModalKind::Visual => "visual",
            ModalKind::Textual => "textual",
        }
    }

    pub fn from_tag(s: &str) -> Option<ModalKind> {
        match s.trim() {
            "b" | "brain" => Some(ModalKind::Brain),
            "v" | "visual" => Some(ModalKind::Visual),
            "t" | "textual" | "text" => Some(ModalKind::Textual),
            _ => None,
        }
    }
}

impl fmt::Display for ModalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A finite, non-empty sample-by-feature matrix. Rows are samples.
///
/// Values are stored in single precision, which is exactly what the container
/// format holds, so a save/load round trip is bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(FeatureMatrix { data })
    }

    /// Rounds to single precision.
    pub fn from_f64(data: &Array2<f64>) -> Result<Self> {
        FeatureMatrix::new(data.mapv(|v| v as f32))
    }

    pub fn from_rows(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        FeatureMatrix::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select(Axis(0), rows),
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.data.select(Axis(1), cols))
    }
}

/// Class index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    entries: Vec<u32>,
    n_classes: u32,
}

impl LabelVector {
    pub fn new(entries: Vec<u32>, n_classes: u32) -> Result<Self> {
        if let Some(&label) = entries.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(LabelVector { entries, n_classes })
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> LabelVector {
        LabelVector {
            entries: rows.iter().map(|&r| self.entries[r]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Disjoint seen and novel class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    seen: BTreeSet<u32>,
    novel: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn new(seen: impl IntoIterator<Item = u32>, novel: impl IntoIterator<Item = u32>) -> Result<Self> {
        let seen: BTreeSet<u32> = seen.into_iter().collect();
        let novel: BTreeSet<u32> = novel.into_iter().collect();
        if seen.is_empty() || novel.is_empty() {
            return Err(Error::Invalid("seen and novel class sets must be non-empty".into()));
        }
        if let Some(&c) = seen.intersection(&novel).next() {
            return Err(Error::ClassOverlap(c));
        }
        Ok(ClassSplit { seen, novel })
    }

    pub fn seen(&self) -> &BTreeSet<u32> {
        &self.seen
    }

    pub fn novel(&self) -> &BTreeSet<u32> {
        &self.novel
    }
}

/// Voxel to region-of-interest assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMap {
    assignment: Vec<(usize, String)>,
}

impl RoiMap {
    pub fn new(assignment: Vec<(usize, String)>) -> Self {
        RoiMap { assignment }
    }

    /// Every voxel in one region.
    pub fn single(n_voxels: usize, name: &str) -> Self {
        RoiMap {
            assignment: (0..n_voxels).map(|v| (v, name.to_string())).collect(),
        }
    }

    pub fn assignment(&self) -> &[(usize, String)] {
        &self.assignment
    }

    /// Regions in order of first appearance, each with its ascending voxel list.
    pub fn regions(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (voxel, name) in &self.assignment {
            match out.iter_mut().find(|(n, _)| n == name) {
                Some((_, voxels)) => voxels.push(*voxel),
                None => out.push((name.clone(), vec![*voxel])),
            }
        }
        for (_, voxels) in &mut out {
            voxels.sort_unstable();
        }
        out
    }

    pub fn without_region(&self, name: &str) -> RoiMap {
        RoiMap {
            assignment: self
                .assignment
                .iter()
                .filter(|(_, n)| n != name)
                .cloned()
                .collect(),
        }
    }

    /// Restricts the map to `kept` voxels and renumbers them by their position in `kept`.
    pub fn restrict(&self, kept: &[usize]) -> RoiMap {
        let assignment = kept
            .iter()
            .enumerate()
            .filter_map(|(new, old)| {
                self.assignment
                    .iter()
                    .find(|(v, _)| v == old)
                    .map(|(_, n)| (new, n.clone()))
            })
            .collect();
        RoiMap { assignment }
    }

    fn validate(&self, n_voxels: usize) -> Result<()> {
        let mut seen = vec![false; n_voxels];
        for (voxel, _) in &self.assignment {
            if *voxel >= n_voxels {
                return Err(Error::Invalid(format!(
                    "roi map references voxel {voxel} but brain data has {n_voxels} columns"
                )));
            }
            if std::mem::replace(&mut seen[*voxel], true) {
                return Err(Error::Invalid(format!("voxel {voxel} assigned to two regions")));
            }
        }
        Ok(())
    }
}

/// Seen-class data: all three modalities, row-aligned.
///
/// When `repeats_per_stimulus > 1` the brain rows come in consecutive blocks of
/// trials for one stimulus, and the visual/textual/label rows are repeated to
/// stay aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SeenSplit {
    pub brain: FeatureMatrix,
    pub visual: FeatureMatrix,
    pub textual: FeatureMatrix,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NovelSplit {
    pub visual: FeatureMatrix,
    pub textual: FeatureMatrix,
    pub labels: LabelVector,
}

/// Held-out novel-class brain recordings, only read at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub brain: FeatureMatrix,
    pub labels: LabelVector,
}

/// Label-free extra data used for semi-supervised training.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtraPool {
    Pairs {
        visual: FeatureMatrix,
        textual: FeatureMatrix,
    },
    Visual(FeatureMatrix),
    Textual(FeatureMatrix),
}

impl ExtraPool {
    pub fn rows(&self) -> usize {
        match self {
            ExtraPool::Pairs { visual, .. } => visual.rows(),
            ExtraPool::Visual(m) | ExtraPool::Textual(m) => m.rows(),
        }
    }

    pub fn matrix(&self, kind: ModalKind) -> Option<&FeatureMatrix> {
        match (self, kind) {
            (ExtraPool::Pairs { visual, .. }, ModalKind::Visual) => Some(visual),
            (ExtraPool::Pairs { textual, .. }, ModalKind::Textual) => Some(textual),
            (ExtraPool::Visual(m), ModalKind::Visual) => Some(m),
            (ExtraPool::Textual(m), ModalKind::Textual) => Some(m),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalDataset {
    pub classes: ClassSplit,
    pub seen: SeenSplit,
    pub novel: NovelSplit,
    pub test: Option<TestSplit>,
    pub extra: Vec<ExtraPool>,
    pub repeats_per_stimulus: usize,
    pub roi_map: Option<RoiMap>,
}

impl TrimodalDataset {
    pub fn n_classes(&self) -> u32 {
        self.seen.labels.n_classes()
    }

    pub fn dim(&self, kind: ModalKind) -> usize {
        match kind {
            ModalKind::Brain => self.seen.brain.cols(),
            ModalKind::Visual => self.seen.visual.cols(),
            ModalKind::Textual => self.seen.textual.cols(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        ModalKind::ALL.map(|k| self.dim(k))
    }

    /// Checks every cross-matrix invariant.
    pub fn validate(&self) -> Result<()> {
        let s = &self.seen;
        let n = s.labels.len();
        for (name, m) in [("brain", &s.brain), ("visual", &s.visual), ("textual", &s.textual)] {
            if m.rows() != n {
                return Err(Error::Alignment {
                    split: "seen",
                    detail: format!("{name} has {} rows but there are {n} labels", m.rows()),
                });
            }
        }
        if self.repeats_per_stimulus == 0 || n % self.repeats_per_stimulus != 0 {
            return Err(Error::Alignment {
                split: "seen",
                detail: format!(
                    "{n} rows are not a multiple of repeats_per_stimulus={}",
                    self.repeats_per_stimulus
                ),
            });
        }
        let nv = &self.novel;
        if nv.visual.rows() != nv.labels.len() || nv.textual.rows() != nv.labels.len() {
            return Err(Error::Alignment {
                split: "novel",
                detail: format!(
                    "visual {} / textual {} / labels {}",
                    nv.visual.rows(),
                    nv.textual.rows(),
                    nv.labels.len()
                ),
            });
        }
        if nv.visual.cols() != s.visual.cols() || nv.textual.cols() != s.textual.cols() {
            return Err(Error::Shape("novel feature dimensions differ from seen".into()));
        }
        let n_classes = self.n_classes();
        let check_labels = |labels: &LabelVector, allowed: &BTreeSet<u32>, split: &str| -> Result<()> {
            if labels.n_classes() != n_classes {
                return Err(Error::Invalid(format!("{split} labels declare a different class count")));
            }
            if let Some(l) = labels.entries().iter().find(|l| !allowed.contains(l)) {
                return Err(Error::Invalid(format!("{split} label {l} is not in the {split} class set")));
            }
            Ok(())
        };
        for &c in self.classes.seen().iter().chain(self.classes.novel()) {
            if c >= n_classes {
                return Err(Error::LabelOutOfRange { label: c, n_classes });
            }
        }
        check_labels(&s.labels, self.classes.seen(), "seen")?;
        check_labels(&nv.labels, self.classes.novel(), "novel")?;
        if let Some(test) = &self.test {
            if test.brain.rows() != test.labels.len() {
                return Err(Error::Alignment {
                    split: "test",
                    detail: format!("brain {} rows, labels {}", test.brain.rows(), test.labels.len()),
                });
            }
            if test.brain.rows() % self.repeats_per_stimulus != 0 {
                return Err(Error::Alignment {
                    split: "test",
                    detail: "rows are not a multiple of repeats_per_stimulus".into(),
                });
            }
            if test.brain.cols() != s.brain.cols() {
                return Err(Error::Shape("test brain dimension differs from seen".into()));
            }
            check_labels(&test.labels, self.classes.novel(), "test")?;
        }
        for pool in &self.extra {
            if let ExtraPool::Pairs { visual, textual } = pool {
                if visual.rows() != textual.rows() {
                    return Err(Error::Alignment {
                        split: "extra",
                        detail: format!("visual {} rows, textual {}", visual.rows(), textual.rows()),
                    });
                }
            }
            for kind in [ModalKind::Visual, ModalKind::Textual] {
                if let Some(m) = pool.matrix(kind) {
                    if m.cols() != self.dim(kind) {
                        return Err(Error::Shape(format!("extra {kind} dimension differs from seen")));
                    }
                }
            }
        }
        if let Some(roi) = &self.roi_map {
            roi.validate(s.brain.cols())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn feature_matrix_rejects_nan_and_empty() {
        assert!(matches!(
            FeatureMatrix::new(array![[1.0, f32::NAN]]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(FeatureMatrix::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn labels_out_of_range() {
        assert!(matches!(
            LabelVector::new(vec![0, 5], 5),
            Err(Error::LabelOutOfRange { label: 5, n_classes: 5 })
        ));
    }

    #[test]
    fn class_split_overlap() {
        assert!(matches!(ClassSplit::new([1, 7], [7, 9]), Err(Error::ClassOverlap(7))));
        assert!(ClassSplit::new([], [1]).is_err());
    }

    #[test]
    fn roi_regions_keep_first_appearance_order() {
        let roi = RoiMap::new(vec![(2, "V2".into()), (0, "V1".into()), (1, "V2".into())]);
        let regions = roi.regions();
        assert_eq!(regions[0], ("V2".to_string(), vec![1, 2]));
        assert_eq!(regions[1], ("V1".to_string(), vec![0]));
        assert_eq!(roi.restrict(&[1, 2]).regions(), vec![("V2".to_string(), vec![0, 1])]);
    }
}
