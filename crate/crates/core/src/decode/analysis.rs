use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::datamodel::ModalKind;
use crate::error::{Error, Result};
use crate::gaussian::ModalitySet;
use crate::nets::{decode, MlpParams, ModelParams};
use crate::objectives::BatchView;
use crate::preprocess::{pearson, PcaModel};

use super::embed;

/// Brain responses synthesized from visual and textual features through the
/// `{v, t}` latent and the brain decoder.
pub fn cross_modal_generate(params: &ModelParams, visual: &Array2<f64>, textual: &Array2<f64>) -> Result<Array2<f64>> {
    let batch = BatchView::new(vec![(ModalKind::Visual, visual.clone()), (ModalKind::Textual, textual.clone())])?;
    let z = embed(params, &batch, ModalitySet::from_kinds([ModalKind::Visual, ModalKind::Textual]))?;
    decode(params.decoder(ModalKind::Brain), z.view())
}

/// Mean over columns of the Pearson correlation between real and synthetic
/// responses across rows; zero-variance columns count as 0.
pub fn pearson_match(real: ArrayView2<'_, f64>, synthetic: ArrayView2<'_, f64>) -> Result<f64> {
    if real.dim() != synthetic.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", real.dim(), synthetic.dim())));
    }
    if real.nrows() < 2 || real.ncols() == 0 {
        return Err(Error::Invalid("correlation needs at least 2 rows and 1 column".into()));
    }
    let total: f64 = real
        .columns()
        .into_iter()
        .zip(synthetic.columns())
        .map(|(a, b)| pearson(a, b).unwrap_or(0.0))
        .sum();
    Ok(total / real.ncols() as f64)
}

/// Non-negative contribution of each selected voxel to the brain encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelWeightMap {
    pub weights: Vec<f64>,
}

/// `|W_pca * sum_i w_i|`, with `w_i` the columns of the encoder's first layer.
pub fn voxel_contribution(pca: &PcaModel, brain_encoder: &MlpParams) -> Result<VoxelWeightMap> {
    let first = &brain_encoder.layers[0].weight;
    if first.nrows() != pca.n_components() {
        return Err(Error::Shape(format!(
            "encoder input {} vs {} PCA components",
            first.nrows(),
            pca.n_components()
        )));
    }
    let summed: Array1<f64> = first.sum_axis(Axis(1));
    Ok(VoxelWeightMap {
        weights: pca.components.dot(&summed).mapv(f64::abs).to_vec(),
    })
}

/// Row-wise cosine similarities.
pub fn cosine_similarity_matrix(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::Invalid(format!("row {i} has zero norm")));
    }
    let n = x.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
        for j in 0..i {
            let c = (x.row(i).dot(&x.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    Ok(out)
}

/// Mean and population standard deviation of the off-diagonal entries.
pub fn off_diagonal_stats(m: &Array2<f64>) -> (f64, f64) {
    let values: Vec<f64> = m
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &v)| v)
        .collect();
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Per-class mean rows, classes ascending.
pub fn class_means(x: ArrayView2<'_, f64>, labels: &[u32]) -> Result<(Vec<u32>, Array2<f64>)> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", x.nrows(), labels.len())));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Array2::zeros((classes.len(), x.ncols()));
    let mut counts = vec![0usize; classes.len()];
    for (row, l) in x.rows().into_iter().zip(labels) {
        let i = classes.binary_search(l).expect("label listed");
        let mut target = out.row_mut(i);
        target += &row;
        counts[i] += 1;
    }
    for (mut row, c) in out.rows_mut().into_iter().zip(counts) {
        row /= c as f64;
    }
    Ok((classes, out))
}
