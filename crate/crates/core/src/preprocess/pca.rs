//! PCA by singular-value decomposition of the centered training matrix.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Slack when comparing cumulative variance against the target, so a target of
/// exactly 1.0 is reachable despite rounding.
const TARGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `l x k`, orthonormal columns, ordered by decreasing variance.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    /// Explained-variance ratio of each kept component.
    pub explained_ratio: Vec<f64>,
    pub target_variance: f64,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn retained_variance(&self) -> f64 {
        self.explained_ratio.iter().sum()
    }
}

fn to_nalgebra(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[[r, c]])
}

pub fn fit_pca(train: ArrayView2<'_, f64>, target_variance: f64) -> Result<PcaModel> {
    let (n, l) = train.dim();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if !(target_variance > 0.0 && target_variance <= 1.0) {
        return Err(Error::Invalid(format!(
            "target variance must lie in (0, 1], got {target_variance}"
        )));
    }
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let centered = &train - &mean;
    let total: f64 = centered.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::Invalid("PCA on a degenerate (zero-variance) training matrix".into()));
    }

    // Decompose whichever side is smaller; the right singular vectors of X are
    // the left singular vectors of X^T.
    let (directions, singular) = if n >= l {
        let svd = to_nalgebra(&centered).svd(false, true);
        let v_t = svd.v_t.expect("requested");
        (v_t.transpose(), svd.singular_values)
    } else {
        let svd = to_nalgebra(&centered.t().to_owned()).svd(true, false);
        (svd.u.expect("requested"), svd.singular_values)
    };

    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]).then(a.cmp(&b)));
    let ratios: Vec<f64> = order.iter().map(|&i| singular[i] * singular[i] / total).collect();

    let max_k = (n - 1).min(l).min(order.len());
    let mut k = 0;
    let mut cumulative = 0.0;
    while k < max_k {
        cumulative += ratios[k];
        k += 1;
        if cumulative >= target_variance - TARGET_SLACK {
            break;
        }
    }

    let mut components = Array2::zeros((l, k));
    for (j, &src) in order.iter().take(k).enumerate() {
        let col = directions.column(src);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..l {
            components[[r, j]] = sign * col[r];
        }
    }
    Ok(PcaModel {
        components,
        mean,
        explained_ratio: ratios[..k].to_vec(),
        target_variance,
    })
}

pub fn apply_pca(model: &PcaModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "PCA fitted on {} columns, got {}",
            model.input_dim(),
            x.ncols()
        )));
    }
    Ok((&x - &model.mean).dot(&model.components))
}

/// Maps component scores back to the input space.
pub fn inverse_pca(model: &PcaModel, scores: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if scores.ncols() != model.n_components() {
        return Err(Error::Shape("score width differs from component count".into()));
    }
    Ok(scores.dot(&model.components.t()) + &model.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn full_variance_reconstructs() {
        for (rows, cols) in [(12, 5), (4, 9)] {
            let x = random(rows, cols, 3);
            let model = fit_pca(x.view(), 1.0).unwrap();
            let back = inverse_pca(&model, apply_pca(&model, x.view()).unwrap().view()).unwrap();
            assert!((&back - &x).iter().all(|d| d.abs() < 1e-5), "{rows}x{cols}");
            assert!(model.n_components() <= (rows - 1).min(cols));
        }
    }

    #[test]
    fn components_are_orthonormal_and_sign_fixed() {
        let x = random(30, 6, 1);
        let m = fit_pca(x.view(), 0.9).unwrap();
        let gram = m.components.t().dot(&m.components);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-6);
            }
        }
        for col in m.components.columns() {
            let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn rank_one_data_has_one_component() {
        let dir = array![1.0, -2.0, 0.5];
        let x = Array2::from_shape_fn((6, 3), |(r, c)| (r as f64 - 2.0) * dir[c]);
        for target in [0.5, 0.99, 1.0] {
            assert_eq!(fit_pca(x.view(), target).unwrap().n_components(), 1);
        }
    }

    #[test]
    fn eigenvalue_ratio_picks_k() {
        // Four points with covariance diag(9, 1): ratio 0.9 for the first axis.
        let x = array![[3.0, 1.0], [3.0, -1.0], [-3.0, 1.0], [-3.0, -1.0]];
        let m = fit_pca(x.view(), 0.89).unwrap();
        assert_eq!(m.n_components(), 1);
        assert!((m.explained_ratio[0] - 0.9).abs() < 1e-12);
        assert_eq!(fit_pca(x.view(), 0.95).unwrap().n_components(), 2);
    }

    #[test]
    fn retained_variance_meets_target() {
        let x = random(40, 10, 7);
        for target in [0.5, 0.8, 0.99] {
            let m = fit_pca(x.view(), target).unwrap();
            let y = apply_pca(&m, x.view()).unwrap();
            let centered = &x - &x.mean_axis(Axis(0)).unwrap();
            let kept: f64 = y.iter().map(|v| v * v).sum();
            let total: f64 = centered.iter().map(|v| v * v).sum();
            assert!(kept / total >= target - 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_pca(Array2::zeros((5, 3)).view(), 0.9).is_err());
        assert!(fit_pca(array![[1.0, 2.0]].view(), 0.9).is_err());
        assert!(fit_pca(random(5, 2, 0).view(), 0.0).is_err());
    }
}
