//! Column-wise z-scoring with statistics from training rows only.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Array1<f64>,
}

pub fn fit_norm(train: ArrayView2<'_, f64>) -> Result<NormStats> {
    if train.nrows() < 2 {
        return Err(Error::Invalid(format!(
            "normalization needs at least 2 rows, got {}",
            train.nrows()
        )));
    }
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

pub fn apply_norm(stats: &NormStats, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != stats.mean.len() {
        return Err(Error::Shape(format!(
            "normalizer fitted on {} columns, got {}",
            stats.mean.len(),
            x.ncols()
        )));
    }
    Ok((&x - &stats.mean) / &stats.std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalized_train_is_standard() {
        let x = array![[1.0, 10.0], [2.0, -3.0], [4.0, 0.5], [8.0, 2.0]];
        let stats = fit_norm(x.view()).unwrap();
        let z = apply_norm(&stats, x.view()).unwrap();
        for c in z.columns() {
            assert!(c.mean().unwrap().abs() < 1e-6);
            assert!((c.std(0.0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = array![[0.1, 1.0], [0.1, 2.0], [0.1, 3.0]];
        let stats = fit_norm(x.view()).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let z = apply_norm(&stats, x.view()).unwrap();
        assert!(z.column(0).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn hand_arithmetic() {
        let x = array![[2.0], [4.0], [6.0]];
        let stats = fit_norm(x.view()).unwrap();
        assert_eq!(stats.mean[0], 4.0);
        assert!((stats.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let z = apply_norm(&stats, x.view()).unwrap();
        assert!((z[[0, 0]] + 1.2247).abs() < 1e-4);
        assert_eq!(z[[1, 0]], 0.0);
        assert!((z[[2, 0]] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn test_rows_do_not_influence_stats() {
        let train = array![[1.0], [3.0]];
        let stats = fit_norm(train.view()).unwrap();
        let test = array![[100.0]];
        let _ = apply_norm(&stats, test.view()).unwrap();
        assert_eq!(stats, fit_norm(train.view()).unwrap());
    }

    #[test]
    fn errors() {
        assert!(fit_norm(array![[1.0, 2.0]].view()).is_err());
        let stats = fit_norm(array![[1.0], [2.0]].view()).unwrap();
        assert!(apply_norm(&stats, array![[1.0, 2.0]].view()).is_err());
    }
}
