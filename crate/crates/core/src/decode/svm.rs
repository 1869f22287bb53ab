use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// RBF-kernel SVM settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub gamma: f64,
    pub c: f64,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    /// Iteration cap per binary machine.
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig::desk_scale()
    }
}

impl SvmConfig {
    pub fn desk_scale() -> Self {
        SvmConfig {
            gamma: 1e-2,
            c: 1.0,
            tol: 1e-3,
            max_iter: 1_000_000,
        }
    }

    pub fn paper_scale() -> Self {
        SvmConfig {
            gamma: 1e-5,
            ..SvmConfig::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("SVM tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

pub fn rbf(gamma: f64, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

fn kernel_matrix(gamma: f64, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        for j in 0..i {
            let v = rbf(gamma, x.row(i), x.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// One binary machine: `f(x) = sum_t coef_t K(x_t, x) - rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    /// Dual solution `alpha`, one entry per training row.
    pub alpha: Vec<f64>,
    /// `alpha_t * y_t`.
    pub coef: Vec<f64>,
    pub rho: f64,
    /// Final maximal violation `m(alpha) - M(alpha)`.
    pub gap: f64,
    pub iterations: usize,
}

impl BinarySvm {
    pub fn converged(&self, tol: f64) -> bool {
        self.gap < tol
    }
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `y'a = 0`, `0 <= a <= C` by sequential
/// minimal optimization with maximal-violating-pair selection.
pub fn smo_binary(kernel: &Array2<f64>, y: &[f64], cfg: &SvmConfig) -> BinarySvm {
    let n = y.len();
    let c = cfg.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);
    let mut iterations = 0;
    let mut gap;
    loop {
        let (mut i, mut m) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut big_m) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > m {
                i = t;
                m = v;
            }
            if low(alpha[t], y[t]) && v < big_m {
                j = t;
                big_m = v;
            }
        }
        gap = if i == usize::MAX || j == usize::MAX { 0.0 } else { m - big_m };
        if gap < cfg.tol || iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;
        let curvature = (kernel[[i, i]] + kernel[[j, j]] - 2.0 * kernel[[i, j]]).max(1e-12);
        let mut d = gap / curvature;
        d = d.min(if y[i] > 0.0 { c - alpha[i] } else { alpha[i] });
        d = d.min(if y[j] > 0.0 { alpha[j] } else { c - alpha[j] });
        let (di, dj) = (y[i] * d, -y[j] * d);
        alpha[i] = (alpha[i] + di).clamp(0.0, c);
        alpha[j] = (alpha[j] + dj).clamp(0.0, c);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kernel[[t, i]] * di + y[j] * kernel[[t, j]] * dj);
        }
    }

    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            free += 1;
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else {
        lb
    };
    let coef = alpha.iter().zip(y).map(|(a, y)| a * y).collect();
    BinarySvm {
        alpha,
        coef,
        rho,
        gap,
        iterations,
    }
}

/// One-vs-rest multiclass RBF SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub config: SvmConfig,
    /// Ascending class labels; machine `i` separates `classes[i]` from the rest.
    pub classes: Vec<u32>,
    /// Training rows; rows with zero coefficient in every machine are dropped.
    pub support: Array2<f64>,
    pub machines: Vec<BinarySvm>,
}

pub fn svm_fit(latents: ArrayView2<'_, f64>, labels: &[u32], cfg: &SvmConfig) -> Result<SvmModel> {
    cfg.validate()?;
    if latents.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} latents vs {} labels", latents.nrows(), labels.len())));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid("an SVM needs at least two classes".into()));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite latent".into()));
    }
    let kernel = kernel_matrix(cfg.gamma, latents);
    let mut machines: Vec<BinarySvm> = classes
        .iter()
        .map(|&class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            smo_binary(&kernel, &y, cfg)
        })
        .collect();
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&t| machines.iter().any(|m| m.coef[t] != 0.0))
        .collect();
    for m in &mut machines {
        m.coef = keep.iter().map(|&t| m.coef[t]).collect();
    }
    Ok(SvmModel {
        config: cfg.clone(),
        classes,
        support: latents.select(ndarray::Axis(0), &keep),
        machines,
    })
}

impl SvmModel {
    /// One decision value per class, in `classes` order.
    pub fn decision_values(&self, latent: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if latent.len() != self.support.ncols() {
            return Err(Error::Shape(format!(
                "latent has {} dims, SVM expects {}",
                latent.len(),
                self.support.ncols()
            )));
        }
        let k: Array1<f64> = self
            .support
            .rows()
            .into_iter()
            .map(|s| rbf(self.config.gamma, s, latent))
            .collect();
        Ok(self
            .machines
            .iter()
            .map(|m| m.coef.iter().zip(k.iter()).map(|(c, k)| c * k).sum::<f64>() - m.rho)
            .collect())
    }

    pub fn class_index(&self, label: u32) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }
}

/// Class indices ranked by decision value, descending; ties go to the lower index.
pub fn rank_classes(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// The `k` highest-ranked class labels for one latent.
pub fn svm_predict_topk(model: &SvmModel, latent: ArrayView1<'_, f64>, k: usize) -> Result<Vec<u32>> {
    if k > model.classes.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds {} classes", model.classes.len())));
    }
    let values = model.decision_values(latent)?;
    Ok(rank_classes(&values, k).into_iter().map(|i| model.classes[i]).collect())
}
