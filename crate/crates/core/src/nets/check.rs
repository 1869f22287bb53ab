//! Central finite differences for verifying analytic gradients.

use super::{ModelParams, ParamGroup};
use crate::error::Result;

/// Numeric gradient of `f` with respect to every parameter of `group`.
pub fn finite_difference(
    params: &ModelParams,
    group: ParamGroup,
    step: f64,
    mut f: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = params.flatten(group);
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.set_flat(group, &flat)?;
        let plus = f(&probe)?;
        flat[i] = base[i] - step;
        probe.set_flat(group, &flat)?;
        let minus = f(&probe)?;
        flat[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm; 0 when both vanish.
///
/// Unlike the element-wise maximum this tolerates the rare entry whose
/// finite-difference stencil straddles a rectifier kink.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ModalKind;
    use crate::nets::{init_params, Graph, ModelDims, ModelVars};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn network_gradients_match_finite_differences() {
        let dims = ModelDims {
            dims: [3, 4, 2],
            hidden: [4, 3, 5],
            latent_dim: 2,
        };
        let params = init_params(&dims, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let loss = |p: &ModelParams, g: &Graph, vars: &ModelVars| {
            let xv = g.constant(x.clone());
            let (m, lv) = vars.encode(g, ModalKind::Visual, xv);
            let xh = vars.decode(g, ModalKind::Visual, g.add(m, g.exp(lv)));
            let (am, _) = vars.aux_posterior(g, ModalKind::Visual, xh);
            let _ = p;
            g.add(g.mean_all(g.square(g.sub(xh, xv))), g.sum_all(am))
        };
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &params, &[ParamGroup::Model, ParamGroup::Aux]);
        let out = loss(&params, &g, &vars);
        let grads = vars.gradients(&g.backward(out).unwrap(), &params);
        for group in [ParamGroup::Model, ParamGroup::Aux] {
            let numeric = finite_difference(&params, group, 1e-5, |p| {
                let g = Graph::new();
                let vars = ModelVars::bind(&g, p, &[]);
                Ok(g.scalar(loss(p, &g, &vars)))
            })
            .unwrap();
            let analytic = grads.flatten(group);
            assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
            // Brain and textual nets are off the loss path.
            assert!(analytic.iter().filter(|v| **v == 0.0).count() > 0);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0], 1e-6), 0.0);
        assert_eq!(norm_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((norm_relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-12);
    }
}
