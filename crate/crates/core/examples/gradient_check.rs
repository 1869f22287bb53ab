//! Compares reverse-mode gradients of the full objective with central finite
//! differences on a tiny random model.
//!
//! `cargo run --example gradient_check -- [seed]`

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bravl::datamodel::ModalKind;
use bravl::nets::{finite_difference, init_params, norm_relative_error, Graph, ModelDims, ModelParams, ModelVars, ParamGroup};
use bravl::objectives::{total_objective, BatchView, ObjectiveConfig};

fn main() -> bravl::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        dims: [5, 4, 3],
        hidden: [6, 5, 4],
        latent_dim: 3,
    };
    let mut params = init_params(&dims, seed);
    // Zero-initialized biases put rectifier inputs exactly on the kink; jitter them away.
    for group in [ParamGroup::Model, ParamGroup::Aux] {
        let flat: Vec<f64> = params.flatten(group).iter().map(|v| 0.5 * v + rng.random_range(-0.1..0.1)).collect();
        params.set_flat(group, &flat)?;
    }
    let batch = BatchView::new(
        ModalKind::ALL
            .iter()
            .map(|&k| (k, Array2::from_shape_simple_fn((3, dims.dims[k.index()]), || rng.random_range(-1.0..1.0))))
            .collect(),
    )?;
    let cfg = ObjectiveConfig {
        lambda1: 0.5,
        lambda2: 0.5,
        k: 4,
        ..ObjectiveConfig::default()
    };
    // Same noise on every evaluation, so the objective is a fixed function.
    let value = |p: &ModelParams| -> bravl::Result<f64> {
        let g = Graph::new();
        let vars = ModelVars::bind(&g, p, &[]);
        let obj = total_objective(&g, &vars, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
        Ok(g.scalar(obj.total))
    };

    let g = Graph::new();
    let vars = ModelVars::bind(&g, &params, &[ParamGroup::Model, ParamGroup::Aux]);
    let obj = total_objective(&g, &vars, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
    let grads = vars.gradients(&g.backward(obj.total)?, &params);
    println!("objective {:.6}", g.scalar(obj.total));
    for group in [ParamGroup::Model, ParamGroup::Aux] {
        for step in [1e-4, 1e-5] {
            let numeric = finite_difference(&params, group, step, value)?;
            let err = norm_relative_error(&grads.flatten(group), &numeric);
            println!("{group:?} ({} params), step {step:e}: relative error {err:.2e}", numeric.len());
        }
    }
    Ok(())
}
