//! Generates the synthetic default dataset, preprocesses it and trains the
//! desk-scale model, printing the seen-pool ELBO before and after.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use std::time::Instant;

use bravl::datamodel::{synth_generate, SynthConfig};
use bravl::nets::init_params;
use bravl::preprocess::{fit_pipeline, PreprocessConfig};
use bravl::train::{model_dims, seen_elbo, train_run, RunOptions, TrainConfig};

fn main() -> bravl::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(10), |s| s.parse()).expect("epochs must be an integer");
    let raw = synth_generate(&SynthConfig::default())?;
    let (_, ds) = fit_pipeline(&raw, &PreprocessConfig::default())?;
    println!("dims after preprocessing: {:?}", ds.dims());

    let cfg = TrainConfig { epochs, ..TrainConfig::desk_scale() };
    let init = init_params(&model_dims(&ds, &cfg), cfg.seed);
    let before = seen_elbo(&init, &ds, &cfg)?;
    let start = Instant::now();
    let out = train_run(&ds, &cfg, &RunOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let after = seen_elbo(&out.checkpoint.params, &ds, &cfg)?;
    println!(
        "{} epochs, {} steps in {secs:.1}s ({:.1} ms/step)",
        epochs,
        out.log.len(),
        1e3 * secs / out.log.len().max(1) as f64
    );
    println!("seen ELBO: {before:.3} -> {after:.3}");
    Ok(())
}
