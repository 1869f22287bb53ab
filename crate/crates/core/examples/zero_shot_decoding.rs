//! End-to-end zero-shot decoding on the synthetic default dataset: generate,
//! preprocess, train, then classify held-out brain responses of novel classes
//! with SVMs trained on visual, textual and joint latents.
//!
//! `cargo run --release --example zero_shot_decoding -- [epochs]`

use std::time::Instant;

use bravl::datamodel::{synth_generate, SynthConfig};
use bravl::decode::{decode_dataset, DecodeOptions};
use bravl::preprocess::{fit_pipeline, PreprocessConfig};
use bravl::train::{train_run, RunOptions, TrainConfig};

fn main() -> bravl::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(100), |s| s.parse()).expect("epochs must be an integer");
    let start = Instant::now();
    let raw = synth_generate(&SynthConfig::default())?;
    let (_, ds) = fit_pipeline(&raw, &PreprocessConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk_scale()
    };
    let trained = train_run(&ds, &cfg, &RunOptions::default())?;
    println!("trained {} steps in {:.1}s", trained.log.len(), start.elapsed().as_secs_f64());

    for modalities in ["v,t", "v", "t"] {
        let opts = DecodeOptions {
            modalities: modalities.parse()?,
            ..DecodeOptions::default()
        };
        let (_, report) = decode_dataset(&trained.checkpoint.params, &ds, &opts)?;
        println!(
            "{modalities:>4}: top-1 {:.3}  top-5 {:.3}  (chance {:.2} / {:.2})",
            report.top1(),
            report.top5(),
            report.chance(1),
            report.chance(5)
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
