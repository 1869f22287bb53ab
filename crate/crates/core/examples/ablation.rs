//! Short ablation sweep over objective variants and posterior types, printed
//! as the comparison CSV.
//!
//! `cargo run --release --example ablation -- [epochs] [seeds]`

use bravl::cli::{ablation_csv, run_ablation, Variant};
use bravl::datamodel::{synth_generate, SynthConfig};
use bravl::decode::DecodeOptions;
use bravl::gaussian::PosteriorKind;
use bravl::preprocess::{fit_pipeline, PreprocessConfig};
use bravl::train::TrainConfig;

fn main() -> bravl::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().expect("arguments must be integers"));
    let epochs = args.next().unwrap_or(10) as usize;
    let seeds: Vec<u64> = (0..args.next().unwrap_or(2)).collect();
    let raw = synth_generate(&SynthConfig::default())?;
    let (_, ds) = fit_pipeline(&raw, &PreprocessConfig::default())?;
    let base = TrainConfig {
        epochs,
        ..TrainConfig::desk_scale()
    };
    let rows = run_ablation(
        &ds,
        &base,
        &Variant::ALL,
        &[PosteriorKind::Poe, PosteriorKind::Mopoe],
        &seeds,
        &DecodeOptions::default(),
        |r| eprintln!("{} {} seed {}: top-1 {:.3}", r.variant, r.posterior, r.seed, r.top1),
    )?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
