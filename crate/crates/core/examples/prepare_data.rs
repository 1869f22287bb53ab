//! Synthesizes a raw trimodal dataset, runs stability selection and PCA, and
//! saves both to disk in the container format.
//!
//! `cargo run --release --example prepare_data -- [out_dir]`

use std::path::PathBuf;

use bravl::datamodel::{load_dataset, noise_voxel_indices, save_dataset, synth_generate, SynthConfig};
use bravl::preprocess::{fit_pipeline, PreprocessConfig};

fn main() -> bravl::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("bravl_data"), PathBuf::from);
    let synth = SynthConfig::default();
    let raw = synth_generate(&synth)?;
    save_dataset(&raw, &out.join("raw"))?;
    println!(
        "raw: {} seen trials, {} novel stimuli, dims {:?}",
        raw.seen.labels.len(),
        raw.novel.labels.len(),
        raw.dims()
    );

    let (model, ds) = fit_pipeline(&raw, &PreprocessConfig::default())?;
    let noise = noise_voxel_indices(&synth);
    let kept_noise = model.selected_voxels.iter().filter(|v| noise.contains(v)).count();
    println!(
        "stability selection kept {} of {} voxels ({kept_noise} pure-noise)",
        model.selected_voxels.len(),
        model.raw_brain_dim
    );
    for (kind, t) in bravl::datamodel::ModalKind::ALL.iter().zip(&model.transforms) {
        println!(
            "{:>8}: {} -> {} components, {:.4} variance retained",
            kind.name(),
            t.pca.input_dim(),
            t.pca.n_components(),
            t.pca.retained_variance()
        );
    }
    save_dataset(&ds, &out.join("preprocessed"))?;
    model.save(&out.join("preprocessed").join("preprocess"))?;
    let reloaded = load_dataset(&out.join("preprocessed"))?;
    assert_eq!(reloaded.dims(), ds.dims());
    println!("written to {}", out.display());
    Ok(())
}
