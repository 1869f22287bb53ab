//! Trains a short model, then runs the latent analyses: cross-modal brain
//! generation, voxel contribution weights and class-level cosine similarity.
//!
//! `cargo run --release --example latent_analysis -- [epochs]`

use bravl::datamodel::{synth_generate, ModalKind, SynthConfig};
use bravl::decode::{
    class_means, cosine_similarity_matrix, cross_modal_generate, embed, off_diagonal_stats, pearson_match, voxel_contribution,
};
use bravl::gaussian::ModalitySet;
use bravl::objectives::BatchView;
use bravl::preprocess::{fit_pipeline, PreprocessConfig};
use bravl::train::{train_run, RunOptions, TrainConfig};

fn main() -> bravl::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(20), |s| s.parse()).expect("epochs must be an integer");
    let synth = SynthConfig::default();
    let raw = synth_generate(&synth)?;
    let (pre, ds) = fit_pipeline(&raw, &PreprocessConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk_scale()
    };
    let params = train_run(&ds, &cfg, &RunOptions::default())?.checkpoint.params;

    let visual = ds.seen.visual.to_f64();
    let textual = ds.seen.textual.to_f64();
    let generated = cross_modal_generate(&params, &visual, &textual)?;
    let r = pearson_match(ds.seen.brain.to_f64().view(), generated.view())?;
    println!("seen brain vs generated from visual+textual: mean Pearson r {r:.3}");

    let weights = voxel_contribution(&pre.transform(ModalKind::Brain).pca, params.encoder(ModalKind::Brain))?.weights;
    let mut ranked: Vec<(usize, f64)> = pre.selected_voxels.iter().copied().zip(weights).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("top voxels by contribution: {:?}", &ranked[..5.min(ranked.len())]);

    let labels = ds.novel.labels.entries();
    let batch = BatchView::new(vec![
        (ModalKind::Visual, ds.novel.visual.to_f64()),
        (ModalKind::Textual, ds.novel.textual.to_f64()),
    ])?;
    let levels = [
        ("visual features", ds.novel.visual.to_f64()),
        (
            "joint latent",
            embed(&params, &batch, ModalitySet::from_kinds([ModalKind::Visual, ModalKind::Textual]))?,
        ),
    ];
    for (name, x) in levels {
        let (_, means) = class_means(x.view(), labels)?;
        let (mean, std) = off_diagonal_stats(&cosine_similarity_matrix(means.view())?);
        println!("novel class cosine similarity, {name}: {mean:.3} ± {std:.3}");
    }
    Ok(())
}
