//! Command-line front end: synthesize data, preprocess, train, decode,
//! analyze and run ablation sweeps. Every command writes its outputs under
//! `--out` together with a `run.txt` reproducibility record.

mod ablate;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::datamodel::{load_dataset, save_dataset, synth_generate, write_matrix_f64, Manifest, ModalKind, SynthConfig};
use crate::decode::{
    class_means, classifier_training_set, cosine_similarity_matrix, cross_modal_generate, decode_dataset, embed,
    off_diagonal_stats, pearson_match, voxel_contribution, DecodeOptions, SvmConfig,
};
use crate::error::{Error, Result};
use crate::gaussian::{ModalitySet, PosteriorKind};
use crate::objectives::BatchView;
use crate::preprocess::{fit_pipeline, PreprocessConfig, PreprocessModel};
use crate::train::{train_run, Checkpoint, RunOptions, TrainConfig};

pub use ablate::{ablation_csv, ablation_mean, run_ablation, AblationRow, Variant};

pub const RUN_RECORD: &str = "run.txt";

#[derive(Debug, Parser)]
#[command(name = "bravl", version, about = "Trimodal brain/visual/textual VAE with zero-shot decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic trimodal dataset.
    Synth(SynthArgs),
    /// Select stable voxels, normalize and project every modality.
    Preprocess(PreprocessArgs),
    /// Train the model and write a checkpoint plus the per-step log.
    Train(TrainArgs),
    /// Fit the latent classifier on novel classes and decode test brain data.
    Decode(DecodeArgs),
    /// Latent-space analyses.
    Analyze(AnalyzeArgs),
    /// Train and decode objective variants and posterior types over seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    seen_classes: usize,
    #[arg(long, default_value_t = 10)]
    novel_classes: usize,
    /// Training stimuli per class.
    #[arg(long, default_value_t = 20)]
    samples_per_class: usize,
    /// Held-out brain stimuli per novel class.
    #[arg(long, default_value_t = 10)]
    test_samples_per_class: usize,
    #[arg(long, default_value_t = 60)]
    dim_brain: usize,
    #[arg(long, default_value_t = 50)]
    dim_visual: usize,
    #[arg(long, default_value_t = 30)]
    dim_textual: usize,
    /// Brain trials per stimulus.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Fraction of brain dimensions that carry only noise.
    #[arg(long, default_value_t = 0.2)]
    noise_voxel_fraction: f64,
    #[arg(long, default_value_t = 0)]
    extra_pairs: usize,
    #[arg(long, default_value_t = 0)]
    extra_visual: usize,
    #[arg(long, default_value_t = 0)]
    extra_textual: usize,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Raw dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the fitted transforms go to `<out>/preprocess`.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of voxels kept per region by stability.
    #[arg(long, default_value_t = 0.15)]
    stability_ratio: f64,
    /// Keep every voxel.
    #[arg(long)]
    no_stability: bool,
    /// Variance fraction retained by PCA.
    #[arg(long, default_value_t = 0.99)]
    pca_variance: f64,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Flat key=value config file (keys are the training config field names).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda1=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from paper-scale defaults (hidden 512/2048/512, batch 512,
    /// lr 1e-4, K 30) instead of desk scale (hidden 64, batch 128, lr 3e-3, K 10).
    #[arg(long)]
    paper_scale: bool,
    /// Default 100.
    #[arg(long)]
    epochs: Option<usize>,
    /// Default 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Default 3e-3 (desk) or 1e-4 (paper).
    #[arg(long)]
    lr: Option<f64>,
    /// Default 0.001.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Default 0.001.
    #[arg(long)]
    lambda2: Option<f64>,
    /// CUBO samples; default 10 (desk) or 30 (paper).
    #[arg(long)]
    k: Option<usize>,
    /// poe, moe or mopoe; default mopoe.
    #[arg(long)]
    posterior: Option<PosteriorKind>,
    /// Drop the intra-modality MI term.
    #[arg(long)]
    intra_off: bool,
    /// Drop the inter-modality MI term.
    #[arg(long)]
    inter_off: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = if self.paper_scale {
            TrainConfig::paper_scale()
        } else {
            TrainConfig::desk_scale()
        };
        if let Some(path) = &self.config {
            cfg.apply(&Manifest::read(path)?)?;
        }
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {o}` is not KEY=VALUE")))?;
            cfg.set(key.trim(), value)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.posterior {
            cfg.posterior_type = v;
        }
        cfg.intra_off |= self.intra_off;
        cfg.inter_off |= self.inter_off;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Also checkpoint every N epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SvmFlags {
    /// Modalities whose latents train the classifier: v, t or v,t.
    #[arg(long, default_value = "v,t", value_parser = parse_modalities)]
    modalities: ModalitySet,
    /// With v,t, train only on joint latents instead of the union of v, t and v,t.
    #[arg(long)]
    vt_only: bool,
    /// RBF width; default 1e-2 (desk) or 1e-5 with --paper-scale.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
}

impl SvmFlags {
    fn options(&self, paper_scale: bool) -> DecodeOptions {
        let base = if paper_scale {
            SvmConfig::paper_scale()
        } else {
            SvmConfig::desk_scale()
        };
        DecodeOptions {
            modalities: self.modalities,
            union_subsets: !self.vt_only,
            svm: SvmConfig {
                gamma: self.gamma.unwrap_or(base.gamma),
                c: self.c,
                ..base
            },
            ..DecodeOptions::default()
        }
    }
}

fn parse_modalities(s: &str) -> std::result::Result<ModalitySet, String> {
    s.parse::<ModalitySet>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Preprocessed dataset directory (needs a test split).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    svm: SvmFlags,
    /// Also decode with these classifier modalities and report per-class gains against them.
    #[arg(long, value_parser = parse_modalities)]
    compare: Option<ModalitySet>,
    /// Write classifier-training and test latents as BVLM matrices.
    #[arg(long)]
    export_latents: bool,
    /// Paper-scale kernel width (gamma 1e-5).
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Analysis {
    /// Per-voxel contribution weights of the brain encoder.
    VoxelWeights,
    /// Pearson match between real and generated brain responses.
    Crossgen,
    /// Cosine similarity of class representations.
    Cosine,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    analysis: Analysis,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed dataset directory (crossgen, cosine).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Preprocessing directory (voxel-weights); default `<data>/preprocess`.
    #[arg(long)]
    preprocess: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of full, no-intra, no-inter, elbo-only.
    #[arg(long, default_value = "full,no-intra,no-inter,elbo-only")]
    variants: String,
    /// Comma-separated subset of poe, moe, mopoe.
    #[arg(long, default_value = "mopoe")]
    posteriors: String,
    /// Number of training seeds (0, 1, ...).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    svm: SvmFlags,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `run.txt`: command line, crate version and the settings that determine the outputs.
fn write_record(out: &Path, argv: &[String], settings: &[(&str, String)]) -> Result<()> {
    let mut m = Manifest::new();
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.set("argv", argv.join(" "));
    for (k, v) in settings {
        m.set(*k, v);
    }
    m.write(&out.join(RUN_RECORD))
}

fn config_settings(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("seed", cfg.seed.to_string()),
        ("config_hash", cfg.hash()),
        ("config", cfg.to_text().trim_end().replace('\n', ";")),
    ]
}

fn run_synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let cfg = SynthConfig {
        n_seen_classes: a.seen_classes,
        n_novel_classes: a.novel_classes,
        samples_per_class: a.samples_per_class,
        test_samples_per_class: a.test_samples_per_class,
        dim_brain: a.dim_brain,
        dim_visual: a.dim_visual,
        dim_textual: a.dim_textual,
        repeats_per_stimulus: a.repeats,
        noise_voxel_fraction: a.noise_voxel_fraction,
        extra_pairs: a.extra_pairs,
        extra_visual: a.extra_visual,
        extra_textual: a.extra_textual,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&cfg)?;
    save_dataset(&ds, &a.out)?;
    write_record(&a.out, argv, &[("seed", a.seed.to_string())])
}

fn run_preprocess(a: &PreprocessArgs, argv: &[String]) -> Result<()> {
    let cfg = PreprocessConfig {
        stability_ratio: (!a.no_stability).then_some(a.stability_ratio),
        pca_variance: a.pca_variance,
    };
    let raw = load_dataset(&a.data)?;
    let (model, ds) = fit_pipeline(&raw, &cfg)?;
    save_dataset(&ds, &a.out)?;
    model.save(&a.out.join("preprocess"))?;
    let dims = ds.dims();
    write_record(
        &a.out,
        argv,
        &[
            ("selected_voxels", model.selected_voxels.len().to_string()),
            ("dims", format!("{},{},{}", dims[0], dims[1], dims[2])),
        ],
    )
}

fn run_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.flags.resolve()?;
    cfg.checkpoint_every = a.checkpoint_every;
    let ds = load_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    let outcome = train_run(
        &ds,
        &cfg,
        &RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
        },
    )?;
    if outcome.isolation_violations > 0 {
        return Err(Error::Invalid(format!(
            "{} steps changed parameters outside their stage",
            outcome.isolation_violations
        )));
    }
    let mut settings = config_settings(&cfg);
    settings.push(("steps", outcome.checkpoint.step.to_string()));
    write_record(&a.out, argv, &settings)
}

fn export_latents(dir: &Path, ds: &crate::datamodel::TrimodalDataset, ck: &Checkpoint, opts: &DecodeOptions) -> Result<()> {
    let (train, labels) = classifier_training_set(&ck.params, &ds.novel, &opts.training_subsets()?)?;
    write_matrix_f64(&dir.join("latents_classifier.bvlm"), &train)?;
    let mut text = String::from("label\n");
    for l in labels {
        let _ = writeln!(text, "{l}");
    }
    write_text(&dir.join("latents_classifier_labels.csv"), &text)?;
    if let Some(test) = &ds.test {
        let batch = BatchView::new(vec![(ModalKind::Brain, test.brain.to_f64())])?;
        let z = embed(&ck.params, &batch, ModalitySet::single(ModalKind::Brain))?;
        write_matrix_f64(&dir.join("latents_test_brain.bvlm"), &z)?;
    }
    Ok(())
}

fn run_decode(a: &DecodeArgs, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let opts = a.svm.options(a.paper_scale);
    let (_, mut report) = decode_dataset(&ck.params, &ds, &opts)?;
    create_dir(&a.out)?;
    if let Some(base) = a.compare {
        let base_opts = DecodeOptions {
            modalities: base,
            ..opts.clone()
        };
        let (_, baseline) = decode_dataset(&ck.params, &ds, &base_opts)?;
        baseline.write(&a.out, "baseline")?;
        report = report.with_gains(&baseline)?;
    }
    report.write(&a.out, "report")?;
    if a.export_latents {
        export_latents(&a.out, &ds, &ck, &opts)?;
    }
    let mut settings = vec![
        ("modalities", opts.modalities.to_string().replace(',', "")),
        ("gamma", opts.svm.gamma.to_string()),
        ("c", opts.svm.c.to_string()),
    ];
    settings.extend(config_settings(&ck.config));
    write_record(&a.out, argv, &settings)
}

fn require_data(a: &AnalyzeArgs) -> Result<&Path> {
    a.data
        .as_deref()
        .ok_or_else(|| Error::Config("this analysis needs --data".into()))
}

fn run_analyze(a: &AnalyzeArgs, argv: &[String]) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    create_dir(&a.out)?;
    match a.analysis {
        Analysis::VoxelWeights => {
            let dir = match (&a.preprocess, &a.data) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => d.join("preprocess"),
                (None, None) => return Err(Error::Config("voxel-weights needs --preprocess or --data".into())),
            };
            let model = PreprocessModel::load(&dir)?;
            let map = voxel_contribution(&model.transform(ModalKind::Brain).pca, ck.params.encoder(ModalKind::Brain))?;
            let mut text = String::from("voxel,weight\n");
            for (voxel, w) in model.selected_voxels.iter().zip(&map.weights) {
                let _ = writeln!(text, "{voxel},{w}");
            }
            write_text(&a.out.join("voxel_weights.csv"), &text)?;
        }
        Analysis::Crossgen => {
            let ds = load_dataset(require_data(a)?)?;
            let mut text = String::from("split,rows,pearson\n");
            let synthetic = cross_modal_generate(&ck.params, &ds.seen.visual.to_f64(), &ds.seen.textual.to_f64())?;
            let r = pearson_match(ds.seen.brain.to_f64().view(), synthetic.view())?;
            let _ = writeln!(text, "seen,{},{r}", synthetic.nrows());
            if let Some(test) = &ds.test {
                // Novel classes have no paired brain data; compare class means.
                let generated = cross_modal_generate(&ck.params, &ds.novel.visual.to_f64(), &ds.novel.textual.to_f64())?;
                let (gen_classes, gen_means) = class_means(generated.view(), ds.novel.labels.entries())?;
                let (real_classes, real_means) = class_means(test.brain.to_f64().view(), test.labels.entries())?;
                if gen_classes == real_classes && gen_classes.len() >= 2 {
                    let r = pearson_match(real_means.view(), gen_means.view())?;
                    let _ = writeln!(text, "novel_class_means,{},{r}", gen_classes.len());
                }
            }
            write_text(&a.out.join("crossgen.csv"), &text)?;
        }
        Analysis::Cosine => {
            let ds = load_dataset(require_data(a)?)?;
            let labels = ds.novel.labels.entries();
            let visual = ds.novel.visual.to_f64();
            let textual = ds.novel.textual.to_f64();
            let batch = BatchView::new(vec![(ModalKind::Visual, visual.clone()), (ModalKind::Textual, textual.clone())])?;
            let mut levels: Vec<(String, Array2<f64>)> = vec![
                ("visual_features".into(), class_means(visual.view(), labels)?.1),
                ("textual_features".into(), class_means(textual.view(), labels)?.1),
            ];
            for subset in ["v", "t", "v,t"] {
                let z = embed(&ck.params, &batch, subset.parse()?)?;
                let name = format!("latent_{}", subset.replace(',', ""));
                levels.push((name, class_means(z.view(), labels)?.1));
            }
            if let Some(test) = &ds.test {
                let brain = test.brain.to_f64();
                let z = embed(
                    &ck.params,
                    &BatchView::new(vec![(ModalKind::Brain, brain.clone())])?,
                    ModalitySet::single(ModalKind::Brain),
                )?;
                levels.push(("brain_features".into(), class_means(brain.view(), test.labels.entries())?.1));
                levels.push(("latent_b".into(), class_means(z.view(), test.labels.entries())?.1));
            }
            let mut text = String::from("level,mean,std\n");
            for (name, means) in levels {
                let m = cosine_similarity_matrix(means.view())?;
                write_matrix_f64(&a.out.join(format!("cosine_{name}.bvlm")), &m)?;
                let (mean, std) = off_diagonal_stats(&m);
                let _ = writeln!(text, "{name},{mean},{std}");
            }
            write_text(&a.out.join("cosine.csv"), &text)?;
        }
    }
    write_record(&a.out, argv, &config_settings(&ck.config))
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
}

fn run_ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let variants: Vec<Variant> = parse_list(&a.variants)?;
    let posteriors: Vec<PosteriorKind> = parse_list(&a.posteriors)?;
    if variants.is_empty() || posteriors.is_empty() || a.seeds == 0 {
        return Err(Error::Config("ablate needs at least one variant, posterior and seed".into()));
    }
    let cfg = a.flags.resolve()?;
    let ds = load_dataset(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    create_dir(&a.out)?;
    let rows = run_ablation(
        &ds,
        &cfg,
        &variants,
        &posteriors,
        &seeds,
        &a.svm.options(a.flags.paper_scale),
        |r| eprintln!("{} {} seed {}: top-1 {:.3} top-5 {:.3}", r.variant, r.posterior, r.seed, r.top1, r.top5),
    )?;
    write_text(&a.out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_record(&a.out, argv, &config_settings(&cfg))
}

/// Runs one command. Returns 0 on success, 1 on a runtime failure and 2 on a
/// usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let words: Vec<String> = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a, &words),
        Command::Preprocess(a) => run_preprocess(a, &words),
        Command::Train(a) => run_train(a, &words),
        Command::Decode(a) => run_decode(a, &words),
        Command::Analyze(a) => run_analyze(a, &words),
        Command::Ablate(a) => run_ablate(a, &words),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
