//! The two-stage training loop: per minibatch, one ascent step on the
//! intra-MI bound for the auxiliary networks, then one on the full objective
//! for encoders and decoders. KL annealing, pool interleaving, checkpoints
//! and the per-step CSV log live here too.

mod config;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{read_matrix_f64, write_matrix_f64, Manifest, TrimodalDataset, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::nets::{adam_step, init_params, AdamState, Graph, ModelDims, ModelParams, ModelVars, ParamGroup};
use crate::objectives::{self, total_objective, BatchView, ObjectiveBreakdown, ObjectiveConfig, SampleNoise};

pub use config::TrainConfig;
pub use schedule::{schedule_batches, Pool, ScheduledBatch, TrainingData};

pub const LOG_HEADER: &str = "step,epoch,beta,elbo,recon_b,recon_v,recon_t,kl,intra,inter,total";

/// Independent random streams, so e.g. stage-2 noise does not shift when
/// stage 1 is switched off.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Schedule = 1,
    Stage1 = 2,
    Stage2 = 3,
    Eval = 4,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | index);
    rng
}

/// Separate Adam states for the auxiliary networks and for encoders/decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub model: AdamState,
    pub aux: AdamState,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        OptimState {
            model: AdamState::new(params.n_params(ParamGroup::Model)),
            aux: AdamState::new(params.n_params(ParamGroup::Aux)),
        }
    }
}

/// Whether each stage left the other stage's parameters untouched,
/// judged by hashing them before and after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageIsolation {
    pub model_kept_in_stage1: bool,
    pub aux_kept_in_stage2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub breakdown: ObjectiveBreakdown,
    /// Intra-MI value before the stage-1 update; `None` when stage 1 is skipped.
    pub stage1_intra: Option<f64>,
    pub isolation: StageIsolation,
}

pub fn model_dims(ds: &TrimodalDataset, cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        dims: ds.dims(),
        hidden: cfg.hidden(),
        latent_dim: cfg.latent_dim,
    }
}

/// Stage 1: one Adam ascent step on the intra-MI bound for the auxiliary
/// networks only. Returns the bound before the update.
pub fn stage1_step(
    batch: &BatchView,
    params: &mut ModelParams,
    opt: &mut AdamState,
    obj: &ObjectiveConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let g = Graph::new();
    let vars = ModelVars::bind(&g, params, &[ParamGroup::Aux]);
    let noise = SampleNoise::draw(rng, batch.rows(), params.latent_dim);
    let parts = objectives::elbo(&g, &vars, batch, obj, &noise)?;
    let intra = objectives::intra_mi(&g, &vars, &parts);
    let value = g.scalar(intra);
    let grads = vars.gradients(&g.backward(g.neg(intra))?, params);
    let mut flat = params.flatten(ParamGroup::Aux);
    adam_step(&mut flat, &grads.flatten(ParamGroup::Aux), opt, lr)?;
    params.set_flat(ParamGroup::Aux, &flat)?;
    Ok(value)
}

/// Stage 2: one Adam ascent step on the full objective for encoders and decoders.
pub fn stage2_step(
    batch: &BatchView,
    params: &mut ModelParams,
    opt: &mut AdamState,
    obj: &ObjectiveConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveBreakdown> {
    let g = Graph::new();
    let vars = ModelVars::bind(&g, params, &[ParamGroup::Model]);
    let out = total_objective(&g, &vars, batch, obj, rng)?;
    let breakdown = out.breakdown(&g, obj);
    if !breakdown.total.is_finite() {
        return Err(Error::Invalid(format!("objective became non-finite: {breakdown:?}")));
    }
    let grads = vars.gradients(&g.backward(g.neg(out.total))?, params);
    let mut flat = params.flatten(ParamGroup::Model);
    adam_step(&mut flat, &grads.flatten(ParamGroup::Model), opt, lr)?;
    params.set_flat(ParamGroup::Model, &flat)?;
    Ok(breakdown)
}

/// Both stages on one minibatch. `step` is the global step index and selects
/// the noise streams.
pub fn train_step(
    batch: &BatchView,
    params: &mut ModelParams,
    opt: &mut OptimState,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
) -> Result<StepOutput> {
    let obj = cfg.objective(epoch);
    let mut stage1_intra = None;
    let model_before = params.hash(ParamGroup::Model);
    if obj.lambda1 > 0.0 {
        let mut rng = stream_rng(cfg.seed, Stream::Stage1, step);
        stage1_intra = Some(stage1_step(batch, params, &mut opt.aux, &obj, cfg.lr, &mut rng)?);
    }
    let model_kept_in_stage1 = params.hash(ParamGroup::Model) == model_before;
    let aux_before = params.hash(ParamGroup::Aux);
    let mut rng = stream_rng(cfg.seed, Stream::Stage2, step);
    let breakdown = stage2_step(batch, params, &mut opt.model, &obj, cfg.lr, &mut rng)?;
    let aux_kept_in_stage2 = params.hash(ParamGroup::Aux) == aux_before;
    Ok(StepOutput {
        breakdown,
        stage1_intra,
        isolation: StageIsolation {
            model_kept_in_stage1,
            aux_kept_in_stage2,
        },
    })
}

/// Training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn fresh(ds: &TrimodalDataset, cfg: &TrainConfig) -> Self {
        let params = init_params(&model_dims(ds, cfg), cfg.seed);
        let opt = OptimState::new(&params);
        Checkpoint {
            params,
            opt,
            epoch: 0,
            step: 0,
            config: cfg.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        m.set("kind", "checkpoint");
        m.set("epoch", self.epoch);
        m.set("step", self.step);
        m.set("config_hash", self.config.hash());
        for (key, value) in self.config.to_manifest().entries() {
            m.set(format!("config.{key}"), value);
        }
        for (name, state) in [("model", &self.opt.model), ("aux", &self.opt.aux)] {
            m.set(format!("adam.{name}.step"), state.step);
            for (part, values) in [("m", &state.m), ("v", &state.v)] {
                let file = format!("adam.{name}.{part}.bvlm");
                let row = Array2::from_shape_vec((1, values.len()), values.clone()).expect("row vector");
                write_matrix_f64(&dir.join(&file), &row)?;
                m.set(format!("adam.{name}.{part}"), file);
            }
        }
        self.params.save(dir, &mut m)?;
        m.write(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let m = Manifest::read(&path)?;
        if m.get("kind") != Some("checkpoint") {
            return Err(Error::format(&path, "not a checkpoint manifest"));
        }
        let mut config = TrainConfig::desk_scale();
        for (key, value) in m.entries() {
            if let Some(k) = key.strip_prefix("config.") {
                config.set(k, value)?;
            }
        }
        if m.require("config_hash", &path)? != config.hash() {
            return Err(Error::format(&path, "config hash does not match the stored config"));
        }
        let params = ModelParams::load(dir, &m)?;
        let mut opt = OptimState::new(&params);
        for (name, state) in [("model", &mut opt.model), ("aux", &mut opt.aux)] {
            state.step = m.parse_value(&format!("adam.{name}.step"), &path)?;
            for part in ["m", "v"] {
                let file = m.require(&format!("adam.{name}.{part}"), &path)?;
                let values = read_matrix_f64(&dir.join(file))?;
                let target = if part == "m" { &mut state.m } else { &mut state.v };
                if values.len() != target.len() {
                    return Err(Error::format(&path, format!("adam.{name}.{part} has the wrong length")));
                }
                target.copy_from_slice(values.as_slice().expect("standard layout"));
            }
        }
        Ok(Checkpoint {
            params,
            opt,
            epoch: m.parse_value("epoch", &path)?,
            step: m.parse_value("step", &path)?,
            config,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: ObjectiveBreakdown,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let b = &self.breakdown;
        let recon: Vec<String> = b.recon.iter().map(|r| r.map_or(String::new(), |v| v.to_string())).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, b.beta, b.elbo, recon[0], recon[1], recon[2], b.kl, b.intra, b.inter, b.total
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory receiving `checkpoint/`, periodic `checkpoint-epochN/` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Steps in which a stage changed the other stage's parameters.
    pub isolation_violations: usize,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn train_run(ds: &TrimodalDataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let data = TrainingData::from_dataset(ds)?;
    let mut state = match &opts.resume {
        Some(c) => {
            if !cfg.resumable_from(&c.config) {
                return Err(Error::Config("checkpoint was written with a different config".into()));
            }
            if c.params.dims() != model_dims(ds, cfg) {
                return Err(Error::Shape("checkpoint dimensions do not match the dataset".into()));
            }
            Checkpoint {
                config: cfg.clone(),
                ..c.clone()
            }
        }
        None => Checkpoint::fresh(ds, cfg),
    };

    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let append = opts.resume.is_some() && path.exists();
            let file = if append {
                OpenOptions::new().append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if !append {
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut violations = 0;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = stream_rng(cfg.seed, Stream::Schedule, epoch as u64);
        for scheduled in schedule_batches(&data, cfg.batch_size, &mut rng)? {
            let batch = data.batch(&scheduled)?;
            let out = train_step(&batch, &mut state.params, &mut state.opt, cfg, epoch, state.step)?;
            if !(out.isolation.model_kept_in_stage1 && out.isolation.aux_kept_in_stage2) {
                violations += 1;
            }
            let row = LogRow {
                step: state.step,
                epoch,
                breakdown: out.breakdown,
            };
            if let Some((w, path)) = writer.as_mut() {
                writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(row);
            state.step += 1;
        }
        state.epoch += 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs {
                state.save(&dir.join(format!("checkpoint-epoch{}", state.epoch)))?;
            }
        }
    }
    if let Some((w, path)) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainOutcome {
        checkpoint: state,
        log,
        isolation_violations: violations,
    })
}

/// ELBO on the whole seen pool with `beta = 1` and a fixed noise draw.
pub fn seen_elbo(params: &ModelParams, ds: &TrimodalDataset, cfg: &TrainConfig) -> Result<f64> {
    let data = TrainingData::from_dataset(ds)?;
    let batch = data.seen().all()?;
    let obj = ObjectiveConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        beta: 1.0,
        ..cfg.objective(0)
    };
    let mut rng = stream_rng(cfg.seed, Stream::Eval, 0);
    Ok(objectives::evaluate(params, &batch, &obj, &mut rng)?.elbo)
}
