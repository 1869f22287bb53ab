use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datamodel::Manifest;
use crate::error::{Error, Result};
use crate::gaussian::PosteriorKind;
use crate::objectives::{ObjectiveConfig, ReconScheme};

/// Training hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_brain: usize,
    pub hidden_visual: usize,
    pub hidden_textual: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// CUBO sample count.
    pub k: usize,
    /// KL weight added per epoch; the weight is `min(1, anneal_rate * (epoch + 1))`.
    pub anneal_rate: f64,
    pub posterior_type: PosteriorKind,
    pub negatives_per_type: usize,
    pub seed: u64,
    pub intra_off: bool,
    pub inter_off: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub recon_scheme: ReconScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_scale()
    }
}

const KEYS: [&str; 18] = [
    "latent_dim",
    "hidden_brain",
    "hidden_visual",
    "hidden_textual",
    "lr",
    "batch_size",
    "epochs",
    "lambda1",
    "lambda2",
    "k",
    "anneal_rate",
    "posterior_type",
    "negatives_per_type",
    "seed",
    "intra_off",
    "inter_off",
    "checkpoint_every",
    "recon_scheme",
];

impl TrainConfig {
    /// Small networks for synthetic data on one CPU core. The CUBO sample
    /// count is lowered from 30 to 10 to fit the runtime budget, and the
    /// learning rate raised from 1e-4 because 100 epochs of a small dataset
    /// give only about 900 steps.
    pub fn desk_scale() -> Self {
        TrainConfig {
            latent_dim: 32,
            hidden_brain: 64,
            hidden_visual: 64,
            hidden_textual: 64,
            lr: 3e-3,
            batch_size: 128,
            epochs: 100,
            lambda1: 0.001,
            lambda2: 0.001,
            k: 10,
            anneal_rate: 0.01,
            posterior_type: PosteriorKind::Mopoe,
            negatives_per_type: 1,
            seed: 0,
            intra_off: false,
            inter_off: false,
            checkpoint_every: 0,
            recon_scheme: ReconScheme::SampleComponent,
        }
    }

    /// Widths and batch size for real precomputed features.
    pub fn paper_scale() -> Self {
        TrainConfig {
            hidden_brain: 512,
            hidden_visual: 2048,
            hidden_textual: 512,
            batch_size: 512,
            lr: 1e-4,
            k: 30,
            ..TrainConfig::desk_scale()
        }
    }

    pub fn hidden(&self) -> [usize; 3] {
        [self.hidden_brain, self.hidden_visual, self.hidden_textual]
    }

    pub fn effective_lambda1(&self) -> f64 {
        if self.intra_off {
            0.0
        } else {
            self.lambda1
        }
    }

    pub fn effective_lambda2(&self) -> f64 {
        if self.inter_off {
            0.0
        } else {
            self.lambda2
        }
    }

    /// KL weight for a zero-based epoch.
    pub fn beta(&self, epoch: usize) -> f64 {
        (self.anneal_rate * (epoch + 1) as f64).min(1.0)
    }

    pub fn objective(&self, epoch: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda1: self.effective_lambda1(),
            lambda2: self.effective_lambda2(),
            k: self.k,
            beta: self.beta(epoch),
            negatives_per_type: self.negatives_per_type,
            posterior: self.posterior_type,
            recon_scheme: self.recon_scheme,
            ..ObjectiveConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hidden_brain", self.hidden_brain),
            ("hidden_visual", self.hidden_visual),
            ("hidden_textual", self.hidden_textual),
            ("negatives_per_type", self.negatives_per_type),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate <= 1.0) {
            return Err(Error::Config(format!("anneal_rate must lie in (0, 1], got {}", self.anneal_rate)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("latent_dim", self.latent_dim);
        m.set("hidden_brain", self.hidden_brain);
        m.set("hidden_visual", self.hidden_visual);
        m.set("hidden_textual", self.hidden_textual);
        m.set("lr", self.lr);
        m.set("batch_size", self.batch_size);
        m.set("epochs", self.epochs);
        m.set("lambda1", self.lambda1);
        m.set("lambda2", self.lambda2);
        m.set("k", self.k);
        m.set("anneal_rate", self.anneal_rate);
        m.set("posterior_type", self.posterior_type);
        m.set("negatives_per_type", self.negatives_per_type);
        m.set("seed", self.seed);
        m.set("intra_off", self.intra_off);
        m.set("inter_off", self.inter_off);
        m.set("checkpoint_every", self.checkpoint_every);
        m.set(
            "recon_scheme",
            match self.recon_scheme {
                ReconScheme::SampleComponent => "sample",
                ReconScheme::AllComponents => "all",
            },
        );
        m
    }

    pub fn to_text(&self) -> String {
        self.to_manifest().to_text()
    }

    /// Applies every `key=value` of `m` on top of `self`; unknown keys are errors.
    pub fn apply(&mut self, m: &Manifest) -> Result<()> {
        for (key, value) in m.entries() {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "hidden_brain" => self.hidden_brain = parse(key, value)?,
            "hidden_visual" => self.hidden_visual = parse(key, value)?,
            "hidden_textual" => self.hidden_textual = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "anneal_rate" => self.anneal_rate = parse(key, value)?,
            "posterior_type" => self.posterior_type = value.parse()?,
            "negatives_per_type" => self.negatives_per_type = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "intra_off" => self.intra_off = parse(key, value)?,
            "inter_off" => self.inter_off = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "recon_scheme" => {
                self.recon_scheme = match value.trim() {
                    "sample" => ReconScheme::SampleComponent,
                    "all" => ReconScheme::AllComponents,
                    other => return Err(Error::Config(format!("unknown recon_scheme `{other}`"))),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (expected one of {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Reads a flat `key=value` file over the desk-scale defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::desk_scale();
        cfg.apply(&Manifest::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether a run under `self` may continue a checkpoint written under
    /// `other`: everything except the epoch budget and checkpoint cadence
    /// must agree.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let normalize = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        normalize(self).hash() == normalize(other).hash()
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
