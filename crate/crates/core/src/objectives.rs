//! Training objectives on a minibatch: the mixture-posterior ELBO, the
//! intra-modality MI bound through the auxiliary posteriors, the CUBO
//! estimator and the contrastive inter-modality MI surrogate.
//!
//! Everything here builds nodes on a [`Graph`], so the same code yields both
//! values and exact gradients. Noise is drawn from the caller's RNG in a fixed
//! order and never depends on parameters, so reseeding reproduces a call.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::ModalKind;
use crate::error::{Error, Result};
use crate::gaussian::{ModalitySet, PosteriorKind, HALF_LN_2PI, LOGVAR_MAX, LOGVAR_MIN};
use crate::nets::{Graph, ModelParams, ModelVars, Var};

/// Aligned feature blocks for the modalities present in one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchView {
    blocks: [Option<Array2<f64>>; 3],
    rows: usize,
}

impl BatchView {
    pub fn new(blocks: Vec<(ModalKind, Array2<f64>)>) -> Result<Self> {
        let mut out: [Option<Array2<f64>>; 3] = Default::default();
        let mut rows = None;
        for (kind, x) in blocks {
            if *rows.get_or_insert(x.nrows()) != x.nrows() {
                return Err(Error::Shape("modality blocks have different row counts".into()));
            }
            if out[kind.index()].replace(x).is_some() {
                return Err(Error::Invalid(format!("modality {} given twice", kind.name())));
            }
        }
        match rows {
            None => Err(Error::Invalid("batch without modalities".into())),
            Some(0) => Err(Error::Invalid("empty batch".into())),
            Some(rows) => Ok(BatchView { blocks: out, rows }),
        }
    }

    pub fn present(&self) -> ModalitySet {
        ModalitySet::from_kinds(ModalKind::ALL.into_iter().filter(|k| self.blocks[k.index()].is_some()))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn block(&self, kind: ModalKind) -> Option<ArrayView2<'_, f64>> {
        self.blocks[kind.index()].as_ref().map(|b| b.view())
    }
}

/// Which latent sample(s) the reconstruction term is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconScheme {
    /// One uniformly chosen mixture component per row.
    SampleComponent,
    /// One sample from every component, averaged.
    AllComponents,
}

/// How the KL term of the ELBO is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlEstimator {
    /// Average of the closed-form component KLs (an upper bound on the mixture KL).
    Analytic,
    /// `log q(z) - log p(z)` at the drawn sample.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// CUBO sample count.
    pub k: usize,
    /// KL annealing weight.
    pub beta: f64,
    pub negatives_per_type: usize,
    pub recon_weights: [f64; 3],
    pub posterior: PosteriorKind,
    pub recon_scheme: ReconScheme,
    pub kl_estimator: KlEstimator,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda1: 0.001,
            lambda2: 0.001,
            k: 30,
            beta: 1.0,
            negatives_per_type: 1,
            recon_weights: [1.0; 3],
            posterior: PosteriorKind::Mopoe,
            recon_scheme: ReconScheme::SampleComponent,
            kl_estimator: KlEstimator::Analytic,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("CUBO needs at least 2 samples, got {}", self.k)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.negatives_per_type == 0 {
            return Err(Error::Config("negatives_per_type must be positive".into()));
        }
        if self.recon_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("reconstruction weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar values of every term, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    pub elbo: f64,
    pub recon: [Option<f64>; 3],
    pub kl: f64,
    pub intra: f64,
    pub inter: f64,
    pub inter_positive: f64,
    pub inter_negative: f64,
    pub negative_tuples: usize,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

/// Uniform component choices and standard-normal draws for `rows` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise {
    /// Uniform in `[0, 1)`; mapped to a component index per row.
    pub choice: Vec<f64>,
    pub eps: Array2<f64>,
}

impl SampleNoise {
    pub fn draw(rng: &mut impl Rng, rows: usize, latent: usize) -> Self {
        let choice = (0..rows).map(|_| rng.random::<f64>()).collect();
        let eps = Array2::from_shape_simple_fn((rows, latent), || StandardNormal.sample(rng));
        SampleNoise { choice, eps }
    }

    pub fn zeros(rows: usize, latent: usize) -> Self {
        SampleNoise {
            choice: vec![0.0; rows],
            eps: Array2::zeros((rows, latent)),
        }
    }

    fn components(&self, n: usize) -> Vec<usize> {
        self.choice
            .iter()
            .map(|u| ((u * n as f64) as usize).min(n - 1))
            .collect()
    }
}

/// A per-row diagonal Gaussian on the graph.
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mean: Var,
    pub logvar: Var,
}

/// The mixture posterior of a batch, one entry per component.
#[derive(Debug, Clone)]
pub struct MixtureVars {
    pub subsets: Vec<ModalitySet>,
    pub components: Vec<GaussVars>,
}

/// Encoder outputs and data for each present modality.
#[derive(Debug, Clone)]
pub struct Encoded {
    present: ModalitySet,
    rows: usize,
    x: [Option<Var>; 3],
    experts: [Option<GaussVars>; 3],
}

impl Encoded {
    pub fn new(g: &Graph, vars: &ModelVars, batch: &BatchView) -> Self {
        let mut x = [None; 3];
        let mut experts = [None; 3];
        for kind in batch.present().kinds() {
            let xv = g.constant(batch.block(kind).expect("present").to_owned());
            let (mean, logvar) = vars.encode(g, kind, xv);
            x[kind.index()] = Some(xv);
            experts[kind.index()] = Some(GaussVars { mean, logvar });
        }
        Encoded {
            present: batch.present(),
            rows: batch.rows(),
            x,
            experts,
        }
    }

    pub fn present(&self) -> ModalitySet {
        self.present
    }

    /// The same tuple with the blocks of `shifted` rotated by `shift` rows.
    fn shifted(&self, g: &Graph, shifted: ModalitySet, shift: usize) -> Encoded {
        let index: Vec<usize> = (0..self.rows).map(|i| (i + shift) % self.rows).collect();
        let mut out = self.clone();
        for kind in shifted.kinds() {
            let i = kind.index();
            let x = self.x[i].expect("shifted modality is present");
            let e = self.experts[i].expect("shifted modality is present");
            out.x[i] = Some(g.gather_rows(x, &index));
            out.experts[i] = Some(GaussVars {
                mean: g.gather_rows(e.mean, &index),
                logvar: g.gather_rows(e.logvar, &index),
            });
        }
        out
    }

    /// Rows repeated `k` times each (row `i * k + j` is row `i`).
    fn expanded(&self, g: &Graph, k: usize) -> (Vec<usize>, [Option<Var>; 3]) {
        let index: Vec<usize> = (0..self.rows * k).map(|r| r / k).collect();
        let x = self.x.map(|x| x.map(|x| g.gather_rows(x, &index)));
        (index, x)
    }
}

/// Precision-weighted product on the graph; a single expert passes through.
pub fn poe_vars(g: &Graph, experts: &[GaussVars]) -> GaussVars {
    if experts.len() == 1 {
        return experts[0];
    }
    let precisions: Vec<Var> = experts.iter().map(|e| g.exp(g.neg(e.logvar))).collect();
    let mut total = precisions[0];
    let mut weighted = g.mul(precisions[0], experts[0].mean);
    for (p, e) in precisions.iter().zip(experts).skip(1) {
        total = g.add(total, *p);
        weighted = g.add(weighted, g.mul(*p, e.mean));
    }
    GaussVars {
        mean: g.div(weighted, total),
        logvar: g.clamp(g.neg(g.ln(total)), LOGVAR_MIN, LOGVAR_MAX),
    }
}

pub fn mixture_vars(g: &Graph, enc: &Encoded, kind: PosteriorKind) -> MixtureVars {
    let subsets = kind.components(enc.present);
    let components = subsets
        .iter()
        .map(|s| {
            let members: Vec<GaussVars> = s.kinds().map(|k| enc.experts[k.index()].expect("present")).collect();
            poe_vars(g, &members)
        })
        .collect();
    MixtureVars { subsets, components }
}

/// Per-row diagonal-Gaussian log-density, `n x 1`.
pub fn log_density(g: &Graph, z: Var, q: GaussVars) -> Var {
    let latent = g.shape(z).1 as f64;
    let diff = g.sub(z, q.mean);
    let quad = g.mul(g.square(diff), g.exp(g.neg(q.logvar)));
    let sum = g.sum_cols(g.add(quad, q.logvar));
    g.add_scalar(g.scale(sum, -0.5), -latent * HALF_LN_2PI)
}

/// Per-row standard-normal log-density, `n x 1`.
pub fn prior_log_density(g: &Graph, z: Var) -> Var {
    let latent = g.shape(z).1 as f64;
    g.add_scalar(g.scale(g.sum_cols(g.square(z)), -0.5), -latent * HALF_LN_2PI)
}

/// Per-row uniform-mixture log-density, `n x 1`.
pub fn mixture_log_density(g: &Graph, z: Var, mix: &[GaussVars]) -> Var {
    let parts: Vec<Var> = mix.iter().map(|c| log_density(g, z, *c)).collect();
    let stacked = g.concat_cols(&parts);
    g.add_scalar(g.logsumexp_cols(stacked), -(mix.len() as f64).ln())
}

/// Per-row `KL(q || N(0, I))`, `n x 1`.
pub fn kl_rows(g: &Graph, q: GaussVars) -> Var {
    let latent = g.shape(q.mean).1 as f64;
    let inner = g.sub(g.add(g.square(q.mean), g.exp(q.logvar)), q.logvar);
    g.add_scalar(g.scale(g.sum_cols(inner), 0.5), -0.5 * latent)
}

/// Per-row unit-variance Gaussian log-likelihood, `n x 1`.
pub fn recon_rows(g: &Graph, x: Var, x_hat: Var) -> Var {
    let d = g.shape(x).1 as f64;
    let sq = g.sum_cols(g.square(g.sub(x, x_hat)));
    g.add_scalar(g.scale(sq, -0.5), -d * HALF_LN_2PI)
}

/// Batch-mean reconstruction log-likelihood.
pub fn recon_loglik(g: &Graph, x: Var, x_hat: Var) -> Var {
    g.mean_all(recon_rows(g, x, x_hat))
}

/// Plain-value version of [`recon_loglik`].
pub fn recon_loglik_value(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let d = x.ncols() as f64;
    let sq: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * sq / x.nrows() as f64 - d * HALF_LN_2PI)
}

/// Reparameterised sample with row `r` drawn from component `choice[r]`.
fn sample_rows(g: &Graph, comps: &[GaussVars], choice: &[usize], eps: &Array2<f64>) -> Var {
    let mean = g.pick_rows(&comps.iter().map(|c| c.mean).collect::<Vec<_>>(), choice);
    let logvar = g.pick_rows(&comps.iter().map(|c| c.logvar).collect::<Vec<_>>(), choice);
    let noise = g.constant(eps.clone());
    g.add(mean, g.mul(g.exp(g.scale(logvar, 0.5)), noise))
}

/// One latent draw with its decoded means.
#[derive(Debug, Clone)]
pub struct Draw {
    pub z: Var,
    pub x_hat: [Option<Var>; 3],
}

/// Graph nodes of the ELBO and its parts.
#[derive(Debug, Clone)]
pub struct ElboParts {
    pub encoded: Encoded,
    pub mixture: MixtureVars,
    pub draws: Vec<Draw>,
    /// Batch-mean log-likelihood per present modality.
    pub recon: [Option<Var>; 3],
    /// Weighted sum of `recon`.
    pub recon_total: Var,
    pub kl: Var,
    /// `recon_total - beta * kl`.
    pub elbo: Var,
}

pub fn elbo(
    g: &Graph,
    vars: &ModelVars,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
    noise: &SampleNoise,
) -> Result<ElboParts> {
    let encoded = Encoded::new(g, vars, batch);
    elbo_from(g, vars, encoded, cfg, noise)
}

fn elbo_from(
    g: &Graph,
    vars: &ModelVars,
    encoded: Encoded,
    cfg: &ObjectiveConfig,
    noise: &SampleNoise,
) -> Result<ElboParts> {
    let n = encoded.rows;
    if noise.choice.len() != n || noise.eps.dim() != (n, vars.latent_dim) {
        return Err(Error::Shape(format!(
            "noise for {} rows x {} dims, batch of {n} x {}",
            noise.choice.len(),
            noise.eps.ncols(),
            vars.latent_dim
        )));
    }
    let mixture = mixture_vars(g, &encoded, cfg.posterior);
    let c = mixture.components.len();
    let choices: Vec<Vec<usize>> = match cfg.recon_scheme {
        ReconScheme::SampleComponent => vec![noise.components(c)],
        ReconScheme::AllComponents => (0..c).map(|j| vec![j; n]).collect(),
    };
    let draws: Vec<Draw> = choices
        .iter()
        .map(|choice| {
            let z = sample_rows(g, &mixture.components, choice, &noise.eps);
            let x_hat = ModalKind::ALL.map(|k| encoded.present.contains(k).then(|| vars.decode(g, k, z)));
            Draw { z, x_hat }
        })
        .collect();
    let scale = 1.0 / draws.len() as f64;

    let mut recon = [None; 3];
    let mut recon_total: Option<Var> = None;
    for kind in encoded.present.kinds() {
        let x = encoded.x[kind.index()].expect("present");
        let per_draw: Vec<Var> = draws
            .iter()
            .map(|d| recon_loglik(g, x, d.x_hat[kind.index()].expect("present")))
            .collect();
        let r = g.scale(sum_vars(g, &per_draw), scale);
        recon[kind.index()] = Some(r);
        let weighted = g.scale(r, cfg.recon_weights[kind.index()]);
        recon_total = Some(match recon_total {
            Some(t) => g.add(t, weighted),
            None => weighted,
        });
    }
    let recon_total = recon_total.expect("at least one modality");

    let kl = match cfg.kl_estimator {
        KlEstimator::Analytic => {
            let per_comp: Vec<Var> = mixture.components.iter().map(|q| kl_rows(g, *q)).collect();
            g.scale(g.mean_all(sum_vars(g, &per_comp)), 1.0 / c as f64)
        }
        KlEstimator::Sampled => {
            let per_draw: Vec<Var> = draws
                .iter()
                .map(|d| {
                    let lq = mixture_log_density(g, d.z, &mixture.components);
                    g.mean_all(g.sub(lq, prior_log_density(g, d.z)))
                })
                .collect();
            g.scale(sum_vars(g, &per_draw), scale)
        }
    };
    let elbo = g.sub(recon_total, g.scale(kl, cfg.beta));
    Ok(ElboParts {
        encoded,
        mixture,
        draws,
        recon,
        recon_total,
        kl,
        elbo,
    })
}

fn sum_vars(g: &Graph, vars: &[Var]) -> Var {
    vars[1..].iter().fold(vars[0], |acc, v| g.add(acc, *v))
}

/// `sum_m log Q_m(z | x_hat_m)`, batch mean, at the ELBO's latent draw(s).
pub fn intra_mi(g: &Graph, vars: &ModelVars, parts: &ElboParts) -> Var {
    let per_draw: Vec<Var> = parts
        .draws
        .iter()
        .map(|d| {
            let terms: Vec<Var> = parts
                .encoded
                .present
                .kinds()
                .map(|k| {
                    let (mean, logvar) = vars.aux_posterior(g, k, d.x_hat[k.index()].expect("present"));
                    g.mean_all(log_density(g, d.z, GaussVars { mean, logvar }))
                })
                .collect();
            sum_vars(g, &terms)
        })
        .collect();
    g.scale(sum_vars(g, &per_draw), 1.0 / parts.draws.len() as f64)
}

/// Per-row CUBO, `n x 1`. `noise` has `n * k` rows, row `i * k + j` being
/// sample `j` of batch row `i`.
fn cubo_rows(g: &Graph, vars: &ModelVars, enc: &Encoded, cfg: &ObjectiveConfig, noise: &SampleNoise) -> Result<Var> {
    let (n, k) = (enc.rows, cfg.k);
    if k < 2 {
        return Err(Error::Config(format!("CUBO needs at least 2 samples, got {k}")));
    }
    if noise.choice.len() != n * k || noise.eps.dim() != (n * k, vars.latent_dim) {
        return Err(Error::Shape(format!("CUBO noise must have {} rows", n * k)));
    }
    let mixture = mixture_vars(g, enc, cfg.posterior);
    let (index, x) = enc.expanded(g, k);
    // Per-component quantities are computed once per batch row and then
    // gathered to the `n * k` sample rows.
    let comps = &mixture.components;
    let choice = noise.components(comps.len());
    let means: Vec<Var> = comps.iter().map(|q| q.mean).collect();
    let stds: Vec<Var> = comps.iter().map(|q| g.exp(g.scale(q.logvar, 0.5))).collect();
    let z = g.add(
        g.pick_gather(&means, &choice, &index),
        g.mul(g.pick_gather(&stds, &choice, &index), g.constant(noise.eps.clone())),
    );
    let latent = vars.latent_dim as f64;
    let log_q: Vec<Var> = comps
        .iter()
        .map(|q| {
            let precision = g.gather_rows(g.exp(g.neg(q.logvar)), &index);
            let logdet = g.gather_rows(g.sum_cols(q.logvar), &index);
            let diff = g.sub(z, g.gather_rows(q.mean, &index));
            let quad = g.sum_cols(g.mul(g.square(diff), precision));
            g.add_scalar(g.scale(g.add(quad, logdet), -0.5), -latent * HALF_LN_2PI)
        })
        .collect();
    let log_mix = g.add_scalar(g.logsumexp_cols(g.concat_cols(&log_q)), -(comps.len() as f64).ln());
    let mut w = g.sub(prior_log_density(g, z), log_mix);
    for kind in enc.present.kinds() {
        let x_hat = vars.decode(g, kind, z);
        w = g.add(w, recon_rows(g, x[kind.index()].expect("present"), x_hat));
    }
    let w = g.reshape(w, n, k);
    Ok(g.scale(g.add_scalar(g.logsumexp_cols(g.scale(w, 2.0)), -(k as f64).ln()), 0.5))
}

/// Batch-mean CUBO of the batch's own tuples.
pub fn cubo(g: &Graph, vars: &ModelVars, batch: &BatchView, cfg: &ObjectiveConfig, noise: &SampleNoise) -> Result<Var> {
    let enc = Encoded::new(g, vars, batch);
    Ok(g.mean_all(cubo_rows(g, vars, &enc, cfg, noise)?))
}

/// Modality blocks shifted to form each negative type, in order.
pub fn negative_types(present: ModalitySet) -> Vec<ModalitySet> {
    use ModalKind::{Brain as B, Textual as T, Visual as V};
    let set = |ks: &[ModalKind]| ModalitySet::from_kinds(ks.iter().copied());
    match present.len() {
        3 => vec![set(&[T]), set(&[B, V]), set(&[V, T]), set(&[B]), set(&[V]), set(&[B, T])],
        2 => {
            let kinds: Vec<ModalKind> = present.kinds().collect();
            vec![set(&[kinds[1]]), set(&[kinds[0]])]
        }
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct InterParts {
    /// `(types / 2) * elbo`, the positive term (0 on unimodal batches).
    pub positive: Var,
    /// Sum over types of the per-row log-sum-exp of negative CUBOs, batch mean.
    pub negative: Var,
    pub value: Var,
    pub negative_tuples: usize,
}

/// Contrastive surrogate: positive-tuple ELBO against CUBOs of row-shifted
/// negatives. `positive_elbo` is the ELBO of the batch at `beta = 1`.
pub fn inter_mi(
    g: &Graph,
    vars: &ModelVars,
    encoded: &Encoded,
    positive_elbo: Var,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<InterParts> {
    let types = negative_types(encoded.present);
    if types.is_empty() {
        let zero = g.constant(Array2::zeros((1, 1)));
        return Ok(InterParts {
            positive: zero,
            negative: zero,
            value: zero,
            negative_tuples: 0,
        });
    }
    let n = encoded.rows;
    if n < 2 {
        return Err(Error::Invalid("negatives need a batch of at least 2 rows".into()));
    }
    let shifts = cfg.negatives_per_type.min(n - 1);
    let mut per_type = Vec::with_capacity(types.len());
    for t in &types {
        let mut cubos = Vec::with_capacity(shifts);
        for shift in 1..=shifts {
            let neg = encoded.shifted(g, *t, shift);
            let noise = SampleNoise::draw(rng, n * cfg.k, vars.latent_dim);
            cubos.push(cubo_rows(g, vars, &neg, cfg, &noise)?);
        }
        let stacked = if cubos.len() == 1 { cubos[0] } else { g.concat_cols(&cubos) };
        per_type.push(g.mean_all(g.logsumexp_cols(stacked)));
    }
    let negative = sum_vars(g, &per_type);
    let positive = g.scale(positive_elbo, types.len() as f64 / 2.0);
    Ok(InterParts {
        positive,
        negative,
        value: g.sub(positive, negative),
        negative_tuples: types.len() * shifts,
    })
}

/// Graph nodes of the full objective.
#[derive(Debug, Clone)]
pub struct ObjectiveGraph {
    pub elbo: ElboParts,
    pub intra: Option<Var>,
    pub inter: Option<InterParts>,
    pub total: Var,
}

/// `L_M + lambda1 * L_intra + lambda2 * L_inter`, sharing one latent draw
/// between the ELBO and the intra term. Terms with a zero weight are skipped.
pub fn total_objective(
    g: &Graph,
    vars: &ModelVars,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<ObjectiveGraph> {
    cfg.validate()?;
    let noise = SampleNoise::draw(rng, batch.rows(), vars.latent_dim);
    let parts = elbo(g, vars, batch, cfg, &noise)?;
    let mut total = parts.elbo;
    let intra = (cfg.lambda1 > 0.0).then(|| intra_mi(g, vars, &parts));
    if let Some(i) = intra {
        total = g.add(total, g.scale(i, cfg.lambda1));
    }
    let inter = if cfg.lambda2 > 0.0 {
        let positive_elbo = g.sub(parts.recon_total, parts.kl);
        let inter = inter_mi(g, vars, &parts.encoded, positive_elbo, cfg, rng)?;
        total = g.add(total, g.scale(inter.value, cfg.lambda2));
        Some(inter)
    } else {
        None
    };
    Ok(ObjectiveGraph {
        elbo: parts,
        intra,
        inter,
        total,
    })
}

impl ObjectiveGraph {
    pub fn breakdown(&self, g: &Graph, cfg: &ObjectiveConfig) -> ObjectiveBreakdown {
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        ObjectiveBreakdown {
            elbo: g.scalar(self.elbo.elbo),
            recon: self.elbo.recon.map(|r| r.map(|v| g.scalar(v))),
            kl: g.scalar(self.elbo.kl),
            intra: value(self.intra),
            inter: value(self.inter.as_ref().map(|i| i.value)),
            inter_positive: value(self.inter.as_ref().map(|i| i.positive)),
            inter_negative: value(self.inter.as_ref().map(|i| i.negative)),
            negative_tuples: self.inter.as_ref().map_or(0, |i| i.negative_tuples),
            beta: cfg.beta,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            total: g.scalar(self.total),
        }
    }
}

/// Evaluates the full objective without recording gradients.
pub fn evaluate(
    params: &ModelParams,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<ObjectiveBreakdown> {
    let g = Graph::new();
    let vars = ModelVars::bind(&g, params, &[]);
    let obj = total_objective(&g, &vars, batch, cfg, rng)?;
    Ok(obj.breakdown(&g, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{self, DiagGaussian};
    use crate::nets::{encode, init_params, ModelDims, ParamGroup};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn dims() -> ModelDims {
        ModelDims {
            dims: [4, 3, 2],
            hidden: [5, 4, 3],
            latent_dim: 2,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, kinds: &[ModalKind], rows: usize) -> BatchView {
        let d = dims().dims;
        BatchView::new(
            kinds
                .iter()
                .map(|&k| {
                    let x = Array2::from_shape_simple_fn((rows, d[k.index()]), || rng.random_range(-1.0..1.0));
                    (k, x)
                })
                .collect(),
        )
        .unwrap()
    }

    /// Random weights and biases, so no rectifier input sits exactly at 0.
    fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
        let mut p = init_params(&dims(), rng.random());
        for group in [ParamGroup::Model, ParamGroup::Aux] {
            let flat: Vec<f64> = p.flatten(group).iter().map(|v| 0.5 * v + rng.random_range(-0.1..0.1)).collect();
            p.set_flat(group, &flat).unwrap();
        }
        p
    }

    #[test]
    fn batch_view_validation() {
        assert!(BatchView::new(vec![]).is_err());
        assert!(BatchView::new(vec![(ModalKind::Visual, Array2::zeros((0, 3)))]).is_err());
        assert!(BatchView::new(vec![
            (ModalKind::Visual, Array2::zeros((2, 3))),
            (ModalKind::Textual, Array2::zeros((3, 2)))
        ])
        .is_err());
        let b = BatchView::new(vec![
            (ModalKind::Textual, Array2::zeros((2, 2))),
            (ModalKind::Visual, Array2::zeros((2, 3))),
        ])
        .unwrap();
        assert_eq!(b.present().to_string(), "v,t");
    }

    #[test]
    fn recon_loglik_values() {
        let x = array![[0.0]];
        assert!((recon_loglik_value(x.view(), x.view()).unwrap() + 0.9189).abs() < 1e-4);
        let x = array![[1.0, 1.0]];
        let xh = array![[0.0, 0.0]];
        let v = recon_loglik_value(x.view(), xh.view()).unwrap();
        assert!((v + 2.8379).abs() < 1e-4);

        // Direct density oracle on a random 3-D case.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((1, 3), || rng.random_range(-2.0..2.0));
        let xh = Array2::from_shape_simple_fn((1, 3), || rng.random_range(-2.0..2.0));
        let direct: f64 = (0..3)
            .map(|d| {
                let r = x[[0, d]] - xh[[0, d]];
                ((-0.5f64 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt()).ln()
            })
            .sum();
        assert!((recon_loglik_value(x.view(), xh.view()).unwrap() - direct).abs() < 1e-12);
        let g = Graph::new();
        let r = recon_loglik(&g, g.constant(x), g.constant(xh));
        assert!((g.scalar(r) - direct).abs() < 1e-12);
    }

    #[test]
    fn graph_poe_matches_plain_poe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let experts: Vec<DiagGaussian> = (0..3)
            .map(|_| {
                DiagGaussian::new(
                    (0..2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    (0..2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let refs: Vec<&DiagGaussian> = experts.iter().collect();
        let plain = gaussian::poe_combine(&refs).unwrap();
        let g = Graph::new();
        let vars: Vec<GaussVars> = experts
            .iter()
            .map(|e| GaussVars {
                mean: g.constant(Array2::from_shape_vec((1, 2), e.mean.clone()).unwrap()),
                logvar: g.constant(Array2::from_shape_vec((1, 2), e.logvar.clone()).unwrap()),
            })
            .collect();
        let p = poe_vars(&g, &vars);
        for d in 0..2 {
            assert!((g.value(p.mean)[[0, d]] - plain.mean[d]).abs() < 1e-12);
            assert!((g.value(p.logvar)[[0, d]] - plain.logvar[d]).abs() < 1e-12);
        }
        let z = [0.3, -0.7];
        let lp = log_density(&g, g.constant(array![[0.3, -0.7]]), p);
        assert!((g.scalar(lp) - gaussian::log_prob(&plain, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mixture_terms_match_plain_versions() {
        let params = init_params(&dims(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, &ModalKind::ALL, 3);
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &params, &[]);
        let enc = Encoded::new(&g, &vars, &batch);
        let mix = mixture_vars(&g, &enc, PosteriorKind::Mopoe);
        assert_eq!(mix.components.len(), 7);
        let z = array![[0.1, 0.2], [-0.5, 1.0], [2.0, 0.0]];
        let zv = g.constant(z.clone());
        let lq = g.value(mixture_log_density(&g, zv, &mix.components));
        let kl: Vec<Var> = mix.components.iter().map(|q| kl_rows(&g, *q)).collect();
        for row in 0..3 {
            let experts: BTreeMap<ModalKind, DiagGaussian> = ModalKind::ALL
                .into_iter()
                .map(|k| {
                    let q = encode(params.encoder(k), batch.block(k).unwrap()).unwrap();
                    (k, q.row(row))
                })
                .collect();
            let joint = gaussian::mopoe_build(&experts).unwrap();
            let zr = z.row(row).to_vec();
            assert!((lq[[row, 0]] - gaussian::mixture_log_prob(&joint, &zr).unwrap()).abs() < 1e-10);
            let plain_kl = gaussian::kl_mixture_upper(&joint);
            let graph_kl: f64 = kl.iter().map(|v| g.value(*v)[[row, 0]]).sum::<f64>() / 7.0;
            assert!((plain_kl - graph_kl).abs() < 1e-10);
        }
    }

    #[test]
    fn negative_type_counts() {
        assert_eq!(negative_types(ModalitySet::ALL).len(), 6);
        let vt = ModalitySet::parse("v,t").unwrap();
        let types = negative_types(vt);
        assert_eq!(types.len(), 2);
        assert_eq!(types[0].to_string(), "t");
        assert_eq!(types[1].to_string(), "v");
        assert!(negative_types(ModalitySet::parse("v").unwrap()).is_empty());
    }

    #[test]
    fn cubo_of_constant_weights() {
        // Zero networks: every expert is N(0, I), decoders output 0, so w_k is
        // the same constant for every sample and CUBO equals it exactly.
        let params = ModelParams::zeros(&dims());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, &[ModalKind::Visual], 2);
        let cfg = ObjectiveConfig {
            k: 5,
            ..ObjectiveConfig::default()
        };
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &params, &[]);
        let noise = SampleNoise::draw(&mut rng, 10, 2);
        let c = g.scalar(cubo(&g, &vars, &batch, &cfg, &noise).unwrap());
        let x = batch.block(ModalKind::Visual).unwrap();
        let expected = recon_loglik_value(x, Array2::zeros(x.dim()).view()).unwrap();
        assert!((c - expected).abs() < 1e-12);
        let bad = ObjectiveConfig { k: 1, ..cfg };
        assert!(cubo(&g, &vars, &batch, &bad, &noise).is_err());
    }

    #[test]
    fn unimodal_inter_is_zero_and_counts_are_reported() {
        let params = init_params(&dims(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ObjectiveConfig {
            k: 3,
            ..ObjectiveConfig::default()
        };
        let uni = random_batch(&mut rng, &[ModalKind::Textual], 4);
        let b = evaluate(&params, &uni, &cfg, &mut rng).unwrap();
        assert_eq!(b.inter, 0.0);
        assert_eq!(b.negative_tuples, 0);
        let tri = random_batch(&mut rng, &ModalKind::ALL, 4);
        assert_eq!(evaluate(&params, &tri, &cfg, &mut rng).unwrap().negative_tuples, 6);
        let bi = random_batch(&mut rng, &[ModalKind::Visual, ModalKind::Textual], 4);
        assert_eq!(evaluate(&params, &bi, &cfg, &mut rng).unwrap().negative_tuples, 2);
        let single_row = random_batch(&mut rng, &ModalKind::ALL, 1);
        assert!(evaluate(&params, &single_row, &cfg, &mut rng).is_err());
    }

    #[test]
    fn breakdown_recombines() {
        let params = init_params(&dims(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = random_batch(&mut rng, &ModalKind::ALL, 3);
        let cfg = ObjectiveConfig {
            k: 4,
            beta: 0.3,
            ..ObjectiveConfig::default()
        };
        let b = evaluate(&params, &batch, &cfg, &mut rng).unwrap();
        let recombined = b.elbo + 0.001 * (b.intra + b.inter);
        assert!((b.total - recombined).abs() < 1e-12);
        let recon: f64 = b.recon.iter().flatten().sum();
        assert!((b.elbo - (recon - 0.3 * b.kl)).abs() < 1e-12);

        let off = ObjectiveConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let b = evaluate(&params, &batch, &off, &mut r1).unwrap();
        assert_eq!(b.total, b.elbo);
    }

    #[test]
    fn elbo_ignores_modality_order() {
        let params = init_params(&dims(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = random_batch(&mut rng, &ModalKind::ALL, 3);
        let reordered = BatchView::new(
            [ModalKind::Textual, ModalKind::Brain, ModalKind::Visual]
                .into_iter()
                .map(|k| (k, batch.block(k).unwrap().to_owned()))
                .collect(),
        )
        .unwrap();
        let cfg = ObjectiveConfig::default();
        let noise = SampleNoise::draw(&mut rng, 3, 2);
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &params, &[]);
        let a = g.scalar(elbo(&g, &vars, &batch, &cfg, &noise).unwrap().elbo);
        let b = g.scalar(elbo(&g, &vars, &reordered, &cfg, &noise).unwrap().elbo);
        assert_eq!(a, b);
    }

    #[test]
    fn intra_of_standard_aux_at_origin() {
        let mut params = ModelParams::zeros(&ModelDims {
            dims: [2, 2, 2],
            hidden: [2, 2, 2],
            latent_dim: 1,
        });
        // Zero encoders and zero noise put z at 0; a zero aux net gives N(0, 1)
        // whatever its input.
        params.decoders[1].layers[2].bias.fill(3.0);
        let batch = BatchView::new(vec![
            (ModalKind::Visual, array![[1.0, 2.0]]),
            (ModalKind::Textual, array![[0.0, -1.0]]),
        ])
        .unwrap();
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &params, &[]);
        let parts = elbo(&g, &vars, &batch, &ObjectiveConfig::default(), &SampleNoise::zeros(1, 1)).unwrap();
        let i = g.scalar(intra_mi(&g, &vars, &parts));
        assert!((i - 2.0 * (-HALF_LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        use crate::nets::{finite_difference, norm_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = random_params(&mut rng);
        let batch = random_batch(&mut rng, &ModalKind::ALL, 3);
        let cfg = ObjectiveConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            k: 3,
            beta: 0.7,
            ..ObjectiveConfig::default()
        };
        let run = |p: &ModelParams, groups: &[ParamGroup]| {
            let g = Graph::new();
            let vars = ModelVars::bind(&g, p, groups);
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let obj = total_objective(&g, &vars, &batch, &cfg, &mut r).unwrap();
            let value = g.scalar(obj.total);
            let grads = (!groups.is_empty()).then(|| vars.gradients(&g.backward(obj.total).unwrap(), p));
            (value, grads)
        };
        let grads = run(&params, &[ParamGroup::Model, ParamGroup::Aux]).1.unwrap();
        for group in [ParamGroup::Model, ParamGroup::Aux] {
            let numeric = finite_difference(&params, group, 1e-4, |p| Ok(run(p, &[]).0)).unwrap();
            let err = norm_relative_error(&grads.flatten(group), &numeric);
            assert!(err < 1e-3, "{group:?}: {err}");
        }
    }

    #[test]
    fn lambda1_zero_gradient_equals_elbo_gradient() {
        let params = init_params(&dims(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, &ModalKind::ALL, 3);
        let cfg = ObjectiveConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..ObjectiveConfig::default()
        };
        let grad = |total: bool| {
            let g = Graph::new();
            let vars = ModelVars::bind(&g, &params, &[ParamGroup::Model]);
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let out = if total {
                total_objective(&g, &vars, &batch, &cfg, &mut r).unwrap().total
            } else {
                let noise = SampleNoise::draw(&mut r, 3, 2);
                elbo(&g, &vars, &batch, &cfg, &noise).unwrap().elbo
            };
            vars.gradients(&g.backward(out).unwrap(), &params).flatten(ParamGroup::Model)
        };
        assert_eq!(grad(true), grad(false));
    }
}
