//! Encoders, decoders and auxiliary posterior networks, all two-hidden-layer
//! rectifier MLPs, plus their differentiable versions, Adam and gradient
//! checking.

mod adam;
mod check;
pub mod graph;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::datamodel::{read_matrix_f64, write_matrix_f64, Manifest, MANIFEST_FILE};
use crate::datamodel::ModalKind;
use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, LOGVAR_MAX, LOGVAR_MIN};

pub use adam::{adam_step, AdamState};
pub use check::{finite_difference, max_relative_error, norm_relative_error, relative_error};
pub use graph::{Gradients, Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(&self.widths())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Rectifier on hidden layers, linear output.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }
}

/// A batch of diagonal Gaussians, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl GaussianBatch {
    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn row(&self, i: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.mean.row(i).to_vec(),
            logvar: self.logvar.row(i).to_vec(),
        }
    }

    fn from_output(out: Array2<f64>, latent: usize) -> Self {
        let mean = out.slice(ndarray::s![.., ..latent]).to_owned();
        let logvar = out
            .slice(ndarray::s![.., latent..])
            .mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        GaussianBatch { mean, logvar }
    }
}

/// Posterior `q(z | x)` for every row of `x`.
pub fn encode(enc: &MlpParams, x: ArrayView2<'_, f64>) -> Result<GaussianBatch> {
    let out = enc.forward(x)?;
    Ok(GaussianBatch::from_output(out, enc.output_dim() / 2))
}

/// Likelihood mean for every latent row.
pub fn decode(dec: &MlpParams, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    dec.forward(z)
}

/// Auxiliary posterior `Q(z | x_hat)`.
pub fn aux_posterior(aux: &MlpParams, x_hat: ArrayView2<'_, f64>) -> Result<GaussianBatch> {
    encode(aux, x_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    /// Input width per modality, indexed by [`ModalKind::index`].
    pub dims: [usize; 3],
    pub hidden: [usize; 3],
    pub latent_dim: usize,
}

impl ModelDims {
    pub fn encoder_widths(&self, kind: ModalKind) -> Vec<usize> {
        let (d, h) = (self.dims[kind.index()], self.hidden[kind.index()]);
        vec![d, h, h, 2 * self.latent_dim]
    }

    pub fn decoder_widths(&self, kind: ModalKind) -> Vec<usize> {
        let (d, h) = (self.dims[kind.index()], self.hidden[kind.index()]);
        vec![self.latent_dim, h, h, d]
    }
}

/// Parameter groups updated by the two training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoders and decoders.
    Model,
    /// Auxiliary posterior networks.
    Aux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub latent_dim: usize,
    pub encoders: [MlpParams; 3],
    pub decoders: [MlpParams; 3],
    pub aux: [MlpParams; 3],
}

pub fn init_params(dims: &ModelDims, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoders = ModalKind::ALL.map(|k| MlpParams::init(&dims.encoder_widths(k), &mut rng));
    let decoders = ModalKind::ALL.map(|k| MlpParams::init(&dims.decoder_widths(k), &mut rng));
    let aux = ModalKind::ALL.map(|k| MlpParams::init(&dims.encoder_widths(k), &mut rng));
    ModelParams {
        latent_dim: dims.latent_dim,
        encoders,
        decoders,
        aux,
    }
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        ModelParams {
            latent_dim: dims.latent_dim,
            encoders: ModalKind::ALL.map(|k| MlpParams::zeros(&dims.encoder_widths(k))),
            decoders: ModalKind::ALL.map(|k| MlpParams::zeros(&dims.decoder_widths(k))),
            aux: ModalKind::ALL.map(|k| MlpParams::zeros(&dims.encoder_widths(k))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            latent_dim: self.latent_dim,
            encoders: self.encoders.each_ref().map(MlpParams::zeros_like),
            decoders: self.decoders.each_ref().map(MlpParams::zeros_like),
            aux: self.aux.each_ref().map(MlpParams::zeros_like),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            dims: self.encoders.each_ref().map(MlpParams::input_dim),
            hidden: self.encoders.each_ref().map(|e| e.layers[0].weight.ncols()),
            latent_dim: self.latent_dim,
        }
    }

    pub fn encoder(&self, kind: ModalKind) -> &MlpParams {
        &self.encoders[kind.index()]
    }

    pub fn decoder(&self, kind: ModalKind) -> &MlpParams {
        &self.decoders[kind.index()]
    }

    pub fn aux_net(&self, kind: ModalKind) -> &MlpParams {
        &self.aux[kind.index()]
    }

    fn group(&self, group: ParamGroup) -> Vec<&MlpParams> {
        match group {
            ParamGroup::Model => self.encoders.iter().chain(&self.decoders).collect(),
            ParamGroup::Aux => self.aux.iter().collect(),
        }
    }

    fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut MlpParams> {
        match group {
            ParamGroup::Model => self.encoders.iter_mut().chain(&mut self.decoders).collect(),
            ParamGroup::Aux => self.aux.iter_mut().collect(),
        }
    }

    pub fn n_params(&self, group: ParamGroup) -> usize {
        self.group(group).iter().map(|m| m.n_params()).sum()
    }

    /// All parameters of a group as one vector, in a fixed order.
    pub fn flatten(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params(group));
        for net in self.group(group) {
            for t in net.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn set_flat(&mut self, group: ParamGroup, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params(group) {
            return Err(Error::Shape(format!(
                "{} values for a group of {} parameters",
                flat.len(),
                self.n_params(group)
            )));
        }
        let mut offset = 0;
        for net in self.group_mut(group) {
            for t in net.tensors_mut() {
                t.copy_from_slice(&flat[offset..offset + t.len()]);
                offset += t.len();
            }
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of a group.
    pub fn hash(&self, group: ParamGroup) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.flatten(group) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn named_tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (prefix, nets) in [("enc", &self.encoders), ("dec", &self.decoders), ("aux", &self.aux)] {
            for kind in ModalKind::ALL {
                for (i, layer) in nets[kind.index()].layers.iter().enumerate() {
                    out.push((format!("{prefix}.{}.w{i}", kind.tag()), layer.weight.clone()));
                    out.push((
                        format!("{prefix}.{}.b{i}", kind.tag()),
                        layer.bias.clone().insert_axis(Axis(0)),
                    ));
                }
            }
        }
        out
    }

    /// Writes one f64 matrix per tensor into `dir` and records them in `manifest`.
    pub fn save(&self, dir: &Path, manifest: &mut Manifest) -> Result<()> {
        let d = self.dims();
        manifest.set("latent_dim", d.latent_dim);
        manifest.set("dims", join(&d.dims));
        manifest.set("hidden", join(&d.hidden));
        for (name, tensor) in self.named_tensors() {
            let file = format!("{name}.bvlm");
            write_matrix_f64(&dir.join(&file), &tensor)?;
            manifest.set(format!("tensor.{name}"), file);
        }
        Ok(())
    }

    pub fn load(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let dims = ModelDims {
            dims: parse_triple(manifest.require("dims", &path)?, &path)?,
            hidden: parse_triple(manifest.require("hidden", &path)?, &path)?,
            latent_dim: manifest.parse_value("latent_dim", &path)?,
        };
        let mut params = ModelParams::zeros(&dims);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut loaded = names.iter().map(|name| {
            let file = manifest.require(&format!("tensor.{name}"), &path)?;
            read_matrix_f64(&dir.join(file))
        });
        for nets in [&mut params.encoders, &mut params.decoders, &mut params.aux] {
            for net in nets.iter_mut() {
                for layer in net.layers.iter_mut() {
                    let w = loaded.next().expect("name per tensor")?;
                    let b = loaded.next().expect("name per tensor")?;
                    if w.dim() != layer.weight.dim() || b.len() != layer.bias.len() {
                        return Err(Error::format(&path, "tensor shape disagrees with recorded dims"));
                    }
                    layer.weight = w;
                    layer.bias = b.row(0).to_owned();
                }
            }
        }
        Ok(params)
    }
}

fn join(values: &[usize; 3]) -> String {
    values.map(|v| v.to_string()).join(",")
}

fn parse_triple(s: &str, path: &Path) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::format(path, format!("bad dimension list `{s}`"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::format(path, format!("expected three dimensions, got `{s}`")))
}

/// Gradient of some scalar with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: ModelParams,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            grads: params.zeros_like(),
        }
    }

    pub fn flatten(&self, group: ParamGroup) -> Vec<f64> {
        self.grads.flatten(group)
    }

    pub fn is_finite(&self) -> bool {
        [ParamGroup::Model, ParamGroup::Aux]
            .iter()
            .all(|&g| self.flatten(g).iter().all(|v| v.is_finite()))
    }
}

/// Graph leaves for one network.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn bind(g: &Graph, net: &MlpParams, trainable: bool) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.weight.clone(), trainable),
                    g.leaf(l.bias.clone().insert_axis(Axis(0)), trainable),
                )
            })
            .collect();
        MlpVars { layers }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.add_row(g.matmul(h, w), b);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Splits the output into mean and clamped log-variance.
    pub fn gaussian(&self, g: &Graph, x: Var, latent: usize) -> (Var, Var) {
        let out = self.forward(g, x);
        let mean = g.slice_cols(out, 0, latent);
        let logvar = g.clamp(g.slice_cols(out, latent, 2 * latent), LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }
}

/// Graph leaves for a whole model; `trainable` picks the group that gets
/// gradients (the other is bound as constants).
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub latent_dim: usize,
    pub encoders: [MlpVars; 3],
    pub decoders: [MlpVars; 3],
    pub aux: [MlpVars; 3],
}

impl ModelVars {
    pub fn bind(g: &Graph, params: &ModelParams, trainable: &[ParamGroup]) -> Self {
        let model = trainable.contains(&ParamGroup::Model);
        let aux = trainable.contains(&ParamGroup::Aux);
        ModelVars {
            latent_dim: params.latent_dim,
            encoders: params.encoders.each_ref().map(|n| MlpVars::bind(g, n, model)),
            decoders: params.decoders.each_ref().map(|n| MlpVars::bind(g, n, model)),
            aux: params.aux.each_ref().map(|n| MlpVars::bind(g, n, aux)),
        }
    }

    pub fn encode(&self, g: &Graph, kind: ModalKind, x: Var) -> (Var, Var) {
        self.encoders[kind.index()].gaussian(g, x, self.latent_dim)
    }

    pub fn decode(&self, g: &Graph, kind: ModalKind, z: Var) -> Var {
        self.decoders[kind.index()].forward(g, z)
    }

    pub fn aux_posterior(&self, g: &Graph, kind: ModalKind, x_hat: Var) -> (Var, Var) {
        self.aux[kind.index()].gaussian(g, x_hat, self.latent_dim)
    }

    /// Collects gradients into the parameter tree; missing entries are zero.
    pub fn gradients(&self, grads: &Gradients, params: &ModelParams) -> GradientSet {
        let mut out = GradientSet::zeros_like(params);
        let pairs = [
            (&self.encoders, &mut out.grads.encoders),
            (&self.decoders, &mut out.grads.decoders),
            (&self.aux, &mut out.grads.aux),
        ];
        for (vars, nets) in pairs {
            for (mv, net) in vars.iter().zip(nets.iter_mut()) {
                for (&(w, b), layer) in mv.layers.iter().zip(net.layers.iter_mut()) {
                    if let Some(gw) = grads.get(w) {
                        layer.weight.assign(gw);
                    }
                    if let Some(gb) = grads.get(b) {
                        layer.bias.assign(&gb.row(0));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn desk_dims() -> ModelDims {
        ModelDims {
            dims: [60, 50, 30],
            hidden: [64, 64, 64],
            latent_dim: 32,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&desk_dims(), 4);
        assert_eq!(a, init_params(&desk_dims(), 4));
        assert_ne!(a, init_params(&desk_dims(), 5));
        assert_eq!(a.encoder(ModalKind::Brain).output_dim(), 64);
        for net in a.encoders.iter().chain(&a.decoders).chain(&a.aux) {
            for layer in &net.layers {
                let bound = (6.0 / layer.weight.nrows() as f64).sqrt();
                assert!(layer.weight.iter().all(|w| w.abs() <= bound));
                assert!(layer.bias.iter().all(|&b| b == 0.0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wide = MlpParams::init(&[512, 4], &mut rng);
        assert!(wide.layers[0].weight.iter().all(|w| w.abs() <= 0.1083));
    }

    #[test]
    fn paper_scale_brain_encoder_count() {
        let dims = ModelDims {
            dims: [1401, 2048, 512],
            hidden: [512, 2048, 512],
            latent_dim: 32,
        };
        let p = ModelParams::zeros(&dims);
        let expected = 1401 * 512 + 512 + 512 * 512 + 512 + 512 * 64 + 64;
        assert_eq!(p.encoder(ModalKind::Brain).n_params(), expected);
        assert_eq!(p.aux_net(ModalKind::Brain).n_params(), expected);
    }

    #[test]
    fn zero_nets_give_standard_normal_and_zero_mean() {
        let p = ModelParams::zeros(&ModelDims {
            dims: [3, 2, 4],
            hidden: [5, 5, 5],
            latent_dim: 2,
        });
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let q = encode(p.encoder(ModalKind::Brain), x.view()).unwrap();
        assert!(q.mean.iter().chain(q.logvar.iter()).all(|&v| v == 0.0));
        let xh = decode(p.decoder(ModalKind::Textual), q.mean.view()).unwrap();
        assert_eq!(xh.dim(), (2, 4));
        assert!(xh.iter().all(|&v| v == 0.0));
        let a = aux_posterior(p.aux_net(ModalKind::Textual), xh.view()).unwrap();
        assert_eq!(a.row(1), DiagGaussian::standard(2));
        assert!(encode(p.encoder(ModalKind::Brain), array![[1.0]].view()).is_err());
    }

    fn tiny_encoder() -> MlpParams {
        MlpParams {
            layers: vec![
                Layer {
                    weight: array![[1.0, -1.0, 0.5], [2.0, 0.0, -1.0]],
                    bias: array![0.0, 0.5, -0.25],
                },
                Layer {
                    weight: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    bias: array![-1.0, 0.0, 0.0],
                },
                Layer {
                    weight: array![[0.5, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, -1.0], [1.0, 1.0, 1.0, 1.0]],
                    bias: array![0.1, 0.2, 0.3, 0.4],
                },
            ],
        }
    }

    #[test]
    fn hand_forward_oracle() {
        // x = (1, 1): h1 = relu(3, -0.5, -0.75) = (3, 0, 0); h2 = relu(2, 0, 0) = (2, 0, 0);
        // out = (1.1, 0.2, 2.3, 0.4).
        let q = encode(&tiny_encoder(), array![[1.0, 1.0]].view()).unwrap();
        let want_mean = [1.1, 0.2];
        let want_lv = [2.3, 0.4];
        for d in 0..2 {
            assert!((q.mean[[0, d]] - want_mean[d]).abs() < 1e-12);
            assert!((q.logvar[[0, d]] - want_lv[d]).abs() < 1e-12);
        }
        // x = (-1, 0.5): h1 = relu(0, 1.5, -1.25) = (0, 1.5, 0); h2 = (0, 1.5, 0);
        // out = (0.1, 1.7, 0.3, -1.1).
        let out = tiny_encoder().forward(array![[-1.0, 0.5]].view()).unwrap();
        for (got, want) in out.iter().zip([0.1, 1.7, 0.3, -1.1]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_row_independent() {
        let p = init_params(&desk_dims(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((5, 60), || rng.random_range(-1.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let q = encode(p.encoder(ModalKind::Brain), x.view()).unwrap();
        let qp = encode(p.encoder(ModalKind::Brain), x.select(Axis(0), &perm).view()).unwrap();
        assert_eq!(qp.mean, q.mean.select(Axis(0), &perm));
        assert_eq!(qp.logvar, q.logvar.select(Axis(0), &perm));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let p = init_params(&desk_dims(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((4, 50), || rng.random_range(-1.0..1.0));
        let g = Graph::new();
        let vars = ModelVars::bind(&g, &p, &[ParamGroup::Model]);
        let xv = g.constant(x.clone());
        let (m, lv) = vars.encode(&g, ModalKind::Visual, xv);
        let q = encode(p.encoder(ModalKind::Visual), x.view()).unwrap();
        assert!((&*g.value(m) - &q.mean).iter().all(|d| d.abs() < 1e-12));
        assert!((&*g.value(lv) - &q.logvar).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn flatten_round_trip_and_hash() {
        let mut p = init_params(&desk_dims(), 9);
        let h_model = p.hash(ParamGroup::Model);
        let h_aux = p.hash(ParamGroup::Aux);
        let mut flat = p.flatten(ParamGroup::Aux);
        flat[0] += 1.0;
        p.set_flat(ParamGroup::Aux, &flat).unwrap();
        assert_eq!(p.hash(ParamGroup::Model), h_model);
        assert_ne!(p.hash(ParamGroup::Aux), h_aux);
        assert_eq!(p.flatten(ParamGroup::Aux), flat);
        assert!(p.set_flat(ParamGroup::Aux, &flat[1..]).is_err());
    }

    #[test]
    fn save_load_is_bit_exact() {
        let p = init_params(&desk_dims(), 2);
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new();
        p.save(dir.path(), &mut manifest).unwrap();
        assert_eq!(ModelParams::load(dir.path(), &manifest).unwrap(), p);
    }
}
