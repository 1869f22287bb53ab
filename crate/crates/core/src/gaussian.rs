//! Diagonal-Gaussian posterior algebra: experts, products, mixtures over
//! modality subsets, KL terms, sampling and densities.
//!
//! These are plain numeric routines used at inference time and as the
//! reference the differentiable versions in [`crate::objectives`] are checked
//! against.

use std::collections::BTreeMap;
use std::fmt;

use crate::datamodel::ModalKind;
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    /// Log-variance, always within `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                logvar.len()
            )));
        }
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("Gaussian parameters must be finite".into()));
        }
        let logvar = logvar.into_iter().map(|l| l.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Ok(DiagGaussian { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }
}

/// A set of modalities, stored as a bit mask over [`ModalKind::index`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn from_kinds(kinds: impl IntoIterator<Item = ModalKind>) -> Self {
        ModalitySet(kinds.into_iter().fold(0, |acc, k| acc | (1 << k.index())))
    }

    pub fn single(kind: ModalKind) -> Self {
        ModalitySet(1 << kind.index())
    }

    pub fn contains(self, kind: ModalKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in b, v, t order.
    pub fn kinds(self) -> impl Iterator<Item = ModalKind> {
        ModalKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    /// Non-empty subsets in canonical order: by size, then lexicographically
    /// (b, v, t, bv, bt, vt, bvt for the full set).
    pub fn nonempty_subsets(self) -> Vec<ModalitySet> {
        let mut subsets: Vec<ModalitySet> = (1u8..8)
            .map(ModalitySet)
            .filter(|s| s.is_subset_of(self))
            .collect();
        subsets.sort_by_key(|s| (s.len(), s.kinds().map(ModalKind::index).collect::<Vec<_>>()));
        subsets
    }

    /// Parses tags such as `"v,t"`, `"vt"` or `"brain"`.
    pub fn parse(s: &str) -> Option<ModalitySet> {
        let parts: Vec<&str> = if s.contains(',') {
            s.split(',').collect()
        } else if ModalKind::from_tag(s).is_some() {
            vec![s]
        } else {
            s.trim().char_indices().map(|(i, _)| &s.trim()[i..i + 1]).collect()
        };
        let kinds = parts
            .into_iter()
            .map(ModalKind::from_tag)
            .collect::<Option<Vec<_>>>()?;
        let set = ModalitySet::from_kinds(kinds);
        (!set.is_empty()).then_some(set)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.kinds().map(|k| k.tag().to_string()).collect();
        f.write_str(&tags.join(","))
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalitySet::parse(s).ok_or_else(|| Error::Config(format!("unknown modality set `{s}`")))
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

/// How the joint posterior is assembled from unimodal experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosteriorKind {
    /// One component: the product of all present experts.
    Poe,
    /// One component per present expert.
    Moe,
    /// One component per non-empty subset, each a product.
    Mopoe,
}

impl PosteriorKind {
    pub fn components(self, present: ModalitySet) -> Vec<ModalitySet> {
        match self {
            PosteriorKind::Poe => vec![present],
            PosteriorKind::Moe => present.kinds().map(ModalitySet::single).collect(),
            PosteriorKind::Mopoe => present.nonempty_subsets(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PosteriorKind::Poe => "poe",
            PosteriorKind::Moe => "moe",
            PosteriorKind::Mopoe => "mopoe",
        }
    }
}

impl std::str::FromStr for PosteriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "poe" => Ok(PosteriorKind::Poe),
            "moe" => Ok(PosteriorKind::Moe),
            "mopoe" => Ok(PosteriorKind::Mopoe),
            other => Err(Error::Config(format!("unknown posterior type `{other}`"))),
        }
    }
}

impl fmt::Display for PosteriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPosterior {
    pub subset: ModalitySet,
    pub gaussian: DiagGaussian,
}

/// Uniform mixture of subset posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    pub components: Vec<SubsetPosterior>,
}

/// Precision-weighted product of experts.
pub fn poe_combine(experts: &[&DiagGaussian]) -> Result<DiagGaussian> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Invalid("product of zero experts".into()))?;
    if experts.len() == 1 {
        return Ok((*first).clone());
    }
    let dim = first.dim();
    if let Some(bad) = experts.iter().find(|e| e.dim() != dim) {
        return Err(Error::Shape(format!("expert dimensions {dim} and {}", bad.dim())));
    }
    let mut mean = Vec::with_capacity(dim);
    let mut logvar = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut precision = 0.0;
        let mut weighted = 0.0;
        for e in experts {
            let p = (-e.logvar[d]).exp();
            precision += p;
            weighted += p * e.mean[d];
        }
        mean.push(weighted / precision);
        logvar.push(-precision.ln());
    }
    DiagGaussian::new(mean, logvar)
}

/// Joint posterior of the given kind over the supplied experts.
pub fn build_joint(experts: &BTreeMap<ModalKind, DiagGaussian>, kind: PosteriorKind) -> Result<JointPosterior> {
    let present = ModalitySet::from_kinds(experts.keys().copied());
    if present.is_empty() {
        return Err(Error::Invalid("joint posterior needs at least one expert".into()));
    }
    let components = kind
        .components(present)
        .into_iter()
        .map(|subset| {
            let members: Vec<&DiagGaussian> = subset.kinds().map(|k| &experts[&k]).collect();
            Ok(SubsetPosterior {
                subset,
                gaussian: poe_combine(&members)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JointPosterior { components })
}

/// Mixture of products over every non-empty subset, in canonical order.
pub fn mopoe_build(experts: &BTreeMap<ModalKind, DiagGaussian>) -> Result<JointPosterior> {
    build_joint(experts, PosteriorKind::Mopoe)
}

/// `KL(g || N(0, I))`.
pub fn kl_standard_normal(g: &DiagGaussian) -> f64 {
    g.mean
        .iter()
        .zip(&g.logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum()
}

/// Average of component KLs; an upper bound on the mixture KL by convexity.
pub fn kl_mixture_upper(j: &JointPosterior) -> f64 {
    let n = j.components.len() as f64;
    j.components.iter().map(|c| kl_standard_normal(&c.gaussian)).sum::<f64>() / n
}

pub fn reparam_sample(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Shape(format!("noise has {} entries, latent {}", noise.len(), g.dim())));
    }
    Ok(g.mean
        .iter()
        .zip(&g.logvar)
        .zip(noise)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect())
}

pub fn log_prob(g: &DiagGaussian, z: &[f64]) -> Result<f64> {
    if z.len() != g.dim() {
        return Err(Error::Shape(format!("point has {} entries, latent {}", z.len(), g.dim())));
    }
    Ok(g.mean
        .iter()
        .zip(&g.logvar)
        .zip(z)
        .map(|((m, l), x)| -HALF_LN_2PI - 0.5 * l - 0.5 * (x - m) * (x - m) * (-l).exp())
        .sum())
}

/// Log density of the uniform mixture.
pub fn mixture_log_prob(j: &JointPosterior, z: &[f64]) -> Result<f64> {
    let logs = j
        .components
        .iter()
        .map(|c| log_prob(&c.gaussian, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&logs) - (logs.len() as f64).ln())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln N(z; 0, 1)` summed over entries.
pub fn standard_log_prob(z: &[f64]) -> f64 {
    z.iter().map(|x| -HALF_LN_2PI - 0.5 * x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mean], vec![var.ln()]).unwrap()
    }

    fn density(g: &DiagGaussian, x: f64) -> f64 {
        log_prob(g, &[x]).unwrap().exp()
    }

    #[test]
    fn logvar_is_clamped() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.logvar, vec![LOGVAR_MIN, LOGVAR_MAX]);
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn subsets_in_canonical_order() {
        let names: Vec<String> = ModalitySet::ALL.nonempty_subsets().iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["b", "v", "t", "b,v", "b,t", "v,t", "b,v,t"]);
        let vt = ModalitySet::parse("v,t").unwrap();
        assert_eq!(vt.nonempty_subsets().len(), 3);
        assert_eq!(ModalitySet::parse("vt"), Some(vt));
        assert_eq!(ModalitySet::parse("brain"), Some(ModalitySet::single(ModalKind::Brain)));
        assert_eq!(ModalitySet::parse("x"), None);
    }

    #[test]
    fn poe_identity_and_unit_experts() {
        let e = DiagGaussian::new(vec![0.3, -1.0], vec![0.2, -0.7]).unwrap();
        assert_eq!(poe_combine(&[&e]).unwrap(), e);
        let s = DiagGaussian::standard(3);
        let p = poe_combine(&[&s, &s]).unwrap();
        for (m, v) in p.mean.iter().zip(p.variance()) {
            assert_eq!(*m, 0.0);
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(poe_combine(&[]).is_err());
        assert!(poe_combine(&[&s, &DiagGaussian::standard(2)]).is_err());
    }

    #[test]
    fn poe_matches_grid_density_product() {
        let a = g1(1.0, 1.0);
        let b = g1(3.0, 1.0);
        let p = poe_combine(&[&a, &b]).unwrap();
        assert!((p.mean[0] - 2.0).abs() < 1e-12);
        assert!((p.variance()[0] - 0.5).abs() < 1e-12);

        let (lo, hi, n) = (-8.0, 12.0, 20_000);
        let h = (hi - lo) / n as f64;
        let grid: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
        let product: Vec<f64> = grid.iter().map(|&x| density(&a, x) * density(&b, x)).collect();
        let norm: f64 = product.iter().sum::<f64>() * h;
        let l1: f64 = grid
            .iter()
            .zip(&product)
            .map(|(&x, &q)| (q / norm - density(&p, x)).abs())
            .sum::<f64>()
            * h;
        assert!(l1 < 1e-3, "l1 = {l1}");
    }

    #[test]
    fn mopoe_component_counts() {
        let mut experts = BTreeMap::new();
        experts.insert(ModalKind::Visual, g1(0.5, 2.0));
        let j = mopoe_build(&experts).unwrap();
        assert_eq!(j.components.len(), 1);
        assert_eq!(j.components[0].gaussian, experts[&ModalKind::Visual]);
        experts.insert(ModalKind::Textual, g1(-1.0, 0.5));
        assert_eq!(mopoe_build(&experts).unwrap().components.len(), 3);
        experts.insert(ModalKind::Brain, g1(2.0, 1.5));
        let j = mopoe_build(&experts).unwrap();
        assert_eq!(j.components.len(), 7);
        let all: Vec<&DiagGaussian> = experts.values().collect();
        assert_eq!(j.components[6].subset, ModalitySet::ALL);
        let direct = poe_combine(&all).unwrap();
        assert!((j.components[6].gaussian.mean[0] - direct.mean[0]).abs() < 1e-12);
        assert_eq!(build_joint(&experts, PosteriorKind::Moe).unwrap().components.len(), 3);
        assert_eq!(build_joint(&experts, PosteriorKind::Poe).unwrap().components.len(), 1);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_standard_normal(&DiagGaussian::standard(4)), 0.0);
        assert!((kl_standard_normal(&g1(1.0, 1.0)) - 0.5).abs() < 1e-15);
        let g = g1(0.5, 0.25);
        let expected = 0.5 * (0.25 + 0.25 - 1.0 - 0.25f64.ln());
        assert!((kl_standard_normal(&g) - expected).abs() < 1e-12);
        assert!((expected - 0.4431).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let g = g1(0.5, 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut total = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = reparam_sample(&g, &[e]).unwrap();
            total += log_prob(&g, &z).unwrap() - standard_log_prob(&z);
        }
        let mc = total / n as f64;
        let exact = kl_standard_normal(&g);
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn mixture_kl_upper_bound_vs_quadrature() {
        let j = JointPosterior {
            components: vec![
                SubsetPosterior {
                    subset: ModalitySet::single(ModalKind::Visual),
                    gaussian: g1(1.0, 1.0),
                },
                SubsetPosterior {
                    subset: ModalitySet::single(ModalKind::Textual),
                    gaussian: g1(-1.0, 1.0),
                },
            ],
        };
        assert!((kl_mixture_upper(&j) - 0.5).abs() < 1e-15);
        let (lo, hi, n) = (-15.0, 15.0, 60_000);
        let h = (hi - lo) / n as f64;
        let mut kl = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let lq = mixture_log_prob(&j, &[z]).unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            kl += w * lq.exp() * (lq - standard_log_prob(&[z])) * h;
        }
        assert!((kl - 0.16317).abs() < 1e-4, "quadrature {kl}");
        assert!(kl_mixture_upper(&j) >= kl);
    }

    #[test]
    fn single_component_mixture_kl_is_exact() {
        let g = DiagGaussian::new(vec![0.2, -0.4], vec![0.3, -0.1]).unwrap();
        let j = JointPosterior {
            components: vec![SubsetPosterior {
                subset: ModalitySet::ALL,
                gaussian: g.clone(),
            }],
        };
        assert_eq!(kl_mixture_upper(&j), kl_standard_normal(&g));
        assert_eq!(mixture_log_prob(&j, &[0.1, 0.1]).unwrap(), log_prob(&g, &[0.1, 0.1]).unwrap());
    }

    #[test]
    fn reparam_basics_and_moments() {
        let g = DiagGaussian::new(vec![1.5, -2.0], vec![0.0, (0.3f64).ln()]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), g.mean);
        assert_eq!(reparam_sample(&g, &[0.7, 0.0]).unwrap()[0], 1.5 + 0.7);
        assert!(reparam_sample(&g, &[0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sums = [0.0; 2];
        let mut squares = [0.0; 2];
        for _ in 0..n {
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let z = reparam_sample(&g, &e).unwrap();
            for d in 0..2 {
                sums[d] += z[d];
                squares[d] += z[d] * z[d];
            }
        }
        let var = g.variance();
        for d in 0..2 {
            let m = sums[d] / n as f64;
            let v = squares[d] / n as f64 - m * m;
            assert!((m - g.mean[d]).abs() / g.mean[d].abs() < 0.02);
            assert!((v - var[d]).abs() / var[d] < 0.02);
        }
    }

    #[test]
    fn log_density_values() {
        assert!((log_prob(&g1(0.0, 1.0), &[0.0]).unwrap() + 0.9189).abs() < 1e-4);
        let j = JointPosterior {
            components: vec![
                SubsetPosterior {
                    subset: ModalitySet::single(ModalKind::Visual),
                    gaussian: g1(0.0, 1.0),
                },
                SubsetPosterior {
                    subset: ModalitySet::single(ModalKind::Textual),
                    gaussian: g1(2.0, 1.0),
                },
            ],
        };
        let direct = (0.5 * density(&j.components[0].gaussian, 1.0)
            + 0.5 * density(&j.components[1].gaussian, 1.0))
        .ln();
        let lp = mixture_log_prob(&j, &[1.0]).unwrap();
        assert!((lp - direct).abs() < 1e-12);
        assert!((lp + 1.4189).abs() < 1e-4);
    }

    fn gaussian_strategy(dim: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-3.0f64..3.0, dim),
            prop::collection::vec(-3.0f64..3.0, dim),
        )
            .prop_map(|(m, l)| DiagGaussian::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn poe_is_order_invariant_and_associative(
            a in gaussian_strategy(3), b in gaussian_strategy(3), c in gaussian_strategy(3)
        ) {
            let abc = poe_combine(&[&a, &b, &c]).unwrap();
            let cab = poe_combine(&[&c, &a, &b]).unwrap();
            let nested = poe_combine(&[&poe_combine(&[&a, &b]).unwrap(), &c]).unwrap();
            for d in 0..3 {
                prop_assert!((abc.mean[d] - cab.mean[d]).abs() < 1e-9);
                prop_assert!((abc.logvar[d] - cab.logvar[d]).abs() < 1e-9);
                prop_assert!((abc.mean[d] - nested.mean[d]).abs() < 1e-9);
                prop_assert!((abc.logvar[d] - nested.logvar[d]).abs() < 1e-9);
                let min_var = a.logvar[d].min(b.logvar[d]).min(c.logvar[d]);
                prop_assert!(abc.logvar[d] <= min_var + 1e-12);
            }
        }

        #[test]
        fn mixture_log_prob_bounds(
            a in gaussian_strategy(2), b in gaussian_strategy(2), z in prop::collection::vec(-4.0f64..4.0, 2)
        ) {
            let mut experts = BTreeMap::new();
            experts.insert(ModalKind::Visual, a);
            experts.insert(ModalKind::Textual, b);
            let j = mopoe_build(&experts).unwrap();
            let lp = mixture_log_prob(&j, &z).unwrap();
            let max = j.components.iter().map(|c| log_prob(&c.gaussian, &z).unwrap()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lp <= max + 1e-12);
            prop_assert!(lp >= max - (j.components.len() as f64).ln() - 1e-12);
        }
    }
}
