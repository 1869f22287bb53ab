//! Fuses three unimodal Gaussian experts into PoE, MoE and MoPoE joint
//! posteriors and prints their components and KL upper bounds.
//!
//! `cargo run --example posterior_fusion`

use std::collections::BTreeMap;

use bravl::datamodel::ModalKind;
use bravl::gaussian::{build_joint, kl_mixture_upper, mixture_log_prob, DiagGaussian, PosteriorKind};

fn main() -> bravl::Result<()> {
    let experts: BTreeMap<ModalKind, DiagGaussian> = [
        (ModalKind::Brain, DiagGaussian::new(vec![1.0, -0.5], vec![0.5, 0.0])?),
        (ModalKind::Visual, DiagGaussian::new(vec![0.8, 0.2], vec![-1.0, -0.5])?),
        (ModalKind::Textual, DiagGaussian::new(vec![0.0, 0.4], vec![0.0, -1.5])?),
    ]
    .into_iter()
    .collect();
    for kind in [PosteriorKind::Poe, PosteriorKind::Moe, PosteriorKind::Mopoe] {
        let joint = build_joint(&experts, kind)?;
        println!("{kind}: {} components, KL upper bound {:.4}", joint.components.len(), kl_mixture_upper(&joint));
        for c in &joint.components {
            let var = c.gaussian.variance();
            println!(
                "  {:>5}  mean [{:+.3}, {:+.3}]  var [{:.3}, {:.3}]",
                c.subset.to_string(),
                c.gaussian.mean[0],
                c.gaussian.mean[1],
                var[0],
                var[1]
            );
        }
        println!("  log q(0, 0) = {:.4}", mixture_log_prob(&joint, &[0.0, 0.0])?);
    }
    Ok(())
}
