//! Trains the one-vs-rest RBF SVM on three Gaussian blobs and prints top-k
//! predictions for a few probe points.
//!
//! `cargo run --example svm_classifier`

use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bravl::decode::{svm_fit, svm_predict_topk, SvmConfig};

fn main() -> bravl::Result<()> {
    let centers = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
    let noise = Normal::new(0.0, 0.7).expect("valid sd");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let per_class = 30;
    let mut latents = Array2::zeros((3 * per_class, 2));
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let row = c * per_class + i;
            latents[[row, 0]] = center[0] + noise.sample(&mut rng);
            latents[[row, 1]] = center[1] + noise.sample(&mut rng);
            labels.push(10 + c as u32);
        }
    }
    let cfg = SvmConfig {
        gamma: 0.5,
        ..SvmConfig::desk_scale()
    };
    let model = svm_fit(latents.view(), &labels, &cfg)?;
    let train_hits = latents
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(x, &l)| svm_predict_topk(&model, *x, 1).map(|p| p[0] == l).unwrap_or(false))
        .count();
    println!("classes {:?}, {} support vectors", model.classes, model.support.nrows());
    println!("training accuracy {:.3}", train_hits as f64 / labels.len() as f64);
    for probe in [array![0.2, -0.1], array![2.5, 0.5], array![1.5, 1.5]] {
        println!(
            "probe ({:+.1}, {:+.1}): decision {:?}, top-2 {:?}",
            probe[0],
            probe[1],
            model
                .decision_values(probe.view())?
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            svm_predict_topk(&model, probe.view(), 2)?
        );
    }
    Ok(())
}
