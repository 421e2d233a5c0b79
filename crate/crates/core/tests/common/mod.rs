#![allow(dead_code)]

pub mod props;
pub mod stub;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fads_icl::{synthetic_task, MockBackend, MockConfig, SyntheticSpec, TaskDataset};

pub fn task(classes: usize, train_per_class: usize, test_per_class: usize) -> TaskDataset {
    synthetic_task(
        "synthetic",
        &SyntheticSpec {
            classes,
            train_per_class,
            test_per_class,
            seed: 0,
        },
    )
    .unwrap()
}

pub fn mock(cfg: MockConfig, ds: &TaskDataset) -> MockBackend {
    MockBackend::new(cfg, ds).unwrap()
}

/// Monte Carlo accuracy of the Bayes rule for the mock's generative model:
/// equal priors, shared diagonal covariance, so the rule is the nearest mean
/// under the noise-scaled distance.
pub fn bayes_accuracy(backend: &MockBackend, draws_per_class: usize) -> f64 {
    let means = backend.class_means();
    let scales = backend.noise_scales();
    let mut rng = ChaCha8Rng::seed_from_u64(0xba7e5);
    let mut correct = 0usize;
    for (y, mu) in means.iter().enumerate() {
        for _ in 0..draws_per_class {
            let x: Vec<f64> = mu
                .iter()
                .zip(&scales)
                .map(|(m, s)| m + s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let score = |c: &Vec<f64>| -> f64 {
                x.iter().zip(c).zip(&scales).map(|((a, b), s)| ((a - b) / s).powi(2)).sum()
            };
            let best = (0..means.len())
                .min_by(|&a, &b| score(&means[a]).total_cmp(&score(&means[b])))
                .unwrap();
            correct += (best == y) as usize;
        }
    }
    correct as f64 / (draws_per_class * means.len()) as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
