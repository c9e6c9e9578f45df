//! Random cache-only libraries for exercising selection and fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::library::{ModelLibrary, PredictionCache};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub models: usize,
    pub n_test: usize,
    pub n_cv: usize,
    pub classes: usize,
    pub seed: u64,
}

fn random_probs(rng: &mut ChaCha8Rng, truth: &[usize], k: usize, skill: f64) -> Matrix {
    let mut m = Matrix::zeros(truth.len(), k);
    for (i, &t) in truth.iter().enumerate() {
        let row = m.row_mut(i);
        for x in row.iter_mut() {
            *x = rng.random_range(0.01..1.0);
        }
        if rng.random_bool(skill) {
            row[t] += rng.random_range(0.0..1.5);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    m
}

/// Library whose models have random skill in [0.2, 0.8] and noisy
/// probability rows.
pub fn random_library(spec: SyntheticSpec) -> ModelLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.classes;
    let test_labels: Vec<usize> = (0..spec.n_test).map(|_| rng.random_range(0..k)).collect();
    let cv_labels: Vec<usize> = (0..spec.n_cv).map(|_| rng.random_range(0..k)).collect();
    let caches = (0..spec.models)
        .map(|model_id| {
            let skill = rng.random_range(0.2..0.8);
            PredictionCache {
                model_id,
                test_probs: random_probs(&mut rng, &test_labels, k, skill),
                cv_probs: random_probs(&mut rng, &cv_labels, k, skill),
            }
        })
        .collect();
    let classes = (0..k).map(|c| format!("c{c}")).collect();
    ModelLibrary::from_caches(classes, test_labels, cv_labels, caches).expect("shapes are consistent")
}
