//! Shared fixtures for the criterion benches.

use fdtr_core::config::RunConfig;
use fdtr_core::data::{generate_image, AnnotatedImage, Split};
use fdtr_core::detector::Detector;
use fdtr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Random `rows × cols` matching costs in `[0, 1)`.
pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random::<f64>()).collect())
        .collect()
}

/// Compact detector with image queries (g = 2) and patch fusion, random
/// frozen encoder, plus one annotated scene.
pub fn enhanced_detector() -> (RunConfig, Detector, AnnotatedImage) {
    let mut c = RunConfig::compact();
    c.image_queries = 5;
    c.enhancer_count = 1;
    c.detector.fuse_patches = true;
    let det = Detector::new(c.detector_config().expect("valid config"), 0).expect("detector");
    let (img, _) = generate_image(&c.scene_spec(), Split::Train, 0);
    (c, det, img)
}

pub fn plain_detector() -> (RunConfig, Detector, AnnotatedImage) {
    let c = RunConfig::compact();
    let det = Detector::new(c.detector_config().expect("valid config"), 0).expect("detector");
    let (img, _) = generate_image(&c.scene_spec(), Split::Train, 0);
    (c, det, img)
}
