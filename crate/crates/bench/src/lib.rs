//! Shared fixtures for the criterion benchmarks.

use betarank_core::arch::build_architecture;
use betarank_core::graph::{init_weights, ModelGraph, ModelWeights};
use betarank_core::rng::Rng;
use betarank_core::tensor::Tensor;

pub fn toy_model() -> (ModelGraph, ModelWeights) {
    let graph = build_architecture("toycnn", (3, 32, 32), 3).unwrap();
    let weights = init_weights(&graph, 1).unwrap();
    (graph, weights)
}

pub fn vgg_model() -> (ModelGraph, ModelWeights) {
    let graph = build_architecture("vgg16-cifar", (3, 32, 32), 10).unwrap();
    let weights = init_weights(&graph, 1).unwrap();
    (graph, weights)
}

pub fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let mut t = Tensor::zeros(&[n, c, h, w]);
    for v in t.data_mut() {
        *v = rng.next_f32();
    }
    t
}
