//! Fixtures shared by the benchmarks.

use gforest::data::synth_domain;
use gforest::{train, Dataset, GenerativeForest, TrainConfig};

pub fn domain(name: &str) -> Dataset {
    synth_domain(name, 1).expect("known synthetic domain")
}

pub fn trained(name: &str, trees: usize, splits: usize) -> GenerativeForest {
    train(domain(name), &TrainConfig::new(trees, splits))
        .expect("training on a synthetic domain")
        .0
}
