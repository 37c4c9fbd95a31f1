#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routecast_core::dataset::{self, Sample};
use routecast_core::decoder::{DecoderConfig, HeadKind};
use routecast_core::encoder::EncoderConfig;
use routecast_core::io::{Extent, Node, NodeSet, Resolution, SynthConfig};
use routecast_core::model::ModelConfig;
use routecast_core::Config;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-stage model small enough to train in seconds on a 16×16 raster.
pub fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.model = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            k: 2,
            base_resolution: Resolution::square(16),
            ..EncoderConfig::desk().with_stages(2)
        },
        decoder: DecoderConfig {
            in_channels: 8,
            depths: vec![1, 1],
            widths: vec![4, 8],
            head: HeadKind::NestedSkip,
        },
    };
    c.train.epochs = 6;
    c.train.warmup_epochs = 1;
    c.train.batch_size = 2;
    c.train.lds_config.bin_width = 0.01;
    c
}

pub fn tiny_data(seed: u64, count: usize) -> Vec<Sample> {
    dataset::synthetic(seed, count, &SynthConfig::new(120, 3, Resolution::square(16))).unwrap()
}

pub fn random_nodes(rng: &mut ChaCha8Rng, n: usize, side: f64) -> NodeSet {
    let nodes = (0..n)
        .map(|i| Node {
            id: format!("n{i}"),
            x: rng.random_range(0.0..side),
            y: rng.random_range(0.0..side),
            w: rng.random_range(0.1..2.0),
            h: rng.random_range(0.1..2.0),
        })
        .collect();
    NodeSet::new(nodes, Some(Extent::new(0.0, 0.0, side, side))).unwrap()
}
