mod common;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use routecast_core::encoder::{AttnNorm, Encoder, EncoderConfig};
use routecast_core::io::{assign_grid, normalize, Extent, GridSpec, Node, NodeSet, Resolution};
use routecast_core::params::ParamStore;
use routecast_tensor::Tape;

fn encoder(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config, &mut store, &mut common::rng(seed)).unwrap();
    (enc, store)
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        k: 3,
        base_resolution: Resolution::square(16),
        ..EncoderConfig::desk()
    }
}

#[test]
fn attention_sums_to_one_per_grid_and_latent() {
    let config = small_config();
    let (enc, store) = encoder(&config, 1);
    let mut rng = common::rng(2);
    for _ in 0..10 {
        let n = rng.random_range(1..200);
        let nodes = common::random_nodes(&mut rng, n, 50.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let trace = enc.forward_traced(&mut tape, &b, &nodes).unwrap();
        for st in &trace.stages {
            let alpha = tape.value(st.alpha);
            let mut sums = vec![0.0f64; st.assignment.num_segments() * config.k];
            for (i, &s) in st.assignment.segment_of.iter().enumerate() {
                for j in 0..config.k {
                    sums[s * config.k + j] += alpha.data()[i * config.k + j];
                }
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");
        }
    }
}

#[test]
fn global_attention_sums_to_one_over_all_points() {
    let config = EncoderConfig {
        attn_norm: AttnNorm::Global,
        ..small_config()
    };
    let (enc, store) = encoder(&config, 3);
    let nodes = common::random_nodes(&mut common::rng(4), 90, 10.0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let trace = enc.forward_traced(&mut tape, &b, &nodes).unwrap();
    let alpha = tape.value(trace.stages[0].alpha);
    for j in 0..config.k {
        let s: f64 = (0..nodes.len()).map(|i| alpha.data()[i * config.k + j]).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn node_order_does_not_change_the_image() {
    let config = small_config();
    let (enc, store) = encoder(&config, 5);
    let mut rng = common::rng(6);
    let nodes = common::random_nodes(&mut rng, 300, 40.0);
    let mut shuffled = nodes.nodes.clone();
    shuffled.shuffle(&mut rng);
    let shuffled = NodeSet::new(shuffled, Some(nodes.extent)).unwrap();

    let image = |set: &NodeSet| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let y = enc.forward(&mut tape, &b, set).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (image(&nodes), image(&shuffled));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn nodes_in_one_cell_light_up_one_pixel() {
    let config = small_config();
    let (enc, store) = encoder(&config, 7);
    let mut rng = common::rng(8);
    // extent 16×16 units on a 16×16 raster: cell (5, 9) is [5, 6)×[9, 10)
    let nodes: Vec<Node> = (0..25)
        .map(|i| Node {
            id: format!("n{i}"),
            x: rng.random_range(5.05..5.95),
            y: rng.random_range(9.05..9.95),
            w: 0.2,
            h: 0.2,
        })
        .collect();
    let nodes = NodeSet::new(nodes, Some(Extent::new(0.0, 0.0, 16.0, 16.0))).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let y = enc.forward(&mut tape, &b, &nodes).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[8, 16, 16]);
    for c in 0..8 {
        for yy in 0..16 {
            for xx in 0..16 {
                let val = v.data()[(c * 16 + yy) * 16 + xx];
                if (xx, yy) != (5, 9) {
                    assert_eq!(val, 0.0, "channel {c} cell ({xx}, {yy})");
                }
            }
        }
    }
    assert!((0..8).any(|c| v.data()[(c * 16 + 9) * 16 + 5] != 0.0));
}

#[test]
fn grid_assignment_matches_hash_grouping() {
    let mut rng = common::rng(9);
    for case in 0..50 {
        let n = rng.random_range(1..400);
        let side = rng.random_range(1.0..100.0);
        let nodes = common::random_nodes(&mut rng, n, side);
        let res = Resolution::new(rng.random_range(4..40), rng.random_range(4..40));
        let coords = normalize(&nodes, res).unwrap();
        let (dx, dy) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = assign_grid(&coords, GridSpec::new(dx, dy).unwrap());

        let mut groups: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, &[x, y]) in coords.xy.iter().enumerate() {
            groups
                .entry(((x / dx as f64) as usize, (y / dy as f64) as usize))
                .or_default()
                .push(i);
        }
        assert_eq!(a.num_segments(), groups.len(), "case {case}");
        for (s, cell) in a.occupied.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| a.segment_of[i] == s).collect();
            assert_eq!(&members, &groups[cell], "case {case}");
        }
        let mut sorted = a.occupied.clone();
        sorted.sort_by_key(|&(x, y)| (y, x));
        assert_eq!(sorted, a.occupied, "row-major numbering");
    }
}

#[test]
fn encoder_cost_is_linear_in_points() {
    let config = small_config();
    let (enc, store) = encoder(&config, 10);
    let mut rng = common::rng(11);
    let time = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let nodes = common::random_nodes(rng, n, 100.0);
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let t = std::time::Instant::now();
            enc.forward(&mut tape, &b, &nodes).unwrap();
            best = best.min(t.elapsed().as_secs_f64());
        }
        best
    };
    let (t1, t4) = (time(5_000, &mut rng), time(20_000, &mut rng));
    assert!(t4 < 8.0 * t1, "{t1} vs {t4}");
}
