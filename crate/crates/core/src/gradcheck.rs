//! Finite-difference suites over the tape ops, the encoder, the decoder,
//! the loss and the composed model, all in 64-bit.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routecast_tensor::{GradCheck, GradCheckReport, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, HeadKind};
use crate::encoder::{node_features, AttnNorm, Encoder, EncoderConfig};
use crate::error::Result;
use crate::io::grid::LabelGrid;
use crate::io::nodes::{Extent, Node, NodeSet};
use crate::io::raster::{normalize, Resolution};
use crate::lds::{weighted_mse, LdsConfig, LdsTable};
use crate::params::{Binding, ParamStore};

pub const DEFAULT_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Ops,
    Encoder,
    Decoder,
    Loss,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "ops" => Ok(Self::Ops),
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "loss" => Ok(Self::Loss),
            other => Err(format!("unknown gradcheck module `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

type Case = (
    String,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> routecast_tensor::Result<Var>>,
    Vec<Tensor<f64>>,
);

fn contract(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum with fixed, distinct weights so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var) -> routecast_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 48.5) - 1.0).collect();
    let wv = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

macro_rules! case {
    ($cases:ident, $name:expr, |$t:ident, $v:ident| $body:expr, $inputs:expr) => {
        $cases.push((
            $name.to_string(),
            Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| {
                let y = $body;
                project($t, y)
            }),
            $inputs,
        ))
    };
}

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases: Vec<Case> = Vec::new();
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let kinked = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    case!(cases, "add", |t, v| t.add(v[0], v[1])?, vec![a.clone(), b.clone()]);
    case!(cases, "sub", |t, v| t.sub(v[0], v[1])?, vec![a.clone(), b.clone()]);
    case!(cases, "mul", |t, v| t.mul(v[0], v[1])?, vec![a.clone(), b.clone()]);
    case!(cases, "scale", |t, v| t.scale(v[0], 0.7)?, vec![a.clone()]);
    case!(cases, "relu", |t, v| t.relu(v[0])?, vec![kinked]);
    case!(cases, "gelu", |t, v| t.gelu(v[0])?, vec![a.clone()]);
    case!(cases, "sigmoid", |t, v| t.sigmoid(v[0])?, vec![a.clone()]);
    case!(
        cases,
        "mean",
        |t, v| {
            let s = t.mul(v[0], v[0])?;
            t.mean(s)?
        },
        vec![a.clone()]
    );
    case!(cases, "reshape", |t, v| t.reshape(v[0], &[2, 6])?, vec![a.clone()]);
    case!(cases, "transpose", |t, v| t.transpose(v[0])?, vec![a.clone()]);
    let m = random(&mut rng, &[4, 5]);
    case!(
        cases,
        "matmul",
        |t, v| t.matmul(v[0], v[1])?,
        vec![a.clone(), m.clone()]
    );
    let bias = random(&mut rng, &[5]);
    case!(
        cases,
        "linear",
        |t, v| t.linear(v[0], v[1], Some(v[2]))?,
        vec![a.clone(), m, bias]
    );

    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 0, 1, 2]);
    let src = random(&mut rng, &[3, 4]);
    let gi = idx.clone();
    case!(cases, "gather_rows", |t, v| t.gather_rows(v[0], gi.clone())?, vec![src]);
    let vals = random(&mut rng, &[5, 3]);
    let si = idx.clone();
    case!(
        cases,
        "scatter_sum",
        |t, v| t.scatter_sum(v[0], si.clone(), 4)?,
        vec![vals]
    );
    let scores = random(&mut rng, &[5, 2]).map(|x| 2.0 * x);
    let so = idx.clone();
    case!(
        cases,
        "segmented_softmax",
        |t, v| t.segmented_softmax(v[0], so.clone())?,
        vec![scores]
    );
    let (n, k, d) = (3, 2, 4);
    let w = random(&mut rng, &[n, k]);
    let x = random(&mut rng, &[n, d]);
    let keys = random(&mut rng, &[n * k, d]);
    case!(
        cases,
        "row_outer",
        |t, v| t.row_outer(v[0], v[1])?,
        vec![w.clone(), x.clone()]
    );
    case!(
        cases,
        "slot_scores",
        |t, v| t.slot_scores(v[0], v[1], 2)?,
        vec![x, keys.clone()]
    );
    case!(cases, "slot_mix", |t, v| t.slot_mix(v[0], v[1])?, vec![w, keys]);

    let img = random(&mut rng, &[2, 4, 4]);
    let dk = random(&mut rng, &[2, 3, 3]);
    case!(
        cases,
        "depthwise_conv2d",
        |t, v| t.depthwise_conv2d(v[0], v[1])?,
        vec![img.clone(), dk]
    );
    let cw = random(&mut rng, &[3, 2, 3, 3]);
    let cb = random(&mut rng, &[3]);
    case!(
        cases,
        "conv2d",
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?,
        vec![img.clone(), cw.clone(), cb.clone()]
    );
    case!(
        cases,
        "conv2d_stride2",
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?,
        vec![img.clone(), cw, cb]
    );
    let g = random(&mut rng, &[2]);
    let be = random(&mut rng, &[2]);
    case!(
        cases,
        "channel_affine",
        |t, v| t.channel_affine(v[0], v[1], v[2])?,
        vec![img.clone(), g, be]
    );
    case!(cases, "upsample2x", |t, v| t.upsample2x(v[0])?, vec![img.clone()]);
    let other = random(&mut rng, &[1, 4, 4]);
    case!(
        cases,
        "concat_channels",
        |t, v| t.concat_channels(&[v[0], v[1]])?,
        vec![img.clone(), other]
    );
    case!(cases, "pad2d", |t, v| t.pad2d(v[0], 5, 6)?, vec![img.clone()]);
    case!(cases, "crop2d", |t, v| t.crop2d(v[0], 3, 2)?, vec![img]);
    cases
}

/// Small fixed point set on an 8×8 die.
fn tiny_nodes(n: usize, seed: u64) -> NodeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|i| Node {
            id: format!("g{i}"),
            x: rng.random_range(0.0..8.0),
            y: rng.random_range(0.0..8.0),
            w: rng.random_range(0.5..2.0),
            h: rng.random_range(0.5..2.0),
        })
        .collect();
    NodeSet::new(nodes, Some(Extent::new(0.0, 0.0, 8.0, 8.0))).expect("valid nodes")
}

fn tiny_encoder_config(resolution: usize) -> EncoderConfig {
    EncoderConfig {
        n_stages: 1,
        grid_scales: vec![2],
        d_model: 4,
        k: 2,
        base_resolution: Resolution::square(resolution),
        attn_norm: AttnNorm::PerGrid,
        ffn_kernel: 3,
    }
}

fn tiny_decoder_config() -> DecoderConfig {
    DecoderConfig {
        in_channels: 4,
        depths: vec![1, 1],
        widths: vec![4, 8],
        head: HeadKind::NestedSkip,
    }
}

/// Parameters jittered away from their structured init so no ReLU sits on its kink.
fn jittered(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            t
        })
        .collect()
}

fn skewed_label(side: usize, seed: u64) -> LabelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..side * side)
        .map(|_| {
            if rng.random_bool(0.8) {
                rng.random_range(0.0..0.1)
            } else {
                rng.random_range(0.5..1.0)
            }
        })
        .collect();
    LabelGrid::new(side, side, values).expect("unit values")
}

fn encoder_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = tiny_encoder_config(4);
    let mut store = ParamStore::new();
    let enc = Arc::new(Encoder::new(&cfg, &mut store, &mut rng)?);
    let nodes = tiny_nodes(6, 5);
    let coords = Arc::new(normalize(&nodes, cfg.base_resolution)?);
    let feats = node_features::<f64>(&nodes, &coords);
    let mut inputs = vec![feats.clone()];
    inputs.extend(jittered(&store, &mut rng));
    let (e1, c1) = (enc.clone(), coords.clone());
    let mut cases: Vec<Case> = vec![(
        "encoder (1 stage, n=6, k=2, d=4)".into(),
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let b = Binding::from_vars(v[1..].to_vec());
            let y = e1.forward_features(t, &b, v[0], &c1).map_err(contract)?.image;
            project(t, y)
        }),
        inputs,
    )];
    let e2 = enc.clone();
    let mut embed_inputs = vec![feats];
    embed_inputs.extend(jittered(&store, &mut rng));
    cases.push((
        "embed_input".into(),
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let b = Binding::from_vars(v[1..].to_vec());
            let y = e2.embed_input(t, &b, v[0]).map_err(contract)?;
            project(t, y)
        }),
        embed_inputs,
    ));
    Ok(cases)
}

fn decoder_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cases: Vec<Case> = Vec::new();
    for head in [HeadKind::NestedSkip, HeadKind::PlainSkip] {
        let cfg = DecoderConfig {
            head,
            ..tiny_decoder_config()
        };
        let mut store = ParamStore::new();
        let dec = Decoder::new(&cfg, &mut store, &mut rng)?;
        let mut inputs = vec![random(&mut rng, &[4, 8, 8])];
        inputs.extend(jittered(&store, &mut rng));
        cases.push((
            format!("decoder (8x8, widths [4, 8], {head:?})"),
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let b = Binding::from_vars(v[1..].to_vec());
                let y = dec.forward(t, &b, v[0]).map_err(contract)?;
                project(t, y)
            }),
            inputs,
        ));
    }
    Ok(cases)
}

fn loss_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let label = skewed_label(6, 3);
    let table = LdsTable::from_labels(
        [&label],
        &LdsConfig {
            bin_width: 0.01,
            ..LdsConfig::default()
        },
    )?;
    let pred = random(&mut rng, &[6, 6]).map(|v| 0.5 + 0.4 * v);
    let (l1, l2) = (label.clone(), label);
    Ok(vec![
        (
            "weighted_mse (LDS)".into(),
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| weighted_mse(t, v[0], &l1, Some(&table)).map_err(contract)),
            vec![pred.clone()],
        ),
        (
            "weighted_mse (uniform)".into(),
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| weighted_mse(t, v[0], &l2, None).map_err(contract)),
            vec![pred],
        ),
    ])
}

fn composed_case() -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let enc_cfg = tiny_encoder_config(8);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&enc_cfg, &mut store, &mut rng)?;
    let n_enc = store.len();
    let dec = Decoder::new(&tiny_decoder_config(), &mut store, &mut rng)?;
    let nodes = tiny_nodes(6, 9);
    let coords = normalize(&nodes, enc_cfg.base_resolution)?;
    let feats = node_features::<f64>(&nodes, &coords);
    let label = skewed_label(8, 4);
    let table = LdsTable::from_labels(
        [&label],
        &LdsConfig {
            bin_width: 0.01,
            ..LdsConfig::default()
        },
    )?;
    let _ = n_enc;
    let mut inputs = vec![feats];
    inputs.extend(jittered(&store, &mut rng));
    Ok((
        "encoder + decoder + weighted_mse".into(),
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let b = Binding::from_vars(v[1..].to_vec());
            let y = enc.forward_features(t, &b, v[0], &coords).map_err(contract)?.image;
            let p = dec.forward(t, &b, y).map_err(contract)?;
            weighted_mse(t, p, &label, Some(&table)).map_err(contract)
        }),
        inputs,
    ))
}

/// Build and run the cases of `suite` at relative tolerance `tol`.
pub fn run_suite(suite: Suite, tol: f64) -> Result<Vec<CaseResult>> {
    let mut cases = Vec::new();
    if matches!(suite, Suite::All | Suite::Ops) {
        cases.extend(op_cases());
    }
    if matches!(suite, Suite::All | Suite::Encoder) {
        cases.extend(encoder_cases()?);
    }
    if matches!(suite, Suite::All | Suite::Decoder) {
        cases.extend(decoder_cases()?);
    }
    if matches!(suite, Suite::All | Suite::Loss) {
        cases.extend(loss_cases()?);
    }
    if suite == Suite::All {
        cases.push(composed_case()?);
    }
    let check = GradCheck {
        step: STEP,
        tol,
        ..GradCheck::default()
    };
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            let start = Instant::now();
            let report = check.run(|t, v| f(t, v), &inputs)?;
            Ok(CaseResult {
                name,
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
