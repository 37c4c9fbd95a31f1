//! Multi-scale grid-based attention encoder.
//!
//! Each stage compresses the points of every occupied grid into `k` latent
//! slots with a latent-query cross-attention, sums them per grid, refines the
//! resulting sparse image with a depthwise ConvFFN, broadcasts it back to the
//! points and lets every point attend over its grid's `k` refined slots.
//! Cost is linear in the number of points for a fixed raster size.

use std::sync::Arc;

use rand::Rng;
use routecast_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::nodes::NodeSet;
use crate::io::raster::{assign_grid, normalize, GridAssignment, GridSpec, NormalizedCoords, Resolution};
use crate::params::{kaiming, normal, xavier, Binding, ParamId, ParamStore};

/// Normalization domain of the latent-query attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnNorm {
    /// Softmax over the points of each occupied grid.
    #[default]
    PerGrid,
    /// Softmax over all points.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_stages: usize,
    pub grid_scales: Vec<usize>,
    pub d_model: usize,
    pub k: usize,
    pub base_resolution: Resolution,
    pub attn_norm: AttnNorm,
    pub ffn_kernel: usize,
}

const RESIDUAL_INIT_STD: f64 = 0.02;

pub const DEFAULT_SCALES: [usize; 4] = [1, 2, 4, 8];

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_stages: 4,
            grid_scales: DEFAULT_SCALES.to_vec(),
            d_model: 64,
            k: 8,
            base_resolution: Resolution::square(256),
            attn_norm: AttnNorm::PerGrid,
            ffn_kernel: 3,
        }
    }
}

impl EncoderConfig {
    /// Small profile for CPU-only experiments: `d_model = 32`, `k = 4`, 64×64.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            k: 4,
            base_resolution: Resolution::square(64),
            ..Self::default()
        }
    }

    /// Keep the first `n` default scales.
    pub fn with_stages(mut self, n: usize) -> Self {
        self.n_stages = n;
        self.grid_scales = DEFAULT_SCALES.iter().copied().take(n).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n_stages) {
            return Err(Error::Config(format!("n_stages must be 1..=4, got {}", self.n_stages)));
        }
        if self.grid_scales.len() != self.n_stages {
            return Err(Error::Config(format!(
                "grid_scales has {} entries but n_stages is {}",
                self.grid_scales.len(),
                self.n_stages
            )));
        }
        if self.grid_scales.contains(&0) {
            return Err(Error::Config("grid scales must be >= 1".into()));
        }
        if self.d_model == 0 || self.k == 0 {
            return Err(Error::Config("d_model and k must be positive".into()));
        }
        if self.base_resolution.cells() == 0 {
            return Err(Error::Config("base_resolution has no cells".into()));
        }
        if self.ffn_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ffn_kernel must be odd, got {}",
                self.ffn_kernel
            )));
        }
        Ok(())
    }
}

/// Per-node input features: normalized center in `[0, 1)` and size in cells.
pub fn node_features<T: Real>(nodes: &NodeSet, coords: &NormalizedCoords) -> Tensor<T> {
    let r = coords.resolution;
    let e = &nodes.extent;
    let mut data = Vec::with_capacity(nodes.len() * 4);
    for (n, &[x, y]) in nodes.nodes.iter().zip(&coords.xy) {
        data.push(T::of(x / r.width as f64));
        data.push(T::of(y / r.height as f64));
        data.push(T::of(n.w / e.width() * r.width as f64));
        data.push(T::of(n.h / e.height() * r.height as f64));
    }
    Tensor::new(&[nodes.len(), 4], data).expect("n×4 features")
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    /// Near-zero map, so a residual branch starts close to the identity.
    fn small<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), normal(rng, &[fan_in, fan_out], RESIDUAL_INIT_STD)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        Ok(tape.linear(x, b.var(self.w), Some(b.var(self.b)))?)
    }
}

/// Parameters of one grid-attention stage.
pub struct GaStage {
    scale: usize,
    key: Linear,
    value: Linear,
    latents: ParamId,
    ffn_in: Linear,
    ffn_dw1: ParamId,
    ffn_dw2: ParamId,
    ffn_out: Linear,
    query2: Linear,
    key2: Linear,
    value2: Linear,
    out: Linear,
}

/// Intermediate values of a stage kept for inspection.
pub struct StageTrace {
    pub output: Var,
    /// Latent-query attention weights, `n×k`.
    pub alpha: Var,
    pub assignment: GridAssignment,
}

impl GaStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        scale: usize,
        d: usize,
        k: usize,
        kernel: usize,
    ) -> Self {
        let l = k * d;
        Self {
            scale,
            key: Linear::new(store, rng, &format!("{name}.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d),
            latents: store.add(format!("{name}.latents"), normal(rng, &[k, d], 0.02)),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), l, l),
            ffn_dw1: store.add(
                format!("{name}.ffn_dw1"),
                kaiming(rng, &[l, kernel, kernel], kernel * kernel),
            ),
            ffn_dw2: store.add(
                format!("{name}.ffn_dw2"),
                kaiming(rng, &[l, kernel, kernel], kernel * kernel),
            ),
            ffn_out: Linear::small(store, rng, &format!("{name}.ffn_out"), l, l),
            query2: Linear::new(store, rng, &format!("{name}.query2"), d, d),
            key2: Linear::new(store, rng, &format!("{name}.key2"), d, d),
            value2: Linear::new(store, rng, &format!("{name}.value2"), d, d),
            out: Linear::small(store, rng, &format!("{name}.out"), d, d),
        }
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// One stage on point features `x: n×d`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: Var,
        coords: &NormalizedCoords,
        norm: AttnNorm,
    ) -> Result<StageTrace> {
        let spec = GridSpec::uniform(self.scale)?;
        let assignment = assign_grid(coords, spec);
        let (n, d) = match tape.value(x).shape() {
            &[n, d] => (n, d),
            s => return Err(Error::Config(format!("stage input must be n×d, got {s:?}"))),
        };
        if n != coords.len() {
            return Err(Error::Config(format!(
                "{n} feature rows for {} coordinates",
                coords.len()
            )));
        }
        let k = tape.value(b.var(self.latents)).shape()[0];
        if n == 0 {
            let alpha = tape.constant(Tensor::zeros(&[0, k]));
            return Ok(StageTrace {
                output: x,
                alpha,
                assignment,
            });
        }
        let inv_sqrt_d = T::of(1.0 / (d as f64).sqrt());
        let (gw, gh) = assignment.dims;
        let m = assignment.num_segments();

        // latent queries attend over the points of each grid
        let keys = self.key.apply(tape, b, x)?;
        let values = self.value.apply(tape, b, x)?;
        let q_t = tape.transpose(b.var(self.latents))?;
        let scores = tape.matmul(keys, q_t)?;
        let scores = tape.scale(scores, inv_sqrt_d)?;
        let segments: Arc<[usize]> = match norm {
            AttnNorm::PerGrid => Arc::from(assignment.segment_of.as_slice()),
            AttnNorm::Global => Arc::from(vec![0; n]),
        };
        let alpha = tape.segmented_softmax(scores, segments)?;
        let point_latent = tape.row_outer(alpha, values)?;

        // grid-wise features, then the dense image with empty grids at zero
        let grid_feat = tape.scatter_sum(point_latent, Arc::from(assignment.segment_of.as_slice()), m)?;
        let image = tape.scatter_sum(grid_feat, Arc::from(assignment.occupied_flat()), gw * gh)?;

        // ConvFFN with residual
        let l = k * d;
        let z = self.ffn_in.apply(tape, b, image)?;
        let z = tape.transpose(z)?;
        let z = tape.reshape(z, &[l, gh, gw])?;
        let z = tape.depthwise_conv2d(z, b.var(self.ffn_dw1))?;
        let z = tape.gelu(z)?;
        let z = tape.depthwise_conv2d(z, b.var(self.ffn_dw2))?;
        let z = tape.reshape(z, &[l, gh * gw])?;
        let z = tape.transpose(z)?;
        let z = self.ffn_out.apply(tape, b, z)?;
        let image = tape.add(image, z)?;

        // broadcast back to points and attend over the k refined slots
        let slots = tape.gather_rows(image, Arc::from(assignment.point_flat()))?;
        let slots = tape.reshape(slots, &[n * k, d])?;
        let q = self.query2.apply(tape, b, x)?;
        let k2 = self.key2.apply(tape, b, slots)?;
        let v2 = self.value2.apply(tape, b, slots)?;
        let s2 = tape.slot_scores(q, k2, k)?;
        let s2 = tape.scale(s2, inv_sqrt_d)?;
        let s2 = tape.reshape(s2, &[n * k])?;
        let per_point: Arc<[usize]> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let beta = tape.segmented_softmax(s2, per_point)?;
        let beta = tape.reshape(beta, &[n, k])?;
        let o = tape.slot_mix(beta, v2)?;
        let o = self.out.apply(tape, b, o)?;
        let output = tape.add(x, o)?;
        Ok(StageTrace {
            output,
            alpha,
            assignment,
        })
    }
}

pub struct Encoder {
    config: EncoderConfig,
    embed: Linear,
    stages: Vec<GaStage>,
}

/// Encoder output plus per-stage traces.
pub struct EncoderTrace {
    /// Raster features `d_model × H × W`.
    pub image: Var,
    pub stages: Vec<StageTrace>,
}

impl Encoder {
    pub fn new<T: Real>(config: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = Linear::new(store, rng, "encoder.embed", 4, d);
        let stages = config
            .grid_scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                GaStage::new(
                    store,
                    rng,
                    &format!("encoder.stage{i}"),
                    s,
                    d,
                    config.k,
                    config.ffn_kernel,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stages(&self) -> &[GaStage] {
        &self.stages
    }

    /// Linear projection of raw node features `n×4` to `n×d_model`.
    pub fn embed_input<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, p: Var) -> Result<Var> {
        self.embed.apply(tape, b, p)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, nodes: &NodeSet) -> Result<Var> {
        Ok(self.forward_traced(tape, b, nodes)?.image)
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, nodes: &NodeSet) -> Result<EncoderTrace> {
        let coords = normalize(nodes, self.config.base_resolution)?;
        let p = tape.constant(node_features(nodes, &coords));
        self.forward_features(tape, b, p, &coords)
    }

    /// Run from an explicit feature tensor (used by gradient checks).
    pub fn forward_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        p: Var,
        coords: &NormalizedCoords,
    ) -> Result<EncoderTrace> {
        let mut x = self.embed_input(tape, b, p)?;
        let mut traces = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let t = stage.forward(tape, b, x, coords, self.config.attn_norm)?;
            x = t.output;
            traces.push(t);
        }
        let image = rasterize(tape, x, coords)?;
        Ok(EncoderTrace { image, stages: traces })
    }
}

/// Sum point features `n×D` into their base cells, giving `D×H×W`.
pub fn rasterize<T: Real>(tape: &mut Tape<T>, x: Var, coords: &NormalizedCoords) -> Result<Var> {
    let r = coords.resolution;
    let d = tape.value(x).shape()[1];
    let base = assign_grid(coords, GridSpec::uniform(1)?);
    let grid = tape.scatter_sum(x, Arc::from(base.point_flat()), r.cells())?;
    let chw = tape.transpose(grid)?;
    Ok(tape.reshape(chw, &[d, r.height, r.width])?)
}
