//! Residual convolutional backbone with a nested-skip upsampling head.

use rand::Rng;
use routecast_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming, normal, Binding, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Dense nested skip pathways between every pair of neighbouring levels.
    #[default]
    NestedSkip,
    /// One skip connection per level.
    PlainSkip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channels of the encoder image; must equal the encoder `d_model`.
    pub in_channels: usize,
    /// Residual blocks per level.
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub head: HeadKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            depths: vec![2, 2, 2, 2],
            widths: vec![64, 128, 256, 512],
            head: HeadKind::NestedSkip,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            in_channels: 32,
            widths: vec![16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("decoder needs at least one level".into()));
        }
        if self.depths.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "decoder has {} depths but {} widths",
                self.depths.len(),
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("decoder channel widths must be positive".into()));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config("every decoder level needs at least one block".into()));
        }
        Ok(())
    }
}

/// Bias-free convolution followed by a per-channel affine.
struct ConvUnit {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                kaiming(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
            ),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c_out], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c_out])),
            stride,
            pad: kernel / 2,
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, b.var(self.w), None, self.stride, self.pad)?;
        Ok(tape.channel_affine(y, b.var(self.gamma), b.var(self.beta))?)
    }

    fn apply_relu<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = self.apply(tape, b, x)?;
        Ok(tape.relu(y)?)
    }
}

struct BasicBlock {
    c1: ConvUnit,
    c2: ConvUnit,
    proj: Option<ConvUnit>,
}

impl BasicBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let proj = (stride != 1 || c_in != c_out)
            .then(|| ConvUnit::new(store, rng, &format!("{name}.proj"), c_in, c_out, 1, stride));
        Self {
            c1: ConvUnit::new(store, rng, &format!("{name}.c1"), c_in, c_out, 3, stride),
            c2: ConvUnit::new(store, rng, &format!("{name}.c2"), c_out, c_out, 3, 1),
            proj,
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = self.c1.apply_relu(tape, b, x)?;
        let y = self.c2.apply(tape, b, y)?;
        let skip = match &self.proj {
            Some(p) => p.apply(tape, b, x)?,
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y)?)
    }
}

enum Head {
    /// `nodes[i][j - 1]` produces `X[i][j]`.
    Nested(Vec<Vec<ConvUnit>>),
    /// `nodes[i]` merges level `i` with the upsampled path from below.
    Plain(Vec<ConvUnit>),
}

pub struct Decoder {
    config: DecoderConfig,
    stem: ConvUnit,
    levels: Vec<Vec<BasicBlock>>,
    head: Head,
    out_w: ParamId,
    out_b: ParamId,
}

impl Decoder {
    pub fn new<T: Real>(config: &DecoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let stem = ConvUnit::new(store, rng, "decoder.stem", config.in_channels, w[0], 3, 1);
        let mut levels = Vec::with_capacity(w.len());
        for (i, &depth) in config.depths.iter().enumerate() {
            let blocks = (0..depth)
                .map(|j| {
                    let (c_in, stride) = match (i, j) {
                        (0, _) | (_, 1..) => (w[i], 1),
                        _ => (w[i - 1], 2),
                    };
                    BasicBlock::new(store, rng, &format!("decoder.level{i}.block{j}"), c_in, w[i], stride)
                })
                .collect();
            levels.push(blocks);
        }
        let l = w.len();
        let head = match config.head {
            HeadKind::NestedSkip => Head::Nested(
                (0..l - 1)
                    .map(|i| {
                        (1..l - i)
                            .map(|j| {
                                let name = format!("decoder.head.x{i}{j}");
                                ConvUnit::new(store, rng, &name, j * w[i] + w[i + 1], w[i], 3, 1)
                            })
                            .collect()
                    })
                    .collect(),
            ),
            HeadKind::PlainSkip => Head::Plain(
                (0..l - 1)
                    .map(|i| ConvUnit::new(store, rng, &format!("decoder.head.up{i}"), w[i] + w[i + 1], w[i], 3, 1))
                    .collect(),
            ),
        };
        let out_w = store.add("decoder.out.w", normal(rng, &[1, w[0], 1, 1], 0.01));
        let out_b = store.add("decoder.out.b", Tensor::zeros(&[1]));
        Ok(Self {
            config: config.clone(),
            stem,
            levels,
            head,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Pre-sigmoid map `H×W` for an input image `D×H×W`.
    pub fn forward_logits<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, y: Var) -> Result<Var> {
        let (c, h, w) = match tape.value(y).shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::Config(format!("decoder input must be D×H×W, got {s:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "decoder expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mult = 1usize << (self.config.levels() - 1);
        let (hp, wp) = (h.next_multiple_of(mult), w.next_multiple_of(mult));
        let x = if (hp, wp) != (h, w) { tape.pad2d(y, hp, wp)? } else { y };

        let mut x = self.stem.apply_relu(tape, b, x)?;
        let mut feats = Vec::with_capacity(self.levels.len());
        for blocks in &self.levels {
            for block in blocks {
                x = block.apply(tape, b, x)?;
            }
            feats.push(x);
        }

        let top = match &self.head {
            Head::Nested(nodes) => {
                let l = feats.len();
                // grid[i][j] = X[i][j]
                let mut grid: Vec<Vec<Var>> = feats.iter().map(|&f| vec![f]).collect();
                for j in 1..l {
                    for i in 0..l - j {
                        let up = tape.upsample2x(grid[i + 1][j - 1])?;
                        let mut parts = grid[i][..j].to_vec();
                        parts.push(up);
                        let cat = tape.concat_channels(&parts)?;
                        let node = nodes[i][j - 1].apply_relu(tape, b, cat)?;
                        grid[i].push(node);
                    }
                }
                *grid[0].last().expect("level 0 populated")
            }
            Head::Plain(nodes) => {
                let mut path = *feats.last().expect("at least one level");
                for i in (0..feats.len() - 1).rev() {
                    let up = tape.upsample2x(path)?;
                    let cat = tape.concat_channels(&[feats[i], up])?;
                    path = nodes[i].apply_relu(tape, b, cat)?;
                }
                path
            }
        };

        let logits = tape.conv2d(top, b.var(self.out_w), Some(b.var(self.out_b)), 1, 0)?;
        let logits = if (hp, wp) != (h, w) {
            tape.crop2d(logits, h, w)?
        } else {
            logits
        };
        Ok(tape.reshape(logits, &[h, w])?)
    }

    /// Map `H×W` holding only the output bias, for inputs with no points.
    pub fn bias_map<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, h: usize, w: usize) -> Result<Var> {
        let zeros = tape.constant(Tensor::zeros(&[self.config.widths[0], h, w]));
        let logits = tape.conv2d(zeros, b.var(self.out_w), Some(b.var(self.out_b)), 1, 0)?;
        let logits = tape.reshape(logits, &[h, w])?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Prediction map `H×W` in `(0, 1)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, y: Var) -> Result<Var> {
        let logits = self.forward_logits(tape, b, y)?;
        Ok(tape.sigmoid(logits)?)
    }
}
