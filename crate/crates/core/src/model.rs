//! Encoder and decoder combined into one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routecast_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::grid::LabelGrid;
use crate::io::nodes::NodeSet;
use crate::io::raster::Resolution;
use crate::params::{Binding, ParamStore};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.encoder.base_resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.in_channels != self.encoder.d_model {
            return Err(Error::Config(format!(
                "decoder.in_channels is {} but encoder.d_model is {}",
                self.decoder.in_channels, self.encoder.d_model
            )));
        }
        Ok(())
    }
}

pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<T: Real> Model<T> {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let decoder = Decoder::new(&config.decoder, &mut params, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            decoder,
        })
    }

    /// Model with parameters restored from 64-bit named tensors.
    pub fn from_named(config: &ModelConfig, named: &[(String, Tensor<f64>)]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let cast: Vec<_> = named.iter().map(|(n, t)| (n.clone(), t.cast::<T>())).collect();
        m.params.load_named(&cast)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn resolution(&self) -> Resolution {
        self.config.resolution()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        self.params.bind(tape, trainable)
    }

    /// Prediction map `H×W` recorded on `tape`. An empty node set carries no
    /// evidence and maps to the uniform output bias.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, nodes: &NodeSet) -> Result<Var> {
        if nodes.is_empty() {
            let r = self.resolution();
            return self.decoder.bias_map(tape, b, r.height, r.width);
        }
        let y = self.encoder.forward(tape, b, nodes)?;
        self.decoder.forward(tape, b, y)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, nodes: &NodeSet) -> Result<LabelGrid> {
        let mut tape = Tape::new().with_finite_checks(false);
        let b = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, nodes)?;
        let r = self.resolution();
        let values: Vec<f64> = tape.value(out).data().iter().map(|v| v.f64()).collect();
        LabelGrid::from_f64(r.width, r.height, &values)
    }
}
