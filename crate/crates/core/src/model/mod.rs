//! The detector network: statement embedding, scope summarisation and
//! factorisation, a post-norm transformer encoder over statements plus one
//! auxiliary row, and the function- and statement-level heads.

mod forward;
mod input;

use serde::{Deserialize, Serialize};

pub use forward::{Conditioning, ForwardOutput};
pub use input::EncodedFunction;

use crate::diffcore::rng::{purpose, RngStream};
use crate::diffcore::{GruCell, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Rnn,
    Mean,
    Max,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(PoolingMode::Rnn),
            "mean" => Ok(PoolingMode::Mean),
            "max" => Ok(PoolingMode::Max),
            other => Err(Error::Config(format!("unknown pooling mode {other}"))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingMode::Rnn => "rnn",
            PoolingMode::Mean => "mean",
            PoolingMode::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Factorised scope width.
    pub h: usize,
    /// Statements kept per function.
    pub n: usize,
    /// Tokens kept per statement.
    pub r: usize,
    /// Vulnerable statements kept per scope.
    pub q: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub pooling: PoolingMode,
    /// Adds sinusoidal positions to statement rows before the encoder.
    pub positional_encoding: bool,
    pub ffn_width: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// CPU-sized defaults.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d: 64,
            h: 16,
            n: 32,
            r: 12,
            q: 4,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            vocab_size,
            pooling: PoolingMode::Rnn,
            positional_encoding: false,
            ffn_width: 256,
            init_std: 0.02,
        }
    }

    /// Shape constants of the full-scale setting.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            n: 155,
            r: 20,
            q: 12,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.d, self.h, self.n, self.r, self.q, self.heads, self.ffn_width]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.h > self.d {
            return bad(format!("h={} exceeds d={}", self.h, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab size {} too small", self.vocab_size));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Handles into the [`ParamStore`] for every learnable matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    /// `v×d` token embedding.
    pub embedding: ParamId,
    pub gru_statement: GruCell,
    pub gru_vul: GruCell,
    pub gru_function: GruCell,
    /// `q×d` stand-in scope for benign functions.
    pub p_benign: ParamId,
    /// `d×h` scope factorisation and its layer norm.
    pub w_factor: ParamId,
    pub factor_gain: ParamId,
    pub factor_bias: ParamId,
    /// `h×d` centroid up-projection.
    pub w_up: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    /// Function head (`d×d`, `d×1`).
    pub w_g: ParamId,
    pub w_u: ParamId,
    /// Statement head (`d×d`, `d×1`).
    pub w_i: ParamId,
    pub w_j: ParamId,
    /// Centroid-selection attention (`h×h` each).
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Model {
    /// Fresh weights: matrices ~ N(0, init_std), layer-norm gains 1, biases 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, purpose::INIT);
        let mut store = ParamStore::new();
        let (d, h, std) = (config.d, config.h, config.init_std);
        let mut normal = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
            store.add_normal(name, r, c, std, &mut rng)
        };
        let embedding = normal(&mut store, "embedding", config.vocab_size, d);
        let p_benign = normal(&mut store, "p_benign", config.q, d);
        let w_factor = normal(&mut store, "factor.w", d, h);
        let w_up = normal(&mut store, "up.w", h, d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.{l}");
            layers.push(EncoderLayerParams {
                w_qkv: normal(&mut store, &format!("{p}.attn.w_qkv"), d, 3 * d),
                b_qkv: store.add_constant(format!("{p}.attn.b_qkv"), 1, 3 * d, 0.0),
                w_o: normal(&mut store, &format!("{p}.attn.w_o"), d, d),
                b_o: store.add_constant(format!("{p}.attn.b_o"), 1, d, 0.0),
                ln1_gain: store.add_constant(format!("{p}.ln1.gain"), 1, d, 1.0),
                ln1_bias: store.add_constant(format!("{p}.ln1.bias"), 1, d, 0.0),
                w_ff1: normal(&mut store, &format!("{p}.ffn.w1"), d, config.ffn_width),
                b_ff1: store.add_constant(format!("{p}.ffn.b1"), 1, config.ffn_width, 0.0),
                w_ff2: normal(&mut store, &format!("{p}.ffn.w2"), config.ffn_width, d),
                b_ff2: store.add_constant(format!("{p}.ffn.b2"), 1, d, 0.0),
                ln2_gain: store.add_constant(format!("{p}.ln2.gain"), 1, d, 1.0),
                ln2_bias: store.add_constant(format!("{p}.ln2.bias"), 1, d, 0.0),
            });
        }
        let w_g = normal(&mut store, "head.function.w_g", d, d);
        let w_u = normal(&mut store, "head.function.w_u", d, 1);
        let w_i = normal(&mut store, "head.statement.w_i", d, d);
        let w_j = normal(&mut store, "head.statement.w_j", d, 1);
        let w_q = normal(&mut store, "select.w_q", h, h);
        let w_k = normal(&mut store, "select.w_k", h, h);
        let w_v = normal(&mut store, "select.w_v", h, h);
        let factor_gain = store.add_constant("factor.ln.gain", 1, h, 1.0);
        let factor_bias = store.add_constant("factor.ln.bias", 1, h, 0.0);
        let gru_statement = GruCell::register(&mut store, "gru.statement", d, d, std, &mut rng);
        let gru_vul = GruCell::register(&mut store, "gru.vul", d, d, std, &mut rng);
        let gru_function = GruCell::register(&mut store, "gru.function", d, d, std, &mut rng);
        Ok(Model {
            config,
            params: ModelParams {
                embedding,
                gru_statement,
                gru_vul,
                gru_function,
                p_benign,
                w_factor,
                factor_gain,
                factor_bias,
                w_up,
                layers,
                w_g,
                w_u,
                w_i,
                w_j,
                w_q,
                w_k,
                w_v,
            },
            store,
        })
    }

    /// Replaces every parameter value with the one in `store`, checking that
    /// names and shapes line up.
    pub fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        for (id, name, value) in self.store.iter() {
            let other = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter record {name}")))?;
            if store.get(other).dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter record {name}: shape {:?} does not match model shape {:?}",
                    store.get(other).dim(),
                    value.dim()
                )));
            }
            let _ = id;
        }
        let ids: Vec<(ParamId, ParamId)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, store.id(name).expect("checked above")))
            .collect();
        for (mine, theirs) in ids {
            *self.store.get_mut(mine) = store.get(theirs).clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
