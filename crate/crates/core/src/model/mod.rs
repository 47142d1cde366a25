//! Pre-norm transformer encoder–decoder whose decoder can be run twice over
//! one parameter store: once on gold inputs and once on mixed inputs.

mod checkpoint;
mod decode;
mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_dropout_rate, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{Container, NamedArray, CHECKPOINT_MAGIC};
pub use decode::{beam_search, length_penalty, BeamHypothesis};
pub use forward::{DecoderOutput, DropoutMode, Forward, MixedInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    /// Longest sequence (including BOS/EOS) the positional table covers.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 32,
            tgt_vocab: 32,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            dropout_rate: 0.1,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.src_vocab <= crate::tasks::RESERVED || self.tgt_vocab <= crate::tasks::RESERVED {
            return Err(Error::config("model vocabularies must exceed the reserved tokens"));
        }
        if self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::config("model.d_ff must be positive and model.max_len >= 2"));
        }
        check_dropout_rate(self.dropout_rate)
            .map_err(|_| Error::config(format!("model.dropout_rate {} outside [0, 1)", self.dropout_rate)))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Index of one parameter tensor in a [`Transformer`]'s store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIds {
    pub inner: LinearIds,
    pub outer: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub attn_norm: NormIds,
    pub attn: AttentionIds,
    pub ffn_norm: NormIds,
    pub ffn: FeedForwardIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub self_norm: NormIds,
    pub self_attn: AttentionIds,
    pub cross_norm: NormIds,
    pub cross_attn: AttentionIds,
    pub ffn_norm: NormIds,
    pub ffn: FeedForwardIds,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Xavier/Glorot uniform over `[fan_in, fan_out]`.
    Xavier,
    /// Uniform with standard deviation `d_model^-1/2`.
    Embedding,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Names, shapes and typed indices of every parameter, derived from a config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
    pub output: LinearIds,
    pub specs: Vec<ParamSpec>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            weight: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Xavier),
            bias: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            query: self.linear(&format!("{prefix}.query"), d, d),
            key: self.linear(&format!("{prefix}.key"), d, d),
            value: self.linear(&format!("{prefix}.value"), d, d),
            out: self.linear(&format!("{prefix}.out"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForwardIds {
        FeedForwardIds {
            inner: self.linear(&format!("{prefix}.inner"), d, d_ff),
            outer: self.linear(&format!("{prefix}.outer"), d_ff, d),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let src_embed = b.add("src_embed".into(), vec![config.src_vocab, d], Init::Embedding);
        let tgt_embed = b.add("tgt_embed".into(), vec![config.tgt_vocab, d], Init::Embedding);
        let encoder = (0..config.n_encoder_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerIds {
                    attn_norm: b.norm(&format!("{p}.attn_norm"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let decoder = (0..config.n_decoder_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerIds {
                    self_norm: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                }
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", d);
        let output = b.linear("output", d, config.tgt_vocab);
        Layout {
            src_embed,
            tgt_embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            specs: b.specs,
        }
    }
}

/// Parameters registered on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The single parameter store θ plus the fixed sinusoidal position table.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    positions: Tensor<T>,
}

impl<T: Scalar> Transformer<T> {
    /// Fresh model initialized from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = stream_rng(seed, Stream::Init);
        let d = config.d_model as f64;
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Xavier => {
                    let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::lit(rng.gen_range(-a..a)))
                }
                Init::Embedding => {
                    let a = (3.0 / d).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::lit(rng.gen_range(-a..a)))
                }
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Rebuilds a model from tensors in layout order, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for this config, found {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} but the config requires {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(Transformer {
            config,
            layout,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`; `tracked` selects whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, tracked: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), tracked))
                .collect(),
        }
    }

    pub(crate) fn positions(&self) -> &Tensor<T> {
        &self.positions
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<T: Scalar>(max_len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_len, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
