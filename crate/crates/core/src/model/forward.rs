use rand_chacha::ChaCha8Rng;

use super::{AttentionIds, Bound, FeedForwardIds, LinearIds, NormIds, Transformer};
use crate::autodiff::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::TokenSelection;
use crate::tasks::Batch;

const LN_EPS: f64 = 1e-6;

/// Whether dropout is active for one forward execution, and its stream.
pub enum DropoutMode<'a> {
    Off,
    On { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl DropoutMode<'_> {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            DropoutMode::Off => Ok(x),
            DropoutMode::On { rate, rng } => tape.dropout(x, *rate, *rng),
        }
    }
}

/// One decoder execution.
#[derive(Clone, Debug)]
pub struct DecoderOutput<T> {
    /// `[batch, len, vocab]`
    pub logits: Var,
    /// Softmax of `logits`.
    pub probs: Var,
    /// `probs[b, t, gold[b, t]]`, row-major `[batch, len]`.
    pub gold_prob: Vec<T>,
}

/// Decoder-input embeddings for the second pass together with how each
/// position was chosen.
#[derive(Clone, Debug)]
pub struct MixedInput {
    /// `[batch, len, d_model]` raw (unscaled) embedding rows.
    pub embeddings: Var,
    pub selection: TokenSelection,
}

/// A tape with the model's parameters bound to it, plus the forward
/// building blocks. Both decoding passes run through the same bound
/// parameters, so θ is shared by construction.
pub struct Forward<'m, T: Scalar> {
    model: &'m Transformer<T>,
    pub tape: Tape<T>,
    params: Bound,
    frozen: Option<Bound>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn new(model: &'m Transformer<T>, tracked: bool) -> Self {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, tracked);
        Forward {
            model,
            tape,
            params,
            frozen: None,
        }
    }

    pub fn model(&self) -> &'m Transformer<T> {
        self.model
    }

    pub fn params(&self) -> &Bound {
        &self.params
    }

    /// Untracked copies of the parameters, bound on first use.
    fn frozen(&mut self) -> Bound {
        if self.frozen.is_none() {
            self.frozen = Some(self.model.bind(&mut self.tape, false));
        }
        self.frozen.clone().unwrap()
    }

    /// Drops every node recorded after `mark` (a previous `tape.len()`).
    pub fn truncate(&mut self, mark: usize) {
        self.tape.truncate(mark);
    }

    fn linear(&mut self, p: &Bound, x: Var, ids: LinearIds) -> Result<Var> {
        let y = self.tape.matmul(x, p.var(ids.weight))?;
        self.tape.add(y, p.var(ids.bias))
    }

    fn norm(&mut self, p: &Bound, x: Var, ids: NormIds) -> Result<Var> {
        self.tape.layer_norm(x, p.var(ids.gain), p.var(ids.bias), LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        p: &Bound,
        query_in: Var,
        kv_in: Var,
        ids: AttentionIds,
        key_padding: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(p, query_in, ids.query)?;
        let k = self.linear(p, kv_in, ids.key)?;
        let v = self.linear(p, kv_in, ids.value)?;
        let ctx = self.tape.attention(q, k, v, self.model.config().n_heads, AttentionMask { key_padding, causal })?;
        self.linear(p, ctx, ids.out)
    }

    fn feed_forward(&mut self, p: &Bound, x: Var, ids: FeedForwardIds) -> Result<Var> {
        let h = self.linear(p, x, ids.inner)?;
        let h = self.tape.relu(h);
        self.linear(p, h, ids.outer)
    }

    /// Scales raw embedding rows by √d_model and adds position encodings.
    fn position(&mut self, x: Var, len: usize) -> Result<Var> {
        let cfg = self.model.config();
        if len > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds model.max_len {}",
                cfg.max_len
            )));
        }
        let x = self.tape.scale(x, T::lit((cfg.d_model as f64).sqrt()));
        let d = cfg.d_model;
        let table = self.model.positions();
        let pe = crate::tensor::Tensor::from_parts(vec![len, d], table.data()[..len * d].to_vec());
        let pe = self.tape.constant(pe);
        self.tape.add(x, pe)
    }

    /// Encoder memory `[batch, src_len, d_model]`; padded keys are masked.
    pub fn encode_tokens(
        &mut self,
        src: &[usize],
        src_pad: &[bool],
        batch: usize,
        src_len: usize,
        dropout: &mut DropoutMode,
    ) -> Result<Var> {
        if src.len() != batch * src_len || src_pad.len() != src.len() {
            return Err(Error::contract("source tokens and padding mask disagree in size"));
        }
        if src_len > self.model.config().max_len {
            return Err(Error::Input(format!(
                "source length {src_len} exceeds model.max_len {}",
                self.model.config().max_len
            )));
        }
        let p = self.params.clone();
        let model = self.model;
        let layout = model.layout();
        let x = self.tape.embedding(p.var(layout.src_embed), src, &[batch, src_len])?;
        let x = self.position(x, src_len)?;
        let mut x = dropout.apply(&mut self.tape, x)?;
        for layer in &layout.encoder {
            let h = self.norm(&p, x, layer.attn_norm)?;
            let a = self.attention(&p, h, h, layer.attn, Some(src_pad), false)?;
            let a = dropout.apply(&mut self.tape, a)?;
            x = self.tape.add(x, a)?;
            let h = self.norm(&p, x, layer.ffn_norm)?;
            let f = self.feed_forward(&p, h, layer.ffn)?;
            let f = dropout.apply(&mut self.tape, f)?;
            x = self.tape.add(x, f)?;
        }
        self.norm(&p, x, layout.encoder_norm)
    }

    pub fn encode(&mut self, batch: &Batch, dropout: &mut DropoutMode) -> Result<Var> {
        self.encode_tokens(&batch.src, &batch.src_pad, batch.size, batch.src_len, dropout)
    }

    /// Raw rows of the (tracked) target embedding table.
    pub fn embed_target(&mut self, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let table = self.params.var(self.model.layout().tgt_embed);
        self.tape.embedding(table, ids, &[batch, len])
    }

    /// Decoder stack over raw input embeddings, returning logits.
    pub fn decode_embedded(
        &mut self,
        inputs: Var,
        memory: Var,
        src_pad: &[bool],
        dropout: &mut DropoutMode,
        frozen: bool,
    ) -> Result<Var> {
        let p = if frozen { self.frozen() } else { self.params.clone() };
        let len = self.tape.shape(inputs)[1];
        let model = self.model;
        let layout = model.layout();
        let x = self.position(inputs, len)?;
        let mut x = dropout.apply(&mut self.tape, x)?;
        for layer in &layout.decoder {
            let h = self.norm(&p, x, layer.self_norm)?;
            let a = self.attention(&p, h, h, layer.self_attn, None, true)?;
            let a = dropout.apply(&mut self.tape, a)?;
            x = self.tape.add(x, a)?;
            let h = self.norm(&p, x, layer.cross_norm)?;
            let c = self.attention(&p, h, memory, layer.cross_attn, Some(src_pad), false)?;
            let c = dropout.apply(&mut self.tape, c)?;
            x = self.tape.add(x, c)?;
            let h = self.norm(&p, x, layer.ffn_norm)?;
            let f = self.feed_forward(&p, h, layer.ffn)?;
            let f = dropout.apply(&mut self.tape, f)?;
            x = self.tape.add(x, f)?;
        }
        let x = self.norm(&p, x, layout.decoder_norm)?;
        self.linear(&p, x, layout.output)
    }

    fn finish(&mut self, logits: Var, targets: &[usize]) -> Result<DecoderOutput<T>> {
        let probs = self.tape.masked_softmax(logits, AttentionMask::none())?;
        let pv = self.tape.value(probs);
        let vocab = pv.last_dim();
        let mut gold_prob = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Bounds { index: t, size: vocab });
            }
            gold_prob.push(pv.data()[r * vocab + t]);
        }
        Ok(DecoderOutput {
            logits,
            probs,
            gold_prob,
        })
    }

    /// Teacher-forced decoder execution over gold inputs (BOS-shifted),
    /// scoring the unshifted `targets`. With `detach` the pass runs on
    /// untracked copies of θ and of the memory.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_gold(
        &mut self,
        memory: Var,
        inputs: &[usize],
        targets: &[usize],
        src_pad: &[bool],
        batch: usize,
        dropout: &mut DropoutMode,
        detach: bool,
    ) -> Result<DecoderOutput<T>> {
        if inputs.len() != targets.len() || !inputs.len().is_multiple_of(batch) {
            return Err(Error::contract(format!(
                "decoder inputs ({}) and targets ({}) differ in length",
                inputs.len(),
                targets.len()
            )));
        }
        let len = inputs.len() / batch;
        let (embeddings, memory) = if detach {
            let table = self.frozen().var(self.model.layout().tgt_embed);
            let e = self.tape.embedding(table, inputs, &[batch, len])?;
            (e, self.tape.detach(memory))
        } else {
            (self.embed_target(inputs, batch, len)?, memory)
        };
        let logits = self.decode_embedded(embeddings, memory, src_pad, dropout, detach)?;
        self.finish(logits, targets)
    }

    /// First pass: plain teacher forcing on the batch's gold prefix.
    pub fn decode_pass1(
        &mut self,
        memory: Var,
        batch: &Batch,
        dropout: &mut DropoutMode,
        detach: bool,
    ) -> Result<DecoderOutput<T>> {
        self.decode_gold(
            memory,
            &batch.tgt_in,
            &batch.tgt_out,
            &batch.src_pad,
            batch.size,
            dropout,
            detach,
        )
    }

    /// Second pass over mixed inputs, sharing θ with the first pass.
    pub fn decode_pass2(
        &mut self,
        memory: Var,
        mixed: &MixedInput,
        batch: &Batch,
        dropout: &mut DropoutMode,
    ) -> Result<DecoderOutput<T>> {
        let s = self.tape.shape(mixed.embeddings);
        if s[0] != batch.size || s[1] != batch.tgt_len {
            return Err(Error::contract(format!(
                "mixed input shape {s:?} does not match batch [{}, {}]",
                batch.size, batch.tgt_len
            )));
        }
        let logits = self.decode_embedded(mixed.embeddings, memory, &batch.src_pad, dropout, false)?;
        self.finish(logits, &batch.tgt_out)
    }

    /// Probability-weighted sum of target embeddings: `probs · E`.
    pub fn soft_prediction_embeddings(&mut self, probs: Var) -> Result<Var> {
        let table = self.params.var(self.model.layout().tgt_embed);
        self.tape.matmul(probs, table)
    }
}
