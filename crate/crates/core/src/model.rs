//! Transformer encoder, one-layer decoder, and the two decoding variants.
//!
//! All weights live in one flat, ordered list of named tensors
//! ([`ModelParams`]); a forward pass first binds them onto a [`Tape`]
//! ([`ModelParams::bind`]) and then builds the graph from the bound
//! variables.
//!
//! Layers are post-norm: `x = LN(q + Attn(q, kv)); x = LN(x + FFN(x))` with a
//! GELU feed-forward. For the encoder and the basic decoder `q` and `kv` are
//! the same sequence. For the enhanced decoder `q` is the query stream
//! `H1[i] = h + p_i` and `kv` is the context stream
//! `H2 = [h, e(x_1) + p_1, ..., e(x_N) + p_N]`, so the residual attaches to
//! the query stream. Scores are `Q·Kᵀ / √d_head` per head, so row `i` of the
//! attention matrix is position `i`'s distribution.
//!
//! The output head is tied: `logits = states · Eᵀ + b` with `E` the token
//! embedding table, shared by encoder and decoder. The position table is
//! shared as well. The sentence embedding is the final encoder state at the
//! `[CLS]` slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_sentence, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::masking::{AttnVisibility, MaskedInput};
use crate::parallel::Exec;
use crate::tape::{Tape, Var};
use crate::tensor::{l2_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Basic,
    #[default]
    Enhanced,
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Self::Basic),
            "enhanced" => Ok(Self::Enhanced),
            other => Err(Error::Config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dec_variant: DecoderVariant,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, n_encoder_layers: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_encoder_layers,
            d_ff: 4 * d_model,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            dec_variant: DecoderVariant::Enhanced,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_encoder_layers == 0 {
            return Err(Error::Config("need at least one encoder layer".into()));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for ordinary tokens",
                self.vocab_size
            )));
        }
        if self.max_len < 3 || self.d_ff == 0 {
            return Err(Error::Config("max_len must be >= 3 and d_ff > 0".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "ff_w1", "ff_b1",
    "ff_w2", "ff_b2", "ln2_gamma", "ln2_beta",
];

const TOKEN_EMB: usize = 0;
const POSITION_EMB: usize = 1;
const FIRST_LAYER: usize = 2;

fn layer_base(layer: usize) -> usize {
    FIRST_LAYER + layer * LAYER_FIELDS.len()
}

/// All learnable weights, in a fixed order.
///
/// Order: token embeddings `[V×d]`, position embeddings `[max_len×d]`, the
/// encoder layers, the decoder layer, then the output bias `[V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn layer_shapes(cfg: &ModelConfig) -> [Vec<usize>; 16] {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    [
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
        vec![d],
        vec![d],
    ]
}

/// Names and shapes of every parameter for `cfg`, in storage order.
pub fn param_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        (
            "token_embeddings".to_string(),
            vec![cfg.vocab_size, cfg.d_model],
        ),
        (
            "position_embeddings".to_string(),
            vec![cfg.max_len, cfg.d_model],
        ),
    ];
    let prefixes = (0..cfg.n_encoder_layers)
        .map(|l| format!("encoder.{l}"))
        .chain(std::iter::once("decoder".to_string()));
    for prefix in prefixes {
        for (field, shape) in LAYER_FIELDS.iter().zip(layer_shapes(cfg)) {
            out.push((format!("{prefix}.{field}"), shape));
        }
    }
    out.push(("lm_bias".to_string(), vec![cfg.vocab_size]));
    out
}

impl ModelParams {
    /// Gaussian weights (std `init_std`), zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_manifest(config) {
            let t = if name.ends_with("gamma") {
                Tensor::full(shape, 1.0)?
            } else if shape.len() == 1 {
                Tensor::zeros(shape)?
            } else {
                Tensor::randn(shape, config.init_std, rng)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Reassembles parameters from named tensors (checkpoint loading),
    /// checking names and shapes against `config`.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(config);
        if manifest.len() != named.len() {
            return Err(Error::Compatibility {
                field: "parameter count".into(),
                found: named.len().to_string(),
                expected: manifest.len().to_string(),
            });
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in manifest.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Compatibility {
                    field: name,
                    found: format!("{:?}", t.shape()),
                    expected: format!("{want_name} {want_shape:?}"),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::len).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Puts every tensor on the tape, tracked for gradient iff `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        ParamVars {
            vars,
            config: self.config.clone(),
        }
    }
}

/// Model parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    config: ModelConfig,
}

struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

impl ParamVars {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn token_embeddings(&self) -> Var {
        self.vars[TOKEN_EMB]
    }

    pub fn position_embeddings(&self) -> Var {
        self.vars[POSITION_EMB]
    }

    fn lm_bias(&self) -> Var {
        *self.vars.last().expect("lm bias is always present")
    }

    fn layer(&self, index: usize) -> LayerVars {
        let v = &self.vars[layer_base(index)..layer_base(index + 1)];
        LayerVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ln1_g: v[8],
            ln1_b: v[9],
            w1: v[10],
            b1: v[11],
            w2: v[12],
            b2: v[13],
            ln2_g: v[14],
            ln2_b: v[15],
        }
    }

    fn decoder_layer(&self) -> LayerVars {
        self.layer(self.config.n_encoder_layers)
    }

    /// Gradients from the tape's last backward pass, in parameter order.
    /// Parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

/// Attention outputs plus the per-head attention weights.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

fn attention(
    tape: &mut Tape,
    lp: &LayerVars,
    query_in: Var,
    kv_in: Var,
    mask: &Tensor,
    n_heads: usize,
) -> Result<Attended> {
    let q = tape.matmul(query_in, lp.wq)?;
    let q = tape.add_row(q, lp.bq)?;
    let k = tape.matmul(kv_in, lp.wk)?;
    let k = tape.add_row(k, lp.bk)?;
    let v = tape.matmul(kv_in, lp.wv)?;
    let v = tape.add_row(v, lp.bv)?;
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_masked(scores, mask)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let ctx = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(ctx, lp.wo)?;
    let output = tape.add_row(out, lp.bo)?;
    Ok(Attended { output, weights })
}

fn transformer_block(
    tape: &mut Tape,
    lp: &LayerVars,
    query_in: Var,
    kv_in: Var,
    mask: &Tensor,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let att = attention(tape, lp, query_in, kv_in, mask, n_heads)?;
    let x = tape.add(query_in, att.output)?;
    let x = tape.layer_norm(x, lp.ln1_g, lp.ln1_b)?;
    let f = tape.matmul(x, lp.w1)?;
    let f = tape.add_row(f, lp.b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, lp.w2)?;
    let f = tape.add_row(f, lp.b2)?;
    let y = tape.add(x, f)?;
    let y = tape.layer_norm(y, lp.ln2_g, lp.ln2_b)?;
    Ok((y, att.weights))
}

fn tied_logits(tape: &mut Tape, pv: &ParamVars, states: Var) -> Result<Var> {
    let logits = tape.matmul_bt(states, pv.token_embeddings())?;
    tape.add_row(logits, pv.lm_bias())
}

/// A sentence embedding inside a graph: a `1×d` node plus the length of the
/// sequence it was computed from.
#[derive(Debug, Clone, Copy)]
pub struct SentenceRepr {
    pub var: Var,
    pub source_len: usize,
}

/// Plain sentence embedding, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub source_len: usize,
}

pub struct EncoderOutput {
    pub embedding: SentenceRepr,
    /// `L×d` final hidden states.
    pub token_states: Var,
    /// `L×V` tied-head logits; `None` when not requested.
    pub mlm_logits: Option<Var>,
}

/// Runs the encoder over a (possibly masked) sequence.
///
/// With `with_logits` the MLM logits for every position are produced as
/// well; inference and contrastive paths skip them.
pub fn encode(
    tape: &mut Tape,
    pv: &ParamVars,
    masked: &MaskedInput,
    with_logits: bool,
) -> Result<EncoderOutput> {
    let cfg = pv.config();
    let l = masked.ids.len();
    if l > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence of length {l} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if l == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let tok = tape.gather(pv.token_embeddings(), &masked.ids)?;
    let pos = tape.slice_rows(pv.position_embeddings(), 0, l)?;
    let mut x = tape.add(tok, pos)?;
    let mask = Tensor::zeros(vec![l, l])?;
    for layer in 0..cfg.n_encoder_layers {
        let lp = pv.layer(layer);
        x = transformer_block(tape, &lp, x, x, &mask, cfg.n_heads)?.0;
    }
    let h = tape.slice_rows(x, 0, 1)?;
    let mlm_logits = if with_logits {
        Some(tied_logits(tape, pv, x)?)
    } else {
        None
    };
    Ok(EncoderOutput {
        embedding: SentenceRepr {
            var: h,
            source_len: l,
        },
        token_states: x,
        mlm_logits,
    })
}

/// `[h, e(x_1) + p_1, ..., e(x_N) + p_N]` for the given ids (index 0 is
/// replaced by `h`).
fn context_stream(tape: &mut Tape, pv: &ParamVars, h: Var, ids: &[usize]) -> Result<Var> {
    let n = ids.len() - 1;
    let tok = tape.gather(pv.token_embeddings(), &ids[1..])?;
    let pos = tape.slice_rows(pv.position_embeddings(), 1, n)?;
    let body = tape.add(tok, pos)?;
    tape.concat_rows(&[h, body])
}

fn check_len(pv: &ParamVars, l: usize) -> Result<()> {
    if l < 2 || l > pv.config().max_len {
        return Err(Error::Shape(format!(
            "decoder input of length {l} outside [2, {}]",
            pv.config().max_len
        )));
    }
    Ok(())
}

/// Basic decoding: one full self-attention layer over
/// `[h, e(x̃_1) + p_1, ...]` where `x̃` is the decoder-masked input.
/// Returns `(N+1)×V` logits.
pub fn decode_basic(
    tape: &mut Tape,
    pv: &ParamVars,
    h: SentenceRepr,
    dec_masked: &MaskedInput,
) -> Result<Var> {
    let l = dec_masked.ids.len();
    if l != h.source_len {
        return Err(Error::Contract(format!(
            "decoder input of length {l} for an embedding of a length-{} sentence",
            h.source_len
        )));
    }
    check_len(pv, l)?;
    let stream = context_stream(tape, pv, h.var, &dec_masked.ids)?;
    let mask = Tensor::zeros(vec![l, l])?;
    let lp = pv.decoder_layer();
    let (out, _) = transformer_block(tape, &lp, stream, stream, &mask, pv.config().n_heads)?;
    tied_logits(tape, pv, out)
}

pub struct EnhancedOutput {
    pub logits: Var,
    /// Per-head `(N+1)×(N+1)` attention weights.
    pub attention: Vec<Var>,
}

/// Builds the query stream `[h + p_0, ..., h + p_N]` and the context stream
/// `[h, e(x_1) + p_1, ..., e(x_N) + p_N]` for an unmasked sequence.
pub fn two_streams(
    tape: &mut Tape,
    pv: &ParamVars,
    h: SentenceRepr,
    seq: &TokenSequence,
) -> Result<(Var, Var)> {
    let l = seq.len();
    check_len(pv, l)?;
    let pos = tape.slice_rows(pv.position_embeddings(), 0, l)?;
    let query = tape.add_row(pos, h.var)?;
    let context = context_stream(tape, pv, h.var, seq.ids())?;
    Ok((query, context))
}

/// The decoder layer applied to explicit query/context streams under a
/// visibility matrix. Exposed so tests can tamper with single stream slots.
pub fn decode_streams(
    tape: &mut Tape,
    pv: &ParamVars,
    query: Var,
    context: Var,
    vis: &AttnVisibility,
) -> Result<EnhancedOutput> {
    let l = tape.value(query).rows();
    if vis.size() != l || tape.value(context).rows() != l {
        return Err(Error::Contract(format!(
            "visibility of side {} for streams of {} and {} rows",
            vis.size(),
            l,
            tape.value(context).rows()
        )));
    }
    let lp = pv.decoder_layer();
    let mask = vis.additive_mask();
    let (out, attention) = transformer_block(tape, &lp, query, context, &mask, pv.config().n_heads)?;
    let logits = tied_logits(tape, pv, out)?;
    Ok(EnhancedOutput { logits, attention })
}

/// Enhanced (two-stream) decoding of the unmasked sequence `seq`.
pub fn decode_enhanced(
    tape: &mut Tape,
    pv: &ParamVars,
    h: SentenceRepr,
    seq: &TokenSequence,
    vis: &AttnVisibility,
) -> Result<EnhancedOutput> {
    if vis.size() != seq.len() {
        return Err(Error::Contract(format!(
            "visibility of side {} for a sequence of length {}",
            vis.size(),
            seq.len()
        )));
    }
    if h.source_len != seq.len() {
        return Err(Error::Contract(format!(
            "embedding of a length-{} sentence decoded against length {}",
            h.source_len,
            seq.len()
        )));
    }
    let (query, context) = two_streams(tape, pv, h, seq)?;
    decode_streams(tape, pv, query, context, vis)
}

/// Encodes one unmasked sequence and returns its raw `[CLS]` embedding.
pub fn embed_sequence(params: &ModelParams, seq: &TokenSequence) -> Result<SentenceEmbedding> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let out = encode(&mut tape, &pv, &MaskedInput::unmasked(seq), false)?;
    Ok(SentenceEmbedding {
        vector: tape.value(out.embedding.var).data().to_vec(),
        source_len: seq.len(),
    })
}

/// Unit-normalised `[CLS]` embeddings of already tokenized sequences,
/// one row per sequence.
pub fn embed_sequences(params: &ModelParams, seqs: &[TokenSequence], exec: Exec) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::Contract("nothing to embed".into()));
    }
    let rows = exec.try_map(seqs.len(), |i| {
        let mut v = embed_sequence(params, &seqs[i])?.vector;
        let norm = l2_norm(&v);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "embedding {i} has norm {norm}"
            )));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    })?;
    Tensor::from_rows(&rows)
}

/// Tokenizes and embeds `texts`; rows are L2-normalised.
pub fn embed_sentences<S: AsRef<str> + Sync>(
    texts: &[S],
    params: &ModelParams,
    vocab: &Vocab,
    exec: Exec,
) -> Result<Tensor> {
    if texts.is_empty() {
        return Err(Error::Contract("nothing to embed".into()));
    }
    let max_len = params.config().max_len;
    let seqs: Vec<TokenSequence> = texts
        .iter()
        .map(|t| encode_sentence(t.as_ref(), vocab, max_len))
        .collect();
    embed_sequences(params, &seqs, exec)
}
