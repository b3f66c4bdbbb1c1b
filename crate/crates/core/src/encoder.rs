//! Hashing tokenizer, sentence-pair sequences and the toy pair encoder.
//!
//! The encoder is a stand-in for a pretrained transformer: token and segment
//! embeddings are mean-pooled over the sequence and passed through two
//! affine layers with a sigmoid between them. It is small enough to train
//! in seconds and exposes the same contract as a real backbone, a single
//! representation `h` of the joint `[CLS] A [SEP] B [SEP]` sequence.

use serde::{Deserialize, Serialize};

use crate::numerics::{
    constant_init, fan_in_uniform_init, xavier_uniform_init, Graph, ParamGroupTag, ParamId, ParamStore, Var,
};
use crate::rng::{mix64, StreamRng};
use crate::{Error, Result, Scalar};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const N_SPECIAL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    /// Sizes of the backbones the method was designed around.
    fn default() -> Self {
        Self {
            vocab_size: 21_128,
            hidden_size: 768,
            max_len: 512,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale preset: small enough to train a full campaign on one core.
    pub fn desk() -> Self {
        Self {
            vocab_size: 8192,
            hidden_size: 32,
            max_len: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1 {
            return Err(Error::invalid("hidden size must be >= 1"));
        }
        if self.max_len < 8 {
            return Err(Error::invalid(format!("max_len {} < 8", self.max_len)));
        }
        if self.vocab_size <= N_SPECIAL {
            return Err(Error::invalid(format!("vocabulary of {} leaves no room for text", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }
}

/// Codepoint-level hashing tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Tokenizer {
    /// One id per Unicode scalar: `mix64(codepoint) mod (vocab - 3) + 3`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let span = (self.vocab_size - N_SPECIAL) as u64;
        text.chars()
            .map(|c| (mix64(c as u64) % span) as usize + N_SPECIAL)
            .collect()
    }

    pub fn pair(&self, a: &str, b: &str) -> TokenSequence {
        build_pair_sequence(&self.tokenize(a), &self.tokenize(b), self.max_len)
    }

    pub fn single(&self, text: &str) -> TokenSequence {
        TokenSequence::single(&self.tokenize(text), self.max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
}

/// Assembles `[CLS] a [SEP] b [SEP]`, trimming longest-first until it fits
/// in `max_len`. On equal lengths the last token of `b` goes first.
pub fn build_pair_sequence(a: &[usize], b: &[usize], max_len: usize) -> TokenSequence {
    let (mut na, mut nb) = (a.len(), b.len());
    while 3 + na + nb > max_len {
        if na > nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(3 + na + nb);
    ids.push(CLS_ID);
    ids.extend_from_slice(&a[..na]);
    ids.push(SEP_ID);
    let first = ids.len();
    ids.extend_from_slice(&b[..nb]);
    ids.push(SEP_ID);
    let mut segments = vec![0; first];
    segments.resize(ids.len(), 1);
    TokenSequence { ids, segments }
}

impl TokenSequence {
    /// `[CLS] text [SEP]` in segment 0, used for separate single-text
    /// encodings.
    pub fn single(text: &[usize], max_len: usize) -> Self {
        let n = text.len().min(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(n + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(&text[..n]);
        ids.push(SEP_ID);
        let segments = vec![0; ids.len()];
        Self { ids, segments }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content (non-special) tokens in segments 0 and 1.
    pub fn content_lengths(&self) -> (usize, usize) {
        let mut counts = (0, 0);
        for (&id, &seg) in self.ids.iter().zip(&self.segments) {
            if id >= N_SPECIAL {
                if seg == 0 {
                    counts.0 += 1;
                } else {
                    counts.1 += 1;
                }
            }
        }
        counts
    }
}

/// Handles to the encoder's tensors inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub output_weight: ParamId,
    pub output_bias: ParamId,
}

const NAMES: [&str; 6] = [
    "encoder.token_embedding",
    "encoder.segment_embedding",
    "encoder.hidden.weight",
    "encoder.hidden.bias",
    "encoder.output.weight",
    "encoder.output.bias",
];

impl Encoder {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden_size);
        let mut rng = StreamRng::new(seed);
        let g = ParamGroupTag::Encoder;
        let token_embedding = store.add(NAMES[0], g, fan_in_uniform_init(v, d, rng.next_u64())?)?;
        let segment_embedding = store.add(NAMES[1], g, fan_in_uniform_init(2, d, rng.next_u64())?)?;
        let hidden_weight = store.add(NAMES[2], g, xavier_uniform_init(d, d, 1.0, rng.next_u64())?)?;
        let hidden_bias = store.add(NAMES[3], g, constant_init(vec![d], 0.0))?;
        let output_weight = store.add(NAMES[4], g, xavier_uniform_init(d, d, 1.0, rng.next_u64())?)?;
        let output_bias = store.add(NAMES[5], g, constant_init(vec![d], 0.0))?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            segment_embedding,
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        })
    }

    /// Re-binds to encoder tensors already present in `store`.
    pub fn attach<T: Scalar>(store: &ParamStore<T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let ids = NAMES.map(|n| store.require(n));
        let [a, b, c, d, e, f] = ids;
        let enc = Self {
            config: config.clone(),
            token_embedding: a?,
            segment_embedding: b?,
            hidden_weight: c?,
            hidden_bias: d?,
            output_weight: e?,
            output_bias: f?,
        };
        let (v, h) = (config.vocab_size, config.hidden_size);
        if store.get(enc.token_embedding).shape() != [v, h] || store.get(enc.output_bias).shape() != [h] {
            return Err(Error::invalid("encoder tensors do not match the configuration"));
        }
        Ok(enc)
    }

    /// Encodes one sequence to `h` (length `hidden_size`). Dropout on the
    /// hidden layer is applied only when `dropout_rng` is given.
    pub fn encode<T: Scalar>(
        &self,
        graph: &mut Graph<'_, T>,
        seq: &TokenSequence,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let tok = graph.param(self.token_embedding);
        let seg = graph.param(self.segment_embedding);
        let pooled_tok = graph.embed_mean(tok, &seq.ids)?;
        let pooled_seg = graph.embed_mean(seg, &seq.segments)?;
        let pooled = graph.add(pooled_tok, pooled_seg)?;

        let w1 = graph.param(self.hidden_weight);
        let b1 = graph.param(self.hidden_bias);
        let pre = graph.affine(w1, pooled, b1)?;
        let mut hidden = graph.sigmoid(pre);
        if let Some(rng) = dropout_rng {
            hidden = graph.dropout(hidden, T::lit(self.config.dropout), rng)?;
        }
        let w2 = graph.param(self.output_weight);
        let b2 = graph.param(self.output_bias);
        graph.affine(w2, hidden, b2)
    }
}
