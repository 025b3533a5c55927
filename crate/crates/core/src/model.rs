//! Code and query encoders with their momentum copies.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::{init_momentum, Encoder, EncoderConfig, MomentumEncoder, TokenBatch};
use crate::error::Result;
use crate::tensor::{l2_normalize_rows, Float, ParamSet};

/// Maximum encoded lengths, `[CLS]` and `[SEP]` included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLimits {
    pub code_max_len: usize,
    pub query_max_len: usize,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self {
            code_max_len: 128,
            query_max_len: 256,
        }
    }
}

impl InputLimits {
    pub fn longest(&self) -> usize {
        self.code_max_len.max(self.query_max_len)
    }
}

/// With `share_code_query` one encoder (and one momentum encoder) serves both
/// modalities and the query slots stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoder<T> {
    pub code: Encoder<T>,
    pub query: Option<Encoder<T>>,
    pub code_momentum: MomentumEncoder<T>,
    pub query_momentum: Option<MomentumEncoder<T>>,
}

impl<T: Float> BiEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let code = Encoder::new(config.clone(), rng)?;
        let query = if config.share_code_query {
            None
        } else {
            Some(Encoder::new(config, rng)?)
        };
        Ok(Self::from_live(code, query))
    }

    /// Momentum encoders start as copies of the live ones.
    pub fn from_live(code: Encoder<T>, query: Option<Encoder<T>>) -> Self {
        let code_momentum = init_momentum(&code);
        let query_momentum = query.as_ref().map(init_momentum);
        Self {
            code,
            query,
            code_momentum,
            query_momentum,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.code.config()
    }

    pub fn is_shared(&self) -> bool {
        self.query.is_none()
    }

    pub fn query_encoder(&self) -> &Encoder<T> {
        self.query.as_ref().unwrap_or(&self.code)
    }

    pub fn query_momentum_encoder(&self) -> &MomentumEncoder<T> {
        self.query_momentum.as_ref().unwrap_or(&self.code_momentum)
    }

    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        self.code_momentum.momentum_update(&self.code, m)?;
        if let (Some(mom), Some(live)) = (self.query_momentum.as_mut(), self.query.as_ref()) {
            mom.momentum_update(live, m)?;
        }
        Ok(())
    }

    /// Live parameter sets, code first.
    pub fn live_params(&self) -> Vec<&ParamSet<T>> {
        let mut v = vec![self.code.params()];
        if let Some(q) = &self.query {
            v.push(q.params());
        }
        v
    }

    pub fn cast<U: Float>(&self) -> BiEncoder<U> {
        BiEncoder {
            code: self.code.cast(),
            query: self.query.as_ref().map(Encoder::cast),
            code_momentum: MomentumEncoder::from_params(self.config().clone(), self.code_momentum.params().cast())
                .expect("congruent"),
            query_momentum: self
                .query_momentum
                .as_ref()
                .map(|m| MomentumEncoder::from_params(self.config().clone(), m.params().cast()).expect("congruent")),
        }
    }

    /// Unit-length eval-mode code representations.
    pub fn embed_code_tokens<V: AsRef<[S]>, S: AsRef<str>>(
        &self,
        code: &[V],
        vocab: &Vocabulary,
        limits: InputLimits,
    ) -> Result<Array2<T>> {
        embed_in_chunks(&self.code, code, vocab, limits.code_max_len)
    }

    /// Unit-length eval-mode query representations.
    pub fn embed_query_tokens<V: AsRef<[S]>, S: AsRef<str>>(
        &self,
        queries: &[V],
        vocab: &Vocabulary,
        limits: InputLimits,
    ) -> Result<Array2<T>> {
        embed_in_chunks(self.query_encoder(), queries, vocab, limits.query_max_len)
    }
}

const EMBED_CHUNK: usize = 64;

fn embed_in_chunks<T: Float, V: AsRef<[S]>, S: AsRef<str>>(
    encoder: &Encoder<T>,
    sequences: &[V],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Array2<T>> {
    let d = encoder.config().hidden_dim;
    let mut out = Array2::<T>::zeros((sequences.len(), d));
    for (chunk_idx, chunk) in sequences.chunks(EMBED_CHUNK).enumerate() {
        let batch = TokenBatch::encode(chunk, vocab, max_len);
        let (reps, _) = l2_normalize_rows(&encoder.encode(&batch)?.view())?;
        let start = chunk_idx * EMBED_CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&reps);
    }
    Ok(out)
}
