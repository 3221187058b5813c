//! The discrete message channel: Gumbel noise, the Straight-Through
//! Gumbel-Softmax sampler, and variable-length message semantics.

use candle_core::{CpuStorage, DType, Device, Layout, Shape, Tensor, D};
use rand::Rng;

use crate::error::{Error, Result};

/// Clamp applied to uniforms before the double log.
pub const GUMBEL_EPS: f64 = 1e-10;

/// Token inventory. The end-of-sequence token is part of the vocabulary; the
/// start-of-sequence symbol is only an extra embedding row on the Sender side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    eos_id: usize,
}

impl Vocabulary {
    pub const DEFAULT_EOS: usize = 0;

    pub fn new(size: usize, eos_id: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary needs at least 2 tokens, got {size}")));
        }
        if eos_id >= size {
            return Err(Error::Config(format!("eos id {eos_id} outside vocabulary of {size}")));
        }
        Ok(Vocabulary { size, eos_id })
    }

    pub fn with_size(size: usize) -> Result<Self> {
        Self::new(size, Self::DEFAULT_EOS)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    /// Embedding row used to seed generation; never transmitted.
    pub fn sos_id(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub temperature: f64,
    /// Decode with `argmax(logits)` instead of sampling (analysis only).
    pub greedy: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            temperature: 1.0,
            greedy: false,
        }
    }
}

impl ChannelParams {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ChannelParams {
            temperature,
            greedy: false,
        })
    }
}

/// `-log(-log(u))` with `u` clamped to `[eps, 1 - eps]`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// `n` i.i.d. standard Gumbel draws.
pub fn sample_gumbel(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.random())).collect()
}

pub fn sample_gumbel_tensor(dims: &[usize], dtype: DType, device: &Device, rng: &mut impl Rng) -> Result<Tensor> {
    let n = dims.iter().product();
    Ok(Tensor::from_vec(sample_gumbel(n, rng), dims, device)?.to_dtype(dtype)?)
}

/// Forward: one-hot rows at fixed indices. Backward: identity, so the
/// gradient of the relaxed sample passes straight through.
struct StraightThrough {
    indices: Vec<usize>,
}

impl candle_core::CustomOp1 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through-one-hot"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = layout.shape().clone();
        let width = *shape.dims().last().unwrap_or(&1);
        let n = shape.elem_count();
        if self.indices.len() * width != n {
            candle_core::bail!("straight-through: {} indices for shape {shape:?}", self.indices.len());
        }
        let hot = (0..n).map(|i| self.indices[i / width] == i % width);
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(hot.map(|b| b as u8 as f32).collect()),
            CpuStorage::F64(_) => CpuStorage::F64(hot.map(|b| b as u8 as f64).collect()),
            _ => candle_core::bail!("straight-through: only f32/f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.clone()))
    }
}

/// A batch of token draws.
#[derive(Debug, Clone)]
pub struct TokenSample {
    /// `[batch, V]`, exactly one-hot in value, relaxed in gradient.
    pub one_hot: Tensor,
    /// `[batch, V]` relaxed sample `softmax((logits + g) / τ)`.
    pub relaxed: Tensor,
    pub indices: Vec<usize>,
}

/// `softmax((logits + gumbel) / τ)` along the last axis.
pub fn relaxed_sample(logits: &Tensor, gumbel: &Tensor, temperature: f64) -> Result<Tensor> {
    let z = ((logits + gumbel)? / temperature)?;
    Ok(candle_nn::ops::softmax(&z, D::Minus1)?)
}

fn argmax_rows(values: &[Vec<f64>]) -> Vec<usize> {
    values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Straight-Through Gumbel-Softmax with caller-supplied noise.
pub fn gumbel_st_with_noise(logits: &Tensor, gumbel: &Tensor, temperature: f64) -> Result<TokenSample> {
    let host = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if host.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits reached the channel".into()));
    }
    let noise = gumbel.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let perturbed: Vec<Vec<f64>> = host
        .iter()
        .zip(&noise)
        .map(|(l, g)| l.iter().zip(g).map(|(a, b)| a + b).collect())
        .collect();
    let indices = argmax_rows(&perturbed);
    let relaxed = relaxed_sample(logits, gumbel, temperature)?;
    let one_hot = relaxed.apply_op1(StraightThrough {
        indices: indices.clone(),
    })?;
    Ok(TokenSample {
        one_hot,
        relaxed,
        indices,
    })
}

/// Sample one token per row of `[batch, V]` logits.
///
/// The forward value is `one_hot(argmax(logits + g))`; the backward pass uses
/// the Jacobian of `softmax((logits + g) / τ)`. With `params.greedy` the noise
/// is zero, i.e. plain argmax decoding.
pub fn gumbel_st_sample(logits: &Tensor, params: &ChannelParams, rng: &mut impl Rng) -> Result<TokenSample> {
    let gumbel = if params.greedy {
        logits.zeros_like()?
    } else {
        sample_gumbel_tensor(logits.dims(), logits.dtype(), logits.device(), rng)?
    };
    gumbel_st_with_noise(logits, &gumbel, params.temperature)
}

/// A finalized message: the sampled token ids (always `max_len` of them) and
/// the effective length up to and including the first end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    token_ids: Vec<usize>,
    effective_length: usize,
    vocab_size: usize,
}

/// `index of first EoS + 1`, or the full length when no EoS was emitted.
pub fn effective_length(token_ids: &[usize], eos_id: usize) -> usize {
    token_ids
        .iter()
        .position(|&t| t == eos_id)
        .map_or(token_ids.len(), |p| p + 1)
}

impl Message {
    pub fn from_ids(token_ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Contract("a message has at least one position".into()));
        }
        if let Some(t) = token_ids.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::Contract(format!("token {t} outside vocabulary of {}", vocab.size())));
        }
        Ok(Message {
            effective_length: effective_length(&token_ids, vocab.eos_id()),
            token_ids,
            vocab_size: vocab.size(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn effective_length(&self) -> usize {
        self.effective_length
    }

    /// All sampled ids, including masked post-EoS positions.
    pub fn raw_ids(&self) -> &[usize] {
        &self.token_ids
    }

    /// The ids the Receiver actually consumes.
    pub fn transmitted_ids(&self) -> &[usize] {
        &self.token_ids[..self.effective_length]
    }

    /// `[max_len][V]` one-hot rows, unmasked.
    pub fn one_hot(&self) -> Vec<Vec<f32>> {
        self.token_ids
            .iter()
            .map(|&t| (0..self.vocab_size).map(|v| if v == t { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    /// One-hot rows with every position after the first EoS zeroed.
    pub fn masked_one_hot(&self) -> Vec<Vec<f32>> {
        let mut rows = self.one_hot();
        for row in rows.iter_mut().skip(self.effective_length) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        rows
    }
}

/// Validate `[max_len][V]` one-hot rows and compute the message semantics.
pub fn finalize_message(raw_tokens: &[Vec<f32>], vocab: &Vocabulary) -> Result<Message> {
    let mut ids = Vec::with_capacity(raw_tokens.len());
    for (pos, row) in raw_tokens.iter().enumerate() {
        if row.len() != vocab.size() {
            return Err(Error::Contract(format!(
                "row {pos} has width {}, vocabulary has {}",
                row.len(),
                vocab.size()
            )));
        }
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones.len() != 1 || zeros != row.len() - 1 {
            return Err(Error::Contract(format!("row {pos} is not one-hot")));
        }
        ids.push(ones[0]);
    }
    Message::from_ids(ids, vocab)
}

pub fn mean_message_length(messages: &[Message]) -> Result<f64> {
    if messages.is_empty() {
        return Err(Error::Domain("mean length of an empty message collection".into()));
    }
    Ok(messages.iter().map(|m| m.effective_length as f64).sum::<f64>() / messages.len() as f64)
}

/// A batch of messages as produced by the Sender.
#[derive(Debug, Clone)]
pub struct MessageBatch {
    /// `max_len` tensors of shape `[batch, V]`, straight-through one-hot.
    pub steps: Vec<Tensor>,
    pub messages: Vec<Message>,
}

impl MessageBatch {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.steps.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.messages.iter().map(Message::effective_length).collect()
    }

    /// Build a batch from finalized messages (no gradient path), e.g. to
    /// replay logged messages through a Receiver.
    pub fn from_messages(messages: Vec<Message>, device: &Device, dtype: DType) -> Result<Self> {
        let first = messages
            .first()
            .ok_or_else(|| Error::Domain("empty message batch".into()))?;
        let (len, vocab) = (first.max_len(), first.vocab_size);
        if messages.iter().any(|m| m.max_len() != len || m.vocab_size != vocab) {
            return Err(Error::Shape("messages in a batch must share length and vocabulary".into()));
        }
        let steps = (0..len)
            .map(|pos| {
                let flat: Vec<f32> = messages
                    .iter()
                    .flat_map(|m| (0..vocab).map(move |v| if m.token_ids[pos] == v { 1.0 } else { 0.0 }))
                    .collect();
                Ok(Tensor::from_vec(flat, (messages.len(), vocab), device)?.to_dtype(dtype)?)
            })
            .collect::<Result<_>>()?;
        Ok(MessageBatch { steps, messages })
    }

    /// Same messages with the raw post-EoS rows replaced. Used to probe
    /// masking; the result never reaches training.
    pub fn with_raw_ids(&self, raw: Vec<Vec<usize>>, vocab: &Vocabulary) -> Result<Self> {
        let messages = raw
            .into_iter()
            .map(|ids| Message::from_ids(ids, vocab))
            .collect::<Result<Vec<_>>>()?;
        let device = self.steps[0].device().clone();
        Self::from_messages(messages, &device, self.steps[0].dtype())
    }
}
