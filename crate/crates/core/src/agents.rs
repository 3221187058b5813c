//! Sender, Receiver and the rotation-prediction head.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;

use crate::channel::{gumbel_st_sample, gumbel_st_with_noise, ChannelParams, Message, MessageBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Init, Linear, LstmCell, LstmState, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentDims {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub score_dim: usize,
    pub max_len: usize,
}

impl Default for AgentDims {
    fn default() -> Self {
        AgentDims {
            feature_dim: 4096,
            embed_dim: 64,
            hidden_dim: 128,
            score_dim: 128,
            max_len: 5,
        }
    }
}

/// Recurrent token generator whose initial hidden state is the
/// batch-normalized projection of the visual features.
#[derive(Debug, Clone)]
pub struct Sender {
    vocab: Vocabulary,
    max_len: usize,
    /// `[V + 1, embed]`; the last row is the start-of-sequence embedding.
    embedding: Var,
    projection: Linear,
    norm: BatchNorm1d,
    cell: LstmCell,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct SenderOutput {
    pub messages: MessageBatch,
    /// `[batch, hidden]` batch-normalized visual state fed to the LSTM.
    pub visual_state: Tensor,
    /// Per-step `[batch, V]` logits.
    pub logits: Vec<Tensor>,
}

impl Sender {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: Vocabulary, dims: AgentDims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Sender {
            vocab,
            max_len: dims.max_len,
            embedding: store.param(
                format!("{prefix}embedding"),
                &[vocab.size() + 1, dims.embed_dim],
                Init::Normal(1.0),
                rng,
            )?,
            projection: Linear::new(store, &format!("{prefix}projection"), dims.feature_dim, dims.hidden_dim, rng)?,
            norm: BatchNorm1d::new(store, &format!("{prefix}norm"), dims.hidden_dim, rng)?,
            cell: LstmCell::new(store, &format!("{prefix}lstm"), dims.embed_dim, dims.hidden_dim, rng)?,
            head: Linear::new(store, &format!("{prefix}head"), dims.hidden_dim, vocab.size(), rng)?,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn visual_state(&self, features: &Tensor, train: bool) -> Result<Tensor> {
        self.norm.forward_t(&self.projection.forward(features)?, train)
    }

    /// Generate `max_len` tokens per row of `features`, feeding each
    /// straight-through one-hot back in through the embedding table.
    pub fn generate(&self, features: &Tensor, channel: &ChannelParams, train: bool, rng: &mut impl Rng) -> Result<SenderOutput> {
        self.unroll(features, train, |logits| {
            let sample = gumbel_st_sample(logits, channel, rng)?;
            Ok((sample.one_hot, sample.indices))
        })
    }

    /// Like [`generate`](Self::generate) with caller-supplied Gumbel noise
    /// (one `[batch, V]` tensor per position), but the relaxed sample
    /// `softmax((logits + g) / τ)` is transmitted instead of the one-hot.
    /// Token ids and lengths still come from the hard argmax. Used for
    /// finite-difference checks, where the one-hot forward is piecewise
    /// constant.
    pub fn generate_relaxed(&self, features: &Tensor, noise: &[Tensor], temperature: f64, train: bool) -> Result<SenderOutput> {
        if noise.len() != self.max_len {
            return Err(Error::Shape(format!("{} noise tensors for {} positions", noise.len(), self.max_len)));
        }
        let mut pos = 0;
        self.unroll(features, train, |logits| {
            let sample = gumbel_st_with_noise(logits, &noise[pos], temperature)?;
            pos += 1;
            Ok((sample.relaxed, sample.indices))
        })
    }

    fn unroll(
        &self,
        features: &Tensor,
        train: bool,
        mut draw: impl FnMut(&Tensor) -> Result<(Tensor, Vec<usize>)>,
    ) -> Result<SenderOutput> {
        let batch = features.dim(0)?;
        let v = self.vocab.size();
        let h0 = self.visual_state(features, train)?;
        let mut state = LstmState {
            c: h0.zeros_like()?,
            h: h0.clone(),
        };
        let table = self.embedding.as_tensor();
        let token_table = table.narrow(0, 0, v)?;
        let mut input = table
            .narrow(0, self.vocab.sos_id(), 1)?
            .broadcast_as((batch, table.dim(1)?))?
            .contiguous()?;

        let mut steps = Vec::with_capacity(self.max_len);
        let mut logits_per_step = Vec::with_capacity(self.max_len);
        let mut ids = vec![Vec::with_capacity(self.max_len); batch];
        for _ in 0..self.max_len {
            state = self.cell.step(&input, &state)?;
            let logits = self.head.forward(&state.h)?;
            let (token, indices) = draw(&logits)?;
            for (row, idx) in ids.iter_mut().zip(&indices) {
                row.push(*idx);
            }
            input = token.matmul(&token_table)?;
            steps.push(token);
            logits_per_step.push(logits);
        }
        let messages = ids
            .into_iter()
            .map(|row| Message::from_ids(row, &self.vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(SenderOutput {
            messages: MessageBatch { steps, messages },
            visual_state: h0,
            logits: logits_per_step,
        })
    }
}

/// Recurrent message decoder that scores candidates by dot product in a
/// shared embedding space.
#[derive(Debug, Clone)]
pub struct Receiver {
    game_size: usize,
    embedding: Var,
    cell: LstmCell,
    norm: BatchNorm1d,
    message_projection: Linear,
    image_projection: Linear,
}

#[derive(Debug, Clone)]
pub struct ReceiverOutput {
    /// `[games, candidates]`
    pub scores: Tensor,
    /// `[games, hidden]` batch-normalized final hidden state.
    pub message_state: Tensor,
}

impl Receiver {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: Vocabulary,
        dims: AgentDims,
        game_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Receiver {
            game_size,
            embedding: store.param(format!("{prefix}embedding"), &[vocab.size(), dims.embed_dim], Init::Normal(1.0), rng)?,
            cell: LstmCell::new(store, &format!("{prefix}lstm"), dims.embed_dim, dims.hidden_dim, rng)?,
            norm: BatchNorm1d::new(store, &format!("{prefix}norm"), dims.hidden_dim, rng)?,
            message_projection: Linear::new(store, &format!("{prefix}message_projection"), dims.hidden_dim, dims.score_dim, rng)?,
            image_projection: Linear::new(store, &format!("{prefix}image_projection"), dims.feature_dim, dims.score_dim, rng)?,
        })
    }

    pub fn game_size(&self) -> usize {
        self.game_size
    }

    /// Run the LSTM over each message and keep the hidden state at the
    /// message's last transmitted position. Tokens after the first EoS are
    /// zeroed on input and never selected, so they cannot influence the
    /// result.
    pub fn read(&self, messages: &MessageBatch, train: bool) -> Result<Tensor> {
        let batch = messages.len();
        let first = messages
            .steps
            .first()
            .ok_or_else(|| Error::Shape("message with no positions".into()))?;
        let (device, dtype) = (first.device().clone(), first.dtype());
        let lengths = messages.lengths();
        let hidden = self.cell.hidden();
        let mut state = LstmState {
            h: Tensor::zeros((batch, hidden), dtype, &device)?,
            c: Tensor::zeros((batch, hidden), dtype, &device)?,
        };
        let mut selected: Option<Tensor> = None;
        for (pos, step) in messages.steps.iter().enumerate() {
            let alive: Vec<f32> = lengths.iter().map(|&l| (pos < l) as u8 as f32).collect();
            let alive = Tensor::from_vec(alive, (batch, 1), &device)?.to_dtype(dtype)?;
            let input = step.broadcast_mul(&alive)?.matmul(self.embedding.as_tensor())?;
            state = self.cell.step(&input, &state)?;
            let last: Vec<f32> = lengths.iter().map(|&l| (pos + 1 == l) as u8 as f32).collect();
            let last = Tensor::from_vec(last, (batch, 1), &device)?.to_dtype(dtype)?;
            let pick = state.h.broadcast_mul(&last)?;
            selected = Some(match selected {
                None => pick,
                Some(acc) => (acc + pick)?,
            });
        }
        let final_hidden = selected.expect("at least one position");
        self.norm.forward_t(&final_hidden, train)
    }

    /// Dot-product scores of every message against every candidate.
    pub fn score(&self, messages: &MessageBatch, candidate_features: &Tensor, train: bool) -> Result<ReceiverOutput> {
        let n = candidate_features.dim(0)?;
        if n != self.game_size {
            return Err(Error::Shape(format!(
                "receiver expects {} candidates, got {n}",
                self.game_size
            )));
        }
        let message_state = self.read(messages, train)?;
        let message_embedding = self.message_projection.forward(&message_state)?;
        let image_embedding = self.image_projection.forward(candidate_features)?;
        let scores = message_embedding.matmul(&image_embedding.t()?)?;
        Ok(ReceiverOutput {
            scores,
            message_state,
        })
    }
}

pub const ROTATION_CLASSES: usize = 4;
pub const ROTATION_HIDDEN: usize = 200;

/// Three linear layers (`in → 200 → 200 → 4`), batch-norm before each ReLU,
/// softmax on the output.
#[derive(Debug, Clone)]
pub struct RotationHead {
    layers: [Linear; 3],
    norms: [BatchNorm1d; 2],
}

impl RotationHead {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(RotationHead {
            layers: [
                Linear::new(store, &format!("{prefix}fc1"), input_dim, ROTATION_HIDDEN, rng)?,
                Linear::new(store, &format!("{prefix}fc2"), ROTATION_HIDDEN, ROTATION_HIDDEN, rng)?,
                Linear::new(store, &format!("{prefix}fc3"), ROTATION_HIDDEN, ROTATION_CLASSES, rng)?,
            ],
            norms: [
                BatchNorm1d::new(store, &format!("{prefix}bn1"), ROTATION_HIDDEN, rng)?,
                BatchNorm1d::new(store, &format!("{prefix}bn2"), ROTATION_HIDDEN, rng)?,
            ],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// `[batch, 4]` unnormalized log-probabilities.
    pub fn logits(&self, input: &Tensor, train: bool) -> Result<Tensor> {
        let d = input.dim(D::Minus1)?;
        if input.rank() != 2 || d != self.input_dim() {
            return Err(Error::Shape(format!(
                "rotation head expects [batch, {}], got {:?}",
                self.input_dim(),
                input.dims()
            )));
        }
        let mut x = input.clone();
        for (layer, norm) in self.layers[..2].iter().zip(&self.norms) {
            x = norm.forward_t(&layer.forward(&x)?, train)?.relu()?;
        }
        self.layers[2].forward(&x)
    }

    pub fn predict_rotation(&self, input: &Tensor, train: bool) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(input, train)?, D::Minus1)?)
    }
}

/// Indices of the highest probability per row (first index on ties).
pub fn argmax_rows(probabilities: &Tensor) -> Result<Vec<usize>> {
    let rows = probabilities.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use candle_core::Device;

    fn dims() -> AgentDims {
        AgentDims {
            feature_dim: 12,
            embed_dim: 6,
            hidden_dim: 8,
            score_dim: 7,
            max_len: 5,
        }
    }

    fn features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let v: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (n, d), &Device::Cpu).unwrap()
    }

    fn agents(game_size: usize) -> (ParamStore, Sender, Receiver) {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let vocab = Vocabulary::with_size(10).unwrap();
        let mut rng = seeded(0);
        let s = Sender::new(&mut store, "sender.", vocab, dims(), &mut rng).unwrap();
        let r = Receiver::new(&mut store, "receiver.", vocab, dims(), game_size, &mut rng).unwrap();
        (store, s, r)
    }

    #[test]
    fn generated_messages_satisfy_contract() {
        let (_, s, _) = agents(6);
        let out = s.generate(&features(6, 12, 1), &ChannelParams::default(), true, &mut seeded(2)).unwrap();
        assert_eq!(out.messages.len(), 6);
        assert_eq!(out.messages.max_len(), 5);
        for step in &out.messages.steps {
            for row in step.to_vec2::<f32>().unwrap() {
                assert_eq!(row.iter().sum::<f32>(), 1.0);
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            }
        }
        for m in &out.messages.messages {
            assert!((1..=5).contains(&m.effective_length()));
        }
        assert_eq!(out.visual_state.dims(), &[6, 8]);
    }

    #[test]
    fn generation_is_deterministic_given_stream() {
        let (_, s, _) = agents(4);
        let f = features(4, 12, 3);
        let a = s.generate(&f, &ChannelParams::default(), false, &mut seeded(9)).unwrap();
        let b = s.generate(&f, &ChannelParams::default(), false, &mut seeded(9)).unwrap();
        assert_eq!(a.messages.messages, b.messages.messages);
    }

    #[test]
    fn scores_have_game_shape_and_are_finite() {
        let (_, s, r) = agents(6);
        let msgs = s.generate(&features(3, 12, 1), &ChannelParams::default(), true, &mut seeded(2)).unwrap().messages;
        let out = r.score(&msgs, &features(6, 12, 4), true).unwrap();
        assert_eq!(out.scores.dims(), &[3, 6]);
        assert!(out.scores.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn candidate_count_mismatch_is_shape_error() {
        let (_, s, r) = agents(6);
        let msgs = s.generate(&features(2, 12, 1), &ChannelParams::default(), true, &mut seeded(2)).unwrap().messages;
        assert!(matches!(r.score(&msgs, &features(5, 12, 4), false), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicated_candidates_score_identically() {
        let (_, s, r) = agents(4);
        let msgs = s.generate(&features(2, 12, 1), &ChannelParams::default(), false, &mut seeded(2)).unwrap().messages;
        let f = features(3, 12, 5);
        let cands = Tensor::cat(&[&f, &f.narrow(0, 1, 1).unwrap()], 0).unwrap();
        let scores = r.score(&msgs, &cands, false).unwrap().scores.to_vec2::<f32>().unwrap();
        for row in scores {
            assert_eq!(row[1], row[3]);
        }
    }

    #[test]
    fn candidate_permutation_permutes_scores() {
        let (_, s, r) = agents(5);
        let msgs = s.generate(&features(3, 12, 1), &ChannelParams::default(), false, &mut seeded(2)).unwrap().messages;
        let f = features(5, 12, 6);
        let perm = [4u32, 2, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let base = r.score(&msgs, &f, false).unwrap().scores.to_vec2::<f32>().unwrap();
        let permuted = r.score(&msgs, &f.index_select(&idx, 0).unwrap(), false).unwrap().scores.to_vec2::<f32>().unwrap();
        for (b, p) in base.iter().zip(&permuted) {
            for (j, &src) in perm.iter().enumerate() {
                assert!((p[j] - b[src as usize]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn post_eos_rows_do_not_reach_the_receiver() {
        let (_, _, r) = agents(4);
        let vocab = Vocabulary::with_size(10).unwrap();
        let msgs = MessageBatch::from_messages(
            vec![
                Message::from_ids(vec![3, 0, 7, 8, 9], &vocab).unwrap(),
                Message::from_ids(vec![5, 6, 0, 1, 2], &vocab).unwrap(),
            ],
            &Device::Cpu,
            DType::F32,
        )
        .unwrap();
        let altered = msgs
            .with_raw_ids(vec![vec![3, 0, 1, 1, 1], vec![5, 6, 0, 9, 0]], &vocab)
            .unwrap();
        let f = features(4, 12, 7);
        let a = r.score(&msgs, &f, false).unwrap().scores.to_vec2::<f32>().unwrap();
        let b = r.score(&altered, &f, false).unwrap().scores.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_head_outputs_simplex() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let head = RotationHead::new(&mut store, "rot.", 8, &mut seeded(0)).unwrap();
        for train in [true, false] {
            let p = head.predict_rotation(&features(5, 8, 1), train).unwrap().to_vec2::<f32>().unwrap();
            for row in p {
                assert_eq!(row.len(), 4);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(matches!(head.predict_rotation(&features(5, 7, 1), false), Err(Error::Shape(_))));
        assert_eq!(store.count("rot."), 8 * 200 + 200 + 200 * 200 + 200 + 200 * 4 + 4 + 4 * 200);
    }

    #[test]
    fn untrained_rotation_head_is_at_chance() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let head = RotationHead::new(&mut store, "rot.", 8, &mut seeded(1)).unwrap();
        let n = 10_000;
        let inputs = features(n, 8, 2);
        // Balanced labels, independent of the inputs.
        let mut rng = seeded(3);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        let pred = argmax_rows(&head.predict_rotation(&inputs, false).unwrap()).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!((acc - 0.25).abs() <= 0.02, "accuracy {acc}");
    }
    #[test]
    fn untrained_sender_uses_many_tokens() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let vocab = Vocabulary::with_size(100).unwrap();
        let d = AgentDims {
            feature_dim: 32,
            ..AgentDims::default()
        };
        let s = Sender::new(&mut store, "sender.", vocab, d, &mut seeded(0)).unwrap();
        let mut counts = vec![0usize; 100];
        let mut rng = seeded(1);
        for chunk in 0..10 {
            let f = features(1000, 32, 100 + chunk);
            let out = s.generate(&f, &ChannelParams::default(), true, &mut rng).unwrap();
            for m in &out.messages.messages {
                for &t in m.transmitted_ids() {
                    counts[t] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let entropy: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        assert!(entropy > 4.0, "unigram entropy {entropy}");
    }

    #[test]
    fn game_loss_gradient_matches_finite_differences() {
        // 4 images, V = 5, L_max = 2, in f64 through the relaxed path.
        let dev = Device::Cpu;
        let mut store = ParamStore::new(dev.clone(), DType::F64);
        let vocab = Vocabulary::with_size(5).unwrap();
        let d = AgentDims {
            feature_dim: 6,
            embed_dim: 4,
            hidden_dim: 5,
            score_dim: 3,
            max_len: 2,
        };
        let mut rng = seeded(11);
        let s = Sender::new(&mut store, "sender.", vocab, d, &mut rng).unwrap();
        let r = Receiver::new(&mut store, "receiver.", vocab, d, 4, &mut rng).unwrap();
        let f = features(4, 6, 12).to_dtype(DType::F64).unwrap();
        let noise: Vec<Tensor> = (0..2)
            .map(|_| crate::channel::sample_gumbel_tensor(&[4, 5], DType::F64, &dev, &mut rng).unwrap())
            .collect();
        let targets = [0usize, 1, 2, 3];
        let loss = |store_train: bool| -> Tensor {
            let out = s.generate_relaxed(&f, &noise, 1.0, store_train).unwrap();
            let scores = r.score(&out.messages, &f, store_train).unwrap().scores;
            crate::objectives::hinge_loss(&scores, &targets, 1.0).unwrap()
        };
        // Evaluation mode keeps batch-norm running statistics fixed between evaluations.
        let grads = loss(false).backward().unwrap();
        for name in ["sender.head.weight", "sender.head.bias"] {
            let var = store.get(name).unwrap().clone();
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-6;
            for i in 0..base.len() {
                let bump = |delta: f64| -> f64 {
                    let mut p = base.clone();
                    p[i] += delta;
                    var.set(&Tensor::from_vec(p, var.dims(), &dev).unwrap()).unwrap();
                    loss(false).to_scalar::<f64>().unwrap()
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &dev).unwrap()).unwrap();
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[i] - numeric).abs() / scale < 1e-3,
                    "{name}[{i}]: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }
}
