//! Dialog history encoding.
//!
//! Each seeker utterance `x_t` is paired with the recommender text that
//! preceded it, encoded as one string `y_{t-1} [SEP] x_t`, projected to the
//! shared embedding width and folded through an LSTM from a zero state.

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::Mention;

pub const SEPARATOR: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum ConversationError {
    #[error("text encoder {encoder} failed: {message}")]
    Encoder { encoder: String, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T, E = ConversationError> = std::result::Result<T, E>;

/// Sentence encoder plug-in. Implementations must return vectors of width
/// [`TextEncoder::dim`] for every input.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Seeded hashed bag-of-words: lowercase, split on whitespace, hash every
/// token into `dim` buckets, L2-normalize the counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEncoder {
    seed: u64,
    dim: usize,
}

/// Builds the deterministic stub encoder.
pub fn stub_encoder(seed: u64, d_text: usize) -> HashingEncoder {
    assert!(d_text > 0, "encoder width must be positive");
    HashingEncoder { seed, dim: d_text }
}

impl HashingEncoder {
    fn bucket(&self, token: &str) -> usize {
        // FNV-1a over seed bytes then token bytes, finished with a splitmix step
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        (h % self.dim as u64) as usize
    }
}

impl TextEncoder for HashingEncoder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            v[self.bucket(token)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Configuration selecting a text encoder under the `text_encoder` key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextEncoderSpec {
    Hashing { seed: u64, dim: usize },
}

impl TextEncoderSpec {
    pub fn build(&self) -> Box<dyn TextEncoder> {
        match *self {
            TextEncoderSpec::Hashing { seed, dim } => Box::new(stub_encoder(seed, dim)),
        }
    }
}

/// Linear map from encoder width to embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    weight: Array2<f64>,
}

impl Projection {
    pub fn new(weight: Array2<f64>) -> Self {
        Self { weight }
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Array2::eye(dim) }
    }

    /// Uniform on `[-s, s]` with `s = sqrt(6 / (d_in + d_out))`.
    pub fn seeded(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (6.0 / (d_in + d_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
        Self { weight: Array2::from_shape_fn((d_out, d_in), |_| dist.sample(&mut rng)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Array1<f64>> {
        if v.len() != self.input_dim() {
            return Err(ConversationError::Dimension(format!(
                "projection expects width {}, got {}",
                self.input_dim(),
                v.len()
            )));
        }
        Ok(self.weight.dot(&ArrayView1::from(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellActivation {
    Tanh,
    Linear,
}

impl CellActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            CellActivation::Tanh => x.tanh(),
            CellActivation::Linear => x,
        }
    }
}

/// Single-layer LSTM over per-position vectors, hidden width equal to input width.
///
/// Gate rows in `input_weight`, `hidden_weight` and `bias` are stacked as
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentAggregator {
    input_weight: Array2<f64>,
    hidden_weight: Array2<f64>,
    bias: Array1<f64>,
    activation: CellActivation,
    /// When set every gate is fixed at 1.
    gates_open: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RecurrentAggregator {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
        let m = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((4 * dim, dim), |_| dist.sample(rng));
        let input_weight = m(&mut rng);
        let hidden_weight = m(&mut rng);
        let mut bias = Array1::zeros(4 * dim);
        // forget-gate bias of 1
        bias.slice_mut(ndarray::s![dim..2 * dim]).fill(1.0);
        Self { input_weight, hidden_weight, bias, activation: CellActivation::Tanh, gates_open: false }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            input_weight: Array2::zeros((4 * dim, dim)),
            hidden_weight: Array2::zeros((4 * dim, dim)),
            bias: Array1::zeros(4 * dim),
            activation: CellActivation::Tanh,
            gates_open: false,
        }
    }

    /// Gates pinned open with linear cell input and output: the state is the
    /// running sum of the inputs.
    pub fn identity_accumulator(dim: usize) -> Self {
        let mut input_weight = Array2::zeros((4 * dim, dim));
        input_weight
            .slice_mut(ndarray::s![2 * dim..3 * dim, ..])
            .assign(&Array2::eye(dim));
        Self {
            input_weight,
            hidden_weight: Array2::zeros((4 * dim, dim)),
            bias: Array1::zeros(4 * dim),
            activation: CellActivation::Linear,
            gates_open: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.input_weight.ncols()
    }

    /// Folds the inputs from a zero state and returns the last hidden state.
    pub fn run<'a>(&self, inputs: impl IntoIterator<Item = ArrayView1<'a, f64>>) -> Result<Array1<f64>> {
        let d = self.dim();
        let mut h = Array1::<f64>::zeros(d);
        let mut c = Array1::<f64>::zeros(d);
        for x in inputs {
            if x.len() != d {
                return Err(ConversationError::Dimension(format!(
                    "aggregator width {d}, input width {}",
                    x.len()
                )));
            }
            let z = self.input_weight.dot(&x) + self.hidden_weight.dot(&h) + &self.bias;
            for k in 0..d {
                let (i, f, o) = if self.gates_open {
                    (1.0, 1.0, 1.0)
                } else {
                    (sigmoid(z[k]), sigmoid(z[d + k]), sigmoid(z[3 * d + k]))
                };
                let g = self.activation.apply(z[2 * d + k]);
                c[k] = f * c[k] + i * g;
                h[k] = o * self.activation.apply(c[k]);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<Mention>,
    pub turn_index: usize,
}

impl DialogTurn {
    pub fn new(speaker: Speaker, text: impl Into<String>, turn_index: usize) -> Self {
        Self { speaker, text: text.into(), mentions: Vec::new(), turn_index }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogHistory {
    pub turns: Vec<DialogTurn>,
}

impl DialogHistory {
    pub fn new(turns: Vec<DialogTurn>) -> Self {
        Self { turns }
    }

    /// Appends a turn numbered after the current last turn.
    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>, mentions: Vec<Mention>) -> &DialogTurn {
        let turn_index = self.turns.last().map_or(1, |t| t.turn_index + 1);
        self.turns.push(DialogTurn { speaker, text: text.into(), mentions, turn_index });
        self.turns.last().expect("just pushed")
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// `(y_prev, x_t)` per seeker turn. Consecutive recommender turns before a
    /// seeker turn are joined with a space; trailing recommender turns are
    /// held back and form no position.
    pub fn positions(&self) -> Vec<(String, &str)> {
        let mut out = Vec::new();
        let mut pending: Vec<&str> = Vec::new();
        for t in &self.turns {
            match t.speaker {
                Speaker::Recommender => pending.push(&t.text),
                Speaker::Seeker => {
                    out.push((pending.join(" "), t.text.as_str()));
                    pending.clear();
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(ConversationError::Contract("empty dialog history".into()));
        }
        for pair in self.turns.windows(2) {
            if pair[1].turn_index <= pair[0].turn_index {
                return Err(ConversationError::Contract(format!(
                    "turn indices must increase: {} then {}",
                    pair[0].turn_index, pair[1].turn_index
                )));
            }
        }
        if !self.turns.iter().any(|t| t.speaker == Speaker::Seeker) {
            return Err(ConversationError::Contract("history has no seeker utterance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationState {
    pub vector: Array1<f64>,
    pub turn_count: usize,
}

fn encode_checked(enc: &dyn TextEncoder, text: &str) -> Result<Vec<f64>> {
    let v = enc.encode(text)?;
    if v.len() != enc.dim() {
        return Err(ConversationError::Encoder {
            encoder: enc.name().to_string(),
            message: format!("returned width {} instead of {}", v.len(), enc.dim()),
        });
    }
    Ok(v)
}

/// The encoder input for one position.
pub fn pair_text(y_prev: &str, x_t: &str) -> String {
    if y_prev.is_empty() {
        format!("{SEPARATOR} {x_t}")
    } else {
        format!("{y_prev} {SEPARATOR} {x_t}")
    }
}

pub fn encode_turn_pair(y_prev: &str, x_t: &str, enc: &dyn TextEncoder, proj: &Projection) -> Result<Array1<f64>> {
    if x_t.trim().is_empty() {
        return Err(ConversationError::Contract("seeker utterance is empty".into()));
    }
    proj.apply(&encode_checked(enc, &pair_text(y_prev, x_t))?)
}

pub fn encode_history(
    c: &DialogHistory,
    enc: &dyn TextEncoder,
    proj: &Projection,
    rnn: &RecurrentAggregator,
) -> Result<ConversationState> {
    c.validate()?;
    if proj.output_dim() != rnn.dim() {
        return Err(ConversationError::Dimension(format!(
            "projection width {} vs aggregator width {}",
            proj.output_dim(),
            rnn.dim()
        )));
    }
    let steps = c
        .positions()
        .into_iter()
        .map(|(y, x)| encode_turn_pair(&y, x, enc, proj))
        .collect::<Result<Vec<_>>>()?;
    let vector = rnn.run(steps.iter().map(|v| v.view()))?;
    Ok(ConversationState { vector, turn_count: steps.len() })
}
