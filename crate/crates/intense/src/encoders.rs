//! Per-modality sequence encoder: one-hot letters, valid 1-d convolution,
//! ReLU, global max pooling over positions.
//!
//! Sequences are strings over the fixed alphabet A, C, G, T. The encoder
//! output width equals the filter count; max pooling makes the score
//! independent of where in the sequence a motif sits. Ties in the max
//! resolve to the lowest position so gradients are deterministic.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Fixed sequence alphabet, in index order.
pub const ALPHABET: [char; 4] = ['A', 'C', 'G', 'T'];

/// Maps a letter to its alphabet index.
pub fn letter_index(c: char) -> Result<u8> {
    match c {
        'A' => Ok(0),
        'C' => Ok(1),
        'G' => Ok(2),
        'T' => Ok(3),
        _ => Err(Error::UnknownLetter(c)),
    }
}

/// Encodes a sequence as alphabet indices.
pub fn sequence_indices(seq: &str) -> Result<Vec<u8>> {
    seq.chars().map(letter_index).collect()
}

/// Convolutional encoder hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Positions per filter.
    pub kernel_width: usize,
    /// Filter count; also the output width.
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kernel_width: 7,
            channels: 8,
        }
    }
}

/// Convolution weights `[channels, alphabet, kernel_width]` and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl EncoderParams {
    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn kernel_width(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// One-hot encoding: column `i` has a single 1 at the row of letter `i`.
pub fn one_hot(seq: &str) -> Result<Tensor> {
    let indices = sequence_indices(seq)?;
    let len = indices.len();
    let mut t = Tensor::zeros(&[ALPHABET.len(), len]);
    for (i, &row) in indices.iter().enumerate() {
        t.data_mut()[row as usize * len + i] = 1.0;
    }
    Ok(t)
}

/// Encodes one sequence: valid convolution, bias, ReLU, global max over
/// positions. The one-hot structure reduces each convolution window to a
/// gather-sum over the letters it covers.
pub fn encode(seq: &str, params: &EncoderParams, config: &EncoderConfig) -> Result<Tensor> {
    let indices = sequence_indices(seq)?;
    encode_indices(&indices, params, config)
}

pub fn encode_indices(
    indices: &[u8],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let (channels, kernel) = (config.channels, config.kernel_width);
    if indices.len() < kernel {
        return Err(Error::SequenceTooShort {
            len: indices.len(),
            kernel_width: kernel,
        });
    }
    debug_assert_eq!(params.weights.shape(), &[channels, ALPHABET.len(), kernel]);
    let positions = indices.len() - kernel + 1;
    let w = params.weights.data();
    let b = params.bias.data();
    let mut out = vec![0.0; channels];
    for (c, slot) in out.iter_mut().enumerate() {
        let wbase = c * ALPHABET.len() * kernel;
        let mut best = f64::NEG_INFINITY;
        for t in 0..positions {
            let mut acc = b[c];
            for (k, &letter) in indices[t..t + kernel].iter().enumerate() {
                acc += w[wbase + (letter as usize) * kernel + k];
            }
            let activated = acc.max(0.0);
            if activated > best {
                best = activated;
            }
        }
        *slot = best;
    }
    Ok(Tensor::vector(&out))
}

/// Weights uniform in `±1/sqrt(alphabet * kernel_width)`, bias zero;
/// deterministic for a seeded generator.
pub fn init_params(config: &EncoderConfig, rng: &mut impl Rng) -> EncoderParams {
    let bound = 1.0 / ((ALPHABET.len() * config.kernel_width) as f64).sqrt();
    let len = config.channels * ALPHABET.len() * config.kernel_width;
    let weights: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    EncoderParams {
        weights: Tensor::new(
            vec![config.channels, ALPHABET.len(), config.kernel_width],
            weights,
        )
        .expect("encoder weight shape"),
        bias: Tensor::zeros(&[config.channels]),
    }
}

/// Differentiable batch encoding on a tape: conv, ReLU, max over positions.
/// Returns the `[batch, channels]` representation node.
pub fn encode_batch_graph(
    tape: &mut Tape,
    seqs: Rc<Vec<Vec<u8>>>,
    weights: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let conv = tape.conv_seq(seqs, weights, bias)?;
    let activated = tape.relu(conv);
    Ok(tape.max_last_axis(activated))
}
