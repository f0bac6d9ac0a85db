//! Sequence encoders injected into capsule routing after the first pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    BiLstm,
    Transformer,
    /// Zero map: the residual update leaves the projections unchanged.
    Disabled,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::BiLstm => "bilstm",
            EncoderKind::Transformer => "transformer",
            EncoderKind::Disabled => "none",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(EncoderKind::BiLstm),
            "transformer" => Ok(EncoderKind::Transformer),
            "none" => Ok(EncoderKind::Disabled),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    /// `d × 4h`
    pub input: Tensor,
    /// `h × 4h`
    pub recurrent: Tensor,
    /// `4h`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    /// `m × d` learned position embeddings.
    pub positions: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

/// Standalone encoder holding its own weights. The model keeps the same
/// tensors in its parameter store and records them with [`EncoderVars`].
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceEncoder {
    Disabled,
    BiLstm {
        forward: LstmWeights,
        backward: LstmWeights,
    },
    Transformer(TransformerWeights),
}

/// Encoder weights recorded on a tape.
#[derive(Clone, Debug)]
pub enum EncoderVars {
    Disabled,
    BiLstm {
        forward: [Var; 3],
        backward: [Var; 3],
    },
    Transformer {
        positions: Var,
        query: Var,
        key: Var,
        value: Var,
        output: Var,
    },
}

/// Hidden size per direction; the two directions concatenate back to `dim`.
pub fn bilstm_hidden(dim: usize) -> Result<usize> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "bidirectional encoder needs an even dimension, got {dim}"
        )));
    }
    Ok(dim / 2)
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl LstmWeights {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        LstmWeights {
            input: Tensor::zeros(&[dim, 4 * hidden]),
            recurrent: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn random(rng: &mut impl Rng, dim: usize, hidden: usize, std: f64) -> Self {
        LstmWeights {
            input: normal_tensor(rng, &[dim, 4 * hidden], std),
            recurrent: normal_tensor(rng, &[hidden, 4 * hidden], std),
            bias: normal_tensor(rng, &[4 * hidden], std),
        }
    }
}

impl SequenceEncoder {
    pub fn random_bilstm(rng: &mut impl Rng, dim: usize, std: f64) -> Result<Self> {
        let h = bilstm_hidden(dim)?;
        Ok(SequenceEncoder::BiLstm {
            forward: LstmWeights::random(rng, dim, h, std),
            backward: LstmWeights::random(rng, dim, h, std),
        })
    }

    pub fn zero_bilstm(dim: usize) -> Result<Self> {
        let h = bilstm_hidden(dim)?;
        Ok(SequenceEncoder::BiLstm {
            forward: LstmWeights::zeros(dim, h),
            backward: LstmWeights::zeros(dim, h),
        })
    }

    pub fn random_transformer(rng: &mut impl Rng, capacity: usize, dim: usize, std: f64) -> Self {
        SequenceEncoder::Transformer(TransformerWeights {
            positions: normal_tensor(rng, &[capacity, dim], std),
            query: normal_tensor(rng, &[dim, dim], std),
            key: normal_tensor(rng, &[dim, dim], std),
            value: normal_tensor(rng, &[dim, dim], std),
            output: normal_tensor(rng, &[dim, dim], std),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            SequenceEncoder::Disabled => EncoderKind::Disabled,
            SequenceEncoder::BiLstm { .. } => EncoderKind::BiLstm,
            SequenceEncoder::Transformer(_) => EncoderKind::Transformer,
        }
    }

    /// Records the weights as plain leaves.
    pub fn record(&self, tape: &mut Tape) -> EncoderVars {
        let mut lstm = |w: &LstmWeights| {
            [
                tape.leaf(w.input.clone()),
                tape.leaf(w.recurrent.clone()),
                tape.leaf(w.bias.clone()),
            ]
        };
        match self {
            SequenceEncoder::Disabled => EncoderVars::Disabled,
            SequenceEncoder::BiLstm { forward, backward } => EncoderVars::BiLstm {
                forward: lstm(forward),
                backward: lstm(backward),
            },
            SequenceEncoder::Transformer(w) => EncoderVars::Transformer {
                positions: tape.leaf(w.positions.clone()),
                query: tape.leaf(w.query.clone()),
                key: tape.leaf(w.key.clone()),
                value: tape.leaf(w.value.clone()),
                output: tape.leaf(w.output.clone()),
            },
        }
    }

    /// Encodes `z` (`m × d`). Padded rows of the output are zero; the
    /// disabled encoder returns all zeros.
    pub fn encode(&self, z: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let zv = tape.leaf(z.clone());
        match record_encode(&mut tape, &vars, zv, mask)? {
            Some(out) => Ok(tape.value(out).clone()),
            None => Ok(Tensor::zeros(z.shape())),
        }
    }
}

/// Records the encoder applied to `z`. Returns `None` for the zero map.
pub fn record_encode(tape: &mut Tape, enc: &EncoderVars, z: Var, mask: &[bool]) -> Result<Option<Var>> {
    match enc {
        EncoderVars::Disabled => Ok(None),
        EncoderVars::BiLstm { forward, backward } => {
            bilstm_hidden(tape.value(z).shape()[1])?;
            let f = tape.lstm(z, forward[0], forward[1], forward[2], mask, false)?;
            let b = tape.lstm(z, backward[0], backward[1], backward[2], mask, true)?;
            Ok(Some(tape.concat_cols(f, b)?))
        }
        EncoderVars::Transformer {
            positions,
            query,
            key,
            value,
            output,
        } => {
            let dim = tape.value(z).shape()[1];
            let placed = tape.add(z, *positions)?;
            let q = tape.matmul(placed, *query)?;
            let k = tape.matmul(placed, *key)?;
            let v = tape.matmul(placed, *value)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt());
            let attn = tape.softmax(scaled, Some(mask))?;
            let mixed = tape.matmul_canonical(attn, v)?;
            let projected = tape.matmul(mixed, *output)?;
            Ok(Some(tape.mask_rows(projected, mask)?))
        }
    }
}
