//! Candidate scoring: per-level attention over interests, inner-product
//! score, then fusion across levels.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Var};
use crate::seqcaps::InterestSet;

/// How level scores are combined at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    Max,
    Mean,
    Sum,
}

impl Pooling {
    pub fn fuse(self, level_scores: &[f64]) -> f64 {
        match self {
            Pooling::Max => level_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Pooling::Sum => level_scores.iter().sum(),
            Pooling::Mean => level_scores.iter().sum::<f64>() / level_scores.len() as f64,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    pub level_scores: Vec<f64>,
    pub fused_score: f64,
    /// `(L+1) × K`
    pub attention_weights: Tensor,
    /// `(L+1) × d`
    pub level_preferences: Tensor,
}

struct LevelScore {
    attention: Tensor,
    preference: Tensor,
    score: f64,
}

fn score_level(interests: &Tensor, candidate: &Tensor, mask: Option<&[bool]>) -> Result<LevelScore> {
    let logits = kernels::matmul(interests, candidate)?;
    let attention = kernels::softmax(&logits, mask)?;
    let preference = kernels::matmul_canonical(&attention, interests)?;
    let score = kernels::matmul(&preference, candidate)?.item();
    Ok(LevelScore {
        attention,
        preference,
        score,
    })
}

/// Scores one candidate embedding; the fused score is the max over levels.
pub fn score_candidate(interests: &InterestSet, candidate: &Tensor) -> Result<PredictionOutput> {
    score_candidate_pooled(interests, candidate, Pooling::Max)
}

pub fn score_candidate_pooled(
    interests: &InterestSet,
    candidate: &Tensor,
    pooling: Pooling,
) -> Result<PredictionOutput> {
    let (levels, k, d) = (interests.num_levels(), interests.num_interests(), interests.dim());
    if candidate.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "score_candidate",
            lhs: interests.interests.shape().to_vec(),
            rhs: candidate.shape().to_vec(),
        });
    }
    let mut level_scores = Vec::with_capacity(levels);
    let mut attention = Vec::with_capacity(levels * k);
    let mut preferences = Vec::with_capacity(levels * d);
    for l in 0..levels {
        let s = score_level(&interests.level(l), candidate, interests.mask.as_deref())?;
        level_scores.push(s.score);
        attention.extend_from_slice(s.attention.data());
        preferences.extend_from_slice(s.preference.data());
    }
    let fused_score = pooling.fuse(&level_scores);
    if !fused_score.is_finite() || level_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate score".into()));
    }
    Ok(PredictionOutput {
        level_scores,
        fused_score,
        attention_weights: Tensor::new(vec![levels, k], attention)?,
        level_preferences: Tensor::new(vec![levels, d], preferences)?,
    })
}

/// Scores each row of `candidates` (`n × d`); identical to calling
/// [`score_candidate`] per row.
pub fn score_candidates_batch(interests: &InterestSet, candidates: &Tensor) -> Result<Vec<PredictionOutput>> {
    score_candidates_batch_pooled(interests, candidates, Pooling::Max)
}

pub fn score_candidates_batch_pooled(
    interests: &InterestSet,
    candidates: &Tensor,
    pooling: Pooling,
) -> Result<Vec<PredictionOutput>> {
    if candidates.rank() != 2 || candidates.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected a non-empty n × d candidate matrix, got {:?}",
            candidates.shape()
        )));
    }
    (0..candidates.rows())
        .into_par_iter()
        .map(|i| {
            let x = Tensor::vector(candidates.row(i).to_vec());
            score_candidate_pooled(interests, &x, pooling)
        })
        .collect()
}

/// Lowest level attaining the maximum score.
pub fn activated_level(output: &PredictionOutput) -> usize {
    let mut best = 0;
    for (l, &s) in output.level_scores.iter().enumerate() {
        if s > output.level_scores[best] {
            best = l;
        }
    }
    best
}

/// Records one level's score `p·x` with `p = Σ softmax(Q x)_j q_j`.
pub fn record_level_score(tape: &mut Tape, interests: Var, candidate: Var, mask: Option<&[bool]>) -> Result<Var> {
    let logits = tape.matmul(interests, candidate)?;
    let attention = tape.softmax(logits, mask)?;
    let preference = tape.matmul_canonical(attention, interests)?;
    tape.matmul(preference, candidate)
}
